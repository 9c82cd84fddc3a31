"""Versioned checkpoint containers for the denoiser bundle and adapter sets.

Both are single torch.save archives with a documented top-level dict:

    denoiser:  {"format_version": 1, "kind": "denoiser",
                "dit_config": {...}, "T": int, "vocab_size": int,
                "state": full bundle state_dict}
    adapters:  {"format_version": 1, "kind": "adapters",
                "targets": [...], "rank": int, "scale": float,
                "state": {target: {"A": tensor, "B": tensor}}}

Field names are stable across releases; readers reject unknown versions.
"""

from dataclasses import asdict

import torch

from .bundle import DenoiserBundle
from .dit import DitConfig
from .lora import LoraSet, attach

FORMAT_VERSION = 1


def save_denoiser(path, bundle: DenoiserBundle):
    torch.save(
        {
            "format_version": FORMAT_VERSION,
            "kind": "denoiser",
            "dit_config": asdict(bundle.cfg),
            "T": bundle.T,
            "vocab_size": bundle.text.vocab_size,
            "state": bundle.state_dict(),
        },
        path,
    )


def _load(path, kind: str) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("kind") != kind:
        raise ValueError(f"{path}: not a {kind} checkpoint")
    if blob.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"{path}: unsupported format_version {blob.get('format_version')}"
        )
    return blob


def load_denoiser(path) -> DenoiserBundle:
    blob = _load(path, "denoiser")
    cfg = DitConfig(**blob["dit_config"])
    bundle = DenoiserBundle(cfg, T=blob["T"], vocab_size=blob["vocab_size"])
    bundle.load_state_dict(blob["state"])
    return bundle


def save_adapters(path, adapters: LoraSet):
    torch.save(
        {
            "format_version": FORMAT_VERSION,
            "kind": "adapters",
            "targets": list(adapters.adapters.keys()),
            "rank": adapters.rank,
            "scale": adapters.scale,
            "state": adapters.state_dict(),
        },
        path,
    )


def load_adapters(path, bundle: DenoiserBundle) -> LoraSet:
    """Attach adapters described by the checkpoint onto `bundle` and load factors."""
    blob = _load(path, "adapters")
    adapters = attach(bundle, blob["targets"], rank=blob["rank"], scale=blob["scale"])
    adapters.load_state_dict(blob["state"])
    return adapters
