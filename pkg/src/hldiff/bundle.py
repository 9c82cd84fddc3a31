"""Denoiser bundle: DiT backbone + conditioning encoder + latent codec.

The bundle is the unit checkpoints store and adapters attach to; adapter
target names are dotted module paths under it ("dit.blocks.0.self_attn.q",
"text.blocks.1.ffn.lin1", ...).
"""

import torch
import torch.nn as nn

from .codec import IdentityCodec
from .dit import Dit, DitConfig
from .text_encoder import PAD_ID, TextEmbedding, TextEncoder


class DenoiserBundle(nn.Module):
    def __init__(self, cfg: DitConfig, T: int, vocab_size: int = 4096):
        super().__init__()
        self.cfg = cfg
        self.T = T
        self.dit = Dit(cfg)
        self.text = TextEncoder(cfg.cond_dim, cfg.cond_max_tokens, vocab_size=vocab_size)
        self.codec = IdentityCodec(cfg.latent_size, cfg.latent_channels)

    def encode_text(self, captions: list[str]) -> TextEmbedding:
        return self.text(captions)

    def encode_uncond(self, batch: int) -> TextEmbedding:
        """Encoding of the empty caption (all-pad tokens, mask all-false)."""
        return self.text([""] * batch)

    def predict_eps(self, z_t: torch.Tensor, t: torch.Tensor, cond: TextEmbedding) -> torch.Tensor:
        if torch.any(t < 1) or torch.any(t > self.T):
            raise ValueError(f"timesteps must lie in 1..{self.T}")
        return self.dit(z_t, t, cond)

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        return self.codec.encode(x)

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.codec.decode(z)


def init_bundle(cfg: DitConfig, T: int, vocab_size: int = 4096,
                generator: torch.Generator | None = None) -> DenoiserBundle:
    """Build a bundle; with `generator`, initialization is fully reproducible.

    Weights are drawn from the generator (deliberate zero inits kept), biases
    are zeroed, layer-norm gains stay at their deterministic defaults; no
    parameter depends on global RNG state.
    """
    bundle = DenoiserBundle(cfg, T, vocab_size=vocab_size)
    if generator is not None:
        with torch.no_grad():
            for name, p in bundle.named_parameters():
                if p.ndim >= 2:
                    if p.abs().sum() == 0:  # zero-initialized output head
                        continue
                    nn.init.xavier_uniform_(p, generator=generator)
                elif name.endswith("bias"):
                    p.zero_()
            bundle.text.embed.weight[PAD_ID].zero_()
    return bundle
