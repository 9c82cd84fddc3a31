"""Low-rank adaptation of named linear layers.

A wrapped layer computes base(x) + scale * A(B(x)) with A in R^{out x r}
and B in R^{r x in}, so the effective weight update is scale * A @ B.
B starts at zero: a freshly attached adapter set leaves every forward output
bitwise unchanged, and training starts exactly at the base model. Attaching
freezes all host parameters; only the A/B factors remain trainable.
"""

from collections import OrderedDict

import torch
import torch.nn as nn
import torch.nn.functional as F


class LoraLinear(nn.Module):
    """nn.Linear wrapper adding the low-rank path scale * x B^T A^T."""

    def __init__(self, base: nn.Linear, rank: int, scale: float,
                 generator: torch.Generator | None = None):
        super().__init__()
        out_f, in_f = base.weight.shape
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        if rank > min(out_f, in_f):
            raise ValueError(
                f"rank {rank} exceeds layer dimensions ({out_f}, {in_f})"
            )
        self.base = base
        self.rank = rank
        self.scale = scale
        self.lora_A = nn.Parameter(torch.empty(out_f, rank, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(rank, in_f, dtype=base.weight.dtype))
        with torch.no_grad():
            self.lora_A.normal_(0.0, 0.02, generator=generator)

    def forward(self, x):
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_B), self.lora_A)

    def delta_weight(self) -> torch.Tensor:
        return self.scale * self.lora_A @ self.lora_B


def merged_weight(base: torch.Tensor, lora_A: torch.Tensor, lora_B: torch.Tensor,
                  scale: float = 1.0) -> torch.Tensor:
    """base + scale * A @ B; forward with this weight equals the adapter path."""
    if base.shape != (lora_A.shape[0], lora_B.shape[1]) or lora_A.shape[1] != lora_B.shape[0]:
        raise ValueError(
            f"dimension mismatch: base {tuple(base.shape)}, "
            f"A {tuple(lora_A.shape)}, B {tuple(lora_B.shape)}"
        )
    return base + scale * lora_A @ lora_B


def _resolve(root: nn.Module, target: str):
    parts = target.split(".")
    parent = root
    for name in parts[:-1]:
        if not hasattr(parent, name):
            raise KeyError(f"unknown target layer: {target}")
        parent = getattr(parent, name)
    leaf = parts[-1]
    if not hasattr(parent, leaf):
        raise KeyError(f"unknown target layer: {target}")
    return parent, leaf, getattr(parent, leaf)


class LoraSet:
    """Adapters attached to a host model, keyed by dotted layer path."""

    def __init__(self, host: nn.Module, adapters: "OrderedDict[str, LoraLinear]",
                 rank: int, scale: float):
        self.host = host
        self.adapters = adapters
        self.rank = rank
        self.scale = scale

    def parameters(self):
        for ad in self.adapters.values():
            yield ad.lora_A
            yield ad.lora_B

    def named_factors(self):
        for target, ad in self.adapters.items():
            yield target, ad.lora_A, ad.lora_B

    def param_count(self) -> int:
        return sum(a.numel() + b.numel() for _, a, b in self.named_factors())

    def zero_factors(self):
        """Reset every B to zero (adapter path contributes nothing)."""
        with torch.no_grad():
            for ad in self.adapters.values():
                ad.lora_B.zero_()

    def detach(self):
        """Restore the original linear layers; the host is bitwise the base model."""
        for target, ad in self.adapters.items():
            parent, leaf, _ = _resolve(self.host, target)
            setattr(parent, leaf, ad.base)
        self.adapters = OrderedDict()
        for p in self.host.parameters():
            p.requires_grad_(True)

    def state_dict(self) -> dict:
        return {
            target: {"A": a.detach().clone(), "B": b.detach().clone()}
            for target, a, b in self.named_factors()
        }

    def load_state_dict(self, state: dict):
        if set(state) != set(self.adapters):
            raise ValueError(
                f"adapter targets mismatch: have {sorted(self.adapters)}, "
                f"loading {sorted(state)}"
            )
        with torch.no_grad():
            for target, ad in self.adapters.items():
                ad.lora_A.copy_(state[target]["A"])
                ad.lora_B.copy_(state[target]["B"])


def attach(host: nn.Module, targets: list[str], rank: int, scale: float = 1.0,
           generator: torch.Generator | None = None) -> LoraSet:
    """Wrap each target linear layer and freeze the host's own parameters."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    resolved = []
    for target in targets:
        parent, leaf, layer = _resolve(host, target)
        if isinstance(layer, LoraLinear):
            raise ValueError(f"target already adapted: {target}")
        if not isinstance(layer, nn.Linear):
            raise TypeError(f"target is not a linear layer: {target} ({type(layer).__name__})")
        resolved.append((target, parent, leaf, layer))
    if len({t for t, *_ in resolved}) != len(resolved):
        raise ValueError("duplicate targets")

    for p in host.parameters():
        p.requires_grad_(False)

    adapters: OrderedDict[str, LoraLinear] = OrderedDict()
    for target, parent, leaf, layer in resolved:
        wrapped = LoraLinear(layer, rank, scale, generator=generator)
        setattr(parent, leaf, wrapped)
        adapters[target] = wrapped
    return LoraSet(host, adapters, rank, scale)


def default_targets(bundle, include_text: bool = True) -> list[str]:
    """All attention projections and feed-forward layers of the bundle.

    DiT: self-attention q/k/v/out, cross-attention q/k/v/out, both FFN
    projections, per block; conditioning encoder: the same per encoder block.
    """
    names = []
    for i in range(len(bundle.dit.blocks)):
        for mod in ("self_attn", "cross_attn"):
            for proj in ("q", "k", "v", "out"):
                names.append(f"dit.blocks.{i}.{mod}.{proj}")
        names.append(f"dit.blocks.{i}.ffn.lin1")
        names.append(f"dit.blocks.{i}.ffn.lin2")
    if include_text:
        for i in range(len(bundle.text.blocks)):
            for proj in ("q", "k", "v", "out"):
                names.append(f"text.blocks.{i}.attn.{proj}")
            names.append(f"text.blocks.{i}.ffn.lin1")
            names.append(f"text.blocks.{i}.ffn.lin2")
    return names
