"""Toy diffusion transformer denoiser with cross-attention text conditioning.

Latents are patchified into tokens, a sinusoidal timestep embedding is added
to every patch token, and each block runs self-attention, cross-attention
over the conditioning tokens (key-masked, exact), and a feed-forward MLP.
The output head is zero-initialized, so a fresh model predicts zero noise.

All attention/FFN projections are named linears (blocks.N.self_attn.q, ...)
addressable by the adapter module.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .attention import Attention, FeedForward, sinusoidal_embedding
from .text_encoder import TextEmbedding


@dataclass(frozen=True)
class DitConfig:
    latent_channels: int = 3
    latent_size: int = 32
    patch_size: int = 4
    hidden_dim: int = 64
    depth: int = 2
    heads: int = 4
    cond_dim: int = 32
    cond_max_tokens: int = 120

    def __post_init__(self):
        if self.latent_size % self.patch_size != 0:
            raise ValueError(
                f"latent_size {self.latent_size} not divisible by patch_size {self.patch_size}"
            )
        if self.hidden_dim % self.heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )
        if self.cond_max_tokens > 120:
            raise ValueError(f"cond_max_tokens must be <= 120, got {self.cond_max_tokens}")

    @property
    def grid(self) -> int:
        return self.latent_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid


def _pos_embed_2d(grid: int, dim: int) -> torch.Tensor:
    """Fixed 2D sin/cos positional table, [grid*grid, dim] (row half + col half)."""
    half = dim // 2
    rows = sinusoidal_embedding(torch.arange(grid), half)       # [g, half]
    cols = sinusoidal_embedding(torch.arange(grid), dim - half)  # [g, dim-half]
    r = rows[:, None, :].expand(grid, grid, half)
    c = cols[None, :, :].expand(grid, grid, dim - half)
    return torch.cat([r, c], dim=-1).reshape(grid * grid, dim)


class _DitBlock(nn.Module):
    def __init__(self, dim: int, heads: int, cond_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads, ctx_dim=cond_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim)

    def forward(self, x, cond, cond_mask):
        x = x + self.self_attn(self.norm1(x))
        x = x + self.cross_attn(self.norm2(x), ctx=cond.to(x.dtype), ctx_mask=cond_mask)
        x = x + self.ffn(self.norm3(x))
        return x


class Dit(nn.Module):
    """Noise predictor eps(z_t, t, conditioning tokens)."""

    def __init__(self, cfg: DitConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.patch_in = nn.Conv2d(cfg.latent_channels, d, cfg.patch_size, cfg.patch_size)
        self.register_buffer("pos_embed", _pos_embed_2d(cfg.grid, d), persistent=False)
        self.time_mlp = nn.Sequential(nn.Linear(d, d * 2), nn.SiLU(), nn.Linear(d * 2, d))
        self.blocks = nn.ModuleList(
            _DitBlock(d, cfg.heads, cfg.cond_dim) for _ in range(cfg.depth)
        )
        self.norm_out = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.latent_channels * cfg.patch_size ** 2)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: TextEmbedding) -> torch.Tensor:
        cfg = self.cfg
        B, C, H, W = z_t.shape
        if (C, H, W) != (cfg.latent_channels, cfg.latent_size, cfg.latent_size):
            raise ValueError(
                f"latent shape {tuple(z_t.shape[1:])} does not match config "
                f"({cfg.latent_channels},{cfg.latent_size},{cfg.latent_size})"
            )
        if t.shape != (B,):
            raise ValueError(f"t must have shape [{B}], got {tuple(t.shape)}")
        if cond.batch != B:
            raise ValueError(f"cond batch {cond.batch} != latent batch {B}")

        x = self.patch_in(z_t)                        # [B, d, g, g]
        x = x.flatten(2).transpose(1, 2)              # [B, N, d]
        x = x + self.pos_embed.to(x.dtype)
        temb = sinusoidal_embedding(t.to(z_t.device), cfg.hidden_dim).to(x.dtype)
        x = x + self.time_mlp(temb)[:, None, :]       # timestep added to every token
        for blk in self.blocks:
            x = blk(x, cond.tokens, cond.mask)
        x = self.head(self.norm_out(x))               # [B, N, C*p*p]

        p, g = cfg.patch_size, cfg.grid
        x = x.view(B, g, g, C, p, p)
        x = x.permute(0, 3, 1, 4, 2, 5).reshape(B, C, H, W)
        return x
