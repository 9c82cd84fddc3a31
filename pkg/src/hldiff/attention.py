"""Attention blocks shared by the denoiser and the conditioning encoder.

Projections are individual named nn.Linear layers (q, k, v, out) so low-rank
adapters can attach to each one by dotted path. Key masking is exact: a
sample whose key mask is all-false contributes exactly zero from attention
(residual stream passes through unchanged), with no NaN in forward or
backward.
"""

import math

import torch
import torch.nn as nn


def sinusoidal_embedding(pos: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Classic sin/cos embedding of positions `pos` [N] into [N, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32) / half
    )
    args = pos.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _masked_attention(q, k, v, key_mask):
    """Scaled dot-product attention with exact key masking.

    q: [B,h,Nq,dh], k/v: [B,h,Nk,dh], key_mask: [B,Nk] bool or None.
    Fully masked samples yield a zero context (handled NaN-free by zeroing
    their score rows before softmax and their attention weights after).
    """
    dh = q.shape[-1]
    scores = q @ k.transpose(-2, -1) / math.sqrt(dh)  # [B,h,Nq,Nk]
    if key_mask is None:
        return torch.softmax(scores, dim=-1) @ v
    valid = key_mask[:, None, None, :]
    any_valid = key_mask.any(dim=-1)[:, None, None, None]
    scores = scores.masked_fill(~valid, float("-inf"))
    scores = torch.where(any_valid, scores, torch.zeros_like(scores))
    attn = torch.softmax(scores, dim=-1) * any_valid.to(scores.dtype)
    return attn @ v


class Attention(nn.Module):
    """Multi-head attention over (query, context) with optional context mask.

    Self-attention passes the same tensor for both; cross-attention reads
    queries from the latent stream and keys/values from conditioning tokens
    (possibly of a different width `ctx_dim`).
    """

    def __init__(self, dim: int, heads: int, ctx_dim: int | None = None):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        ctx_dim = dim if ctx_dim is None else ctx_dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(ctx_dim, dim)
        self.v = nn.Linear(ctx_dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, ctx=None, ctx_mask=None):
        # x: [B,N,dim]; ctx: [B,L,ctx_dim] (defaults to x); ctx_mask: [B,L] bool
        ctx = x if ctx is None else ctx
        B, N, _ = x.shape
        L = ctx.shape[1]

        def heads_of(t, n):
            return t.view(B, n, self.heads, self.head_dim).transpose(1, 2)

        q = heads_of(self.q(x), N)
        k = heads_of(self.k(ctx), L)
        v = heads_of(self.v(ctx), L)
        h = _masked_attention(q, k, v, ctx_mask)  # [B,h,N,dh]
        h = h.transpose(1, 2).reshape(B, N, self.heads * self.head_dim)
        out = self.out(h)
        if ctx_mask is not None:
            # kill the out-projection bias for samples with nothing to attend to
            out = out * ctx_mask.any(dim=-1).to(out.dtype)[:, None, None]
        return out


class FeedForward(nn.Module):
    """Two-layer MLP with GELU; projections named lin1/lin2 for adapters."""

    def __init__(self, dim: int, hidden_mult: int = 4):
        super().__init__()
        self.lin1 = nn.Linear(dim, dim * hidden_mult)
        self.lin2 = nn.Linear(dim * hidden_mult, dim)
        self.act = nn.GELU()

    def forward(self, x):
        return self.lin2(self.act(self.lin1(x)))
