"""Conditioning (text) encoder: hash-bucketed vocabulary, small transformer.

A desk-scale stand-in for a pretrained encoder. Words are hashed into a fixed
bucket vocabulary (crc32, so ids are stable across processes), embedded, and
passed through two transformer blocks whose attention and feed-forward
projections are named linear layers, so low-rank adapters attach to them the
same way they would on a full-size encoder.

An empty caption encodes to an all-pad row with an all-false mask; downstream
cross-attention ignores it entirely, which is what the guided sampler uses as
the unconditional branch.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import zlib

from .attention import Attention, FeedForward, sinusoidal_embedding
from .tokenization import split_tokens

PAD_ID = 0


@dataclass
class TextEmbedding:
    """Conditioning tokens [B, L, cond_dim] and validity mask [B, L]."""

    tokens: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if self.tokens.shape[:2] != self.mask.shape:
            raise ValueError(
                f"tokens {tuple(self.tokens.shape)} and mask {tuple(self.mask.shape)} disagree"
            )

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]


def hash_token_ids(caption: str, vocab_size: int) -> list[int]:
    """Stable token ids in [1, vocab_size-1]; 0 is reserved for padding."""
    return [
        1 + zlib.crc32(w.lower().encode("utf-8")) % (vocab_size - 1)
        for w in split_tokens(caption)
    ]


class _EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim)

    def forward(self, x, mask):
        x = x + self.attn(self.norm1(x), ctx_mask=mask)
        x = x + self.ffn(self.norm2(x))
        return x


class TextEncoder(nn.Module):
    """Token embedding + positions + 2 transformer blocks + final norm."""

    def __init__(self, cond_dim: int, max_tokens: int, vocab_size: int = 4096,
                 heads: int = 4, depth: int = 2):
        super().__init__()
        if max_tokens > 120:
            raise ValueError(f"max_tokens must be <= 120, got {max_tokens}")
        self.cond_dim = cond_dim
        self.max_tokens = max_tokens
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, cond_dim, padding_idx=PAD_ID)
        pos = sinusoidal_embedding(torch.arange(max_tokens), cond_dim)
        self.register_buffer("pos_embed", pos, persistent=False)
        self.blocks = nn.ModuleList(_EncoderBlock(cond_dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(cond_dim)

    def forward(self, captions: list[str]) -> TextEmbedding:
        """Encode a non-empty batch of captions, truncating past max_tokens.

        Deterministic for fixed weights; identical captions give identical rows.
        """
        if len(captions) == 0:
            raise ValueError("caption list must be non-empty")
        ids = [hash_token_ids(c, self.vocab_size)[: self.max_tokens] for c in captions]
        L = max(1, max(len(row) for row in ids))
        dev = self.embed.weight.device
        id_mat = torch.full((len(captions), L), PAD_ID, dtype=torch.long, device=dev)
        mask = torch.zeros(len(captions), L, dtype=torch.bool, device=dev)
        for b, row in enumerate(ids):
            if row:
                id_mat[b, : len(row)] = torch.tensor(row, dtype=torch.long, device=dev)
                mask[b, : len(row)] = True
        x = self.embed(id_mat) + self.pos_embed[:L].to(dtype=self.embed.weight.dtype)
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.norm(x)
        return TextEmbedding(tokens=x, mask=mask)
