"""Tokenizers for caption budgeting and the conditioning encoder.

The token budget (<=120) in caption manifests is tokenizer-specific, so every
record carries the id of the tokenizer that produced its count. The default
splits on word characters and punctuation; alternates can be plugged in behind
the same three-method surface.
"""

import re

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def split_tokens(text: str) -> list[str]:
    """Words and single punctuation marks, in order."""
    return _TOKEN_RE.findall(text)


class WhitespacePunctTokenizer:
    """Default tokenizer: word chars and punctuation as separate tokens."""

    tokenizer_id = "ws-punct-v1"

    def tokenize(self, text: str) -> list[str]:
        return split_tokens(text)

    def count(self, text: str) -> int:
        return len(split_tokens(text))

    def truncate(self, text: str, max_tokens: int) -> str:
        """Cut `text` after its max_tokens-th token, preserving original spacing."""
        if max_tokens < 0:
            raise ValueError("max_tokens must be >= 0")
        spans = [m.span() for m in _TOKEN_RE.finditer(text)]
        if len(spans) <= max_tokens:
            return text
        if max_tokens == 0:
            return ""
        return text[: spans[max_tokens - 1][1]]
