"""Byte-level tokenizer with two reserved special ids.

Token ids 0..255 are raw UTF-8 bytes, so a token index is also a byte
offset into the encoded text.
"""
from __future__ import annotations

BYTE_VOCAB = 256
SINK_ID = 256  # <|block_start|>
CUT_ID = 257  # candidate cut token
VOCAB_SIZE = 258

SPECIAL_NAMES = {SINK_ID: "<|block_start|>", CUT_ID: "<cut>"}


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(ids) -> str:
    """Decode byte ids back to text; special tokens are rendered by name."""
    out = bytearray()
    parts: list[str] = []
    for i in ids:
        i = int(i)
        if i < BYTE_VOCAB:
            out.append(i)
        else:
            parts.append(out.decode("utf-8", errors="replace"))
            out = bytearray()
            parts.append(SPECIAL_NAMES.get(i, f"<{i}>"))
    parts.append(out.decode("utf-8", errors="replace"))
    return "".join(parts)
