"""Candidate cut-token insertion and removal."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from blockattn.errors import ContractError
from blockattn.tokenizer import CUT_ID

RULES: dict[str, bytes] = {
    "newline": b"\n",
    "space": b" ",
    "sentence_punctuation": b".!?",
}


def match_offsets(text: Sequence[int], rule: str) -> list[int]:
    """Text offsets right after every rule match, excluding the end of text."""
    try:
        chars = set(RULES[rule])
    except KeyError:
        raise ContractError(f"unknown insertion rule {rule!r}; choose from {sorted(RULES)}") from None
    n = len(text)
    return [i + 1 for i, t in enumerate(text) if t in chars and i + 1 < n]


@dataclass(frozen=True)
class CandidateCutSet:
    """Text interleaved with candidate cut tokens ``C_0 .. C_n``.

    ``positions[i]`` is the index of ``C_i`` inside ``tokens``;
    ``text_offsets[i]`` is the text offset that ``C_i`` sits in front of.
    ``base_offset`` locates this text inside a larger document.
    """

    tokens: tuple[int, ...]
    positions: tuple[int, ...]
    text_offsets: tuple[int, ...]
    rule: str
    cut_id: int = CUT_ID
    base_offset: int = 0

    @property
    def n(self) -> int:
        """Index of the last candidate, so internal candidates are 1..n-1."""
        return len(self.positions) - 1

    @property
    def num_internal(self) -> int:
        return len(self.positions) - 2

    @property
    def internal_offsets(self) -> tuple[int, ...]:
        return self.text_offsets[1:-1]

    @property
    def text_len(self) -> int:
        return self.text_offsets[-1]

    def text_tokens(self) -> list[int]:
        return strip_candidates(self.tokens, self.cut_id)


def from_offsets(
    text: Sequence[int],
    offsets: Iterable[int],
    rule: str = "explicit",
    cut_id: int = CUT_ID,
    base_offset: int = 0,
) -> CandidateCutSet:
    """Insert a candidate in front of each given interior text offset."""
    text = [int(t) for t in text]
    if not text:
        raise ContractError("cannot insert candidates into empty text")
    if cut_id in text:
        raise ContractError("text already contains the candidate cut token id")
    inner = sorted(set(int(o) for o in offsets))
    if inner and (inner[0] <= 0 or inner[-1] >= len(text)):
        raise ContractError("candidate offsets must lie strictly inside the text")
    tokens = [cut_id]
    positions = [0]
    cursor = 0
    for off in inner + [len(text)]:
        tokens.extend(text[cursor:off])
        positions.append(len(tokens))
        tokens.append(cut_id)
        cursor = off
    return CandidateCutSet(tuple(tokens), tuple(positions), tuple([0] + inner + [len(text)]), rule, cut_id, base_offset)


def insert_candidates(
    text: Sequence[int], rule: str = "newline", cut_id: int = CUT_ID, base_offset: int = 0
) -> CandidateCutSet:
    return from_offsets(text, match_offsets(text, rule), rule, cut_id, base_offset)


def strip_candidates(tokens: Iterable[int], cut_id: int = CUT_ID) -> list[int]:
    return [int(t) for t in tokens if int(t) != cut_id]
