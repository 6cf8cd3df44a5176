"""Attention masks for full, block, and block-dropout attention.

Masks are dense boolean matrices where ``allowed[i, j]`` means query row
``i`` may attend to key column ``j``. The ``reference_*`` functions
enumerate the same predicates pair by pair and exist only as oracles.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from blockattn.errors import ContractError


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous, non-overlapping half-open ranges covering ``[0, n)``.

    The last range is the query block and is the only one allowed to
    attend to earlier blocks.
    """

    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        ranges = tuple((int(s), int(e)) for s, e in self.ranges)
        object.__setattr__(self, "ranges", ranges)
        if not ranges:
            raise ContractError("partition needs at least one block")
        cursor = 0
        for start, end in ranges:
            if start != cursor:
                raise ContractError(f"block ranges must be contiguous from 0, got {ranges}")
            if end <= start:
                raise ContractError(f"empty block in partition {ranges}")
            cursor = end

    @classmethod
    def from_lengths(cls, lengths: Iterable[int]) -> "BlockPartition":
        ranges = []
        start = 0
        for length in lengths:
            ranges.append((start, start + int(length)))
            start += int(length)
        return cls(tuple(ranges))

    @classmethod
    def from_boundaries(cls, n: int, boundaries: Iterable[int]) -> "BlockPartition":
        """Build from interior cut offsets (0 and n are implied)."""
        cuts = sorted({int(b) for b in boundaries if 0 < int(b) < n})
        edges = [0, *cuts, n]
        return cls(tuple(zip(edges[:-1], edges[1:])))

    @property
    def n(self) -> int:
        return self.ranges[-1][1]

    @property
    def parallel_degree(self) -> int:
        return len(self.ranges)

    @property
    def lengths(self) -> list[int]:
        return [e - s for s, e in self.ranges]

    @property
    def boundaries(self) -> list[int]:
        """Interior block start offsets."""
        return [s for s, _ in self.ranges[1:]]

    @property
    def final_index(self) -> int:
        return len(self.ranges) - 1

    def block_ids(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.ranges)), self.lengths)

    def block_of(self, i: int) -> int:
        for idx, (s, e) in enumerate(self.ranges):
            if s <= i < e:
                return idx
        raise IndexError(i)


@dataclass(frozen=True)
class DropoutPlan:
    """Indices of blocks forced into block-local attention."""

    corrupted: frozenset[int] = field(default_factory=frozenset)
    rate: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "corrupted", frozenset(int(c) for c in self.corrupted))
        if not 0.0 <= self.rate <= 1.0:
            raise ContractError(f"dropout rate must be in [0, 1], got {self.rate}")

    def check(self, partition: BlockPartition) -> None:
        if partition.final_index in self.corrupted:
            raise ContractError("the final block can never be corrupted")
        bad = [c for c in self.corrupted if not 0 <= c < partition.final_index]
        if bad:
            raise ContractError(f"corrupted indices out of range: {sorted(bad)}")

    def token_mask(self, partition: BlockPartition) -> np.ndarray:
        """Boolean vector, True for tokens inside corrupted blocks."""
        ids = partition.block_ids()
        return np.isin(ids, sorted(self.corrupted))


@dataclass(frozen=True, eq=False)
class AttentionMask:
    allowed: np.ndarray

    def __post_init__(self) -> None:
        allowed = np.asarray(self.allowed, dtype=bool)
        if allowed.ndim != 2 or allowed.shape[0] != allowed.shape[1]:
            raise ContractError(f"mask must be square, got shape {allowed.shape}")
        if np.triu(allowed, k=1).any():
            raise ContractError("mask allows attention to future positions")
        allowed = allowed.copy()
        allowed.flags.writeable = False
        object.__setattr__(self, "allowed", allowed)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return self.allowed.shape == other.allowed.shape and bool((self.allowed == other.allowed).all())

    __hash__ = None  # type: ignore[assignment]

    @property
    def n(self) -> int:
        return self.allowed.shape[0]

    def allows(self, i: int, j: int) -> bool:
        return bool(self.allowed[i, j])

    def pair_count(self) -> int:
        return int(self.allowed.sum())

    def pairs(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in zip(*np.nonzero(self.allowed))}

    def as_tensor(self) -> torch.Tensor:
        return torch.from_numpy(np.array(self.allowed))

    def to_text(self) -> str:
        """Render as a grid of '#' (allowed) and '.' (masked), one row per line."""
        return "\n".join("".join("#" if a else "." for a in row) for row in self.allowed) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AttentionMask":
        rows = [line for line in text.splitlines() if line.strip()]
        return cls(np.array([[c == "#" for c in row.strip()] for row in rows], dtype=bool))


def build_full_causal(n: int) -> AttentionMask:
    if n < 1:
        raise ContractError("mask size must be at least 1")
    return AttentionMask(np.tril(np.ones((n, n), dtype=bool)))


def _local_or_causal(partition: BlockPartition, local_blocks: Sequence[int]) -> AttentionMask:
    ids = partition.block_ids()
    causal = np.tril(np.ones((partition.n, partition.n), dtype=bool))
    same_block = ids[:, None] == ids[None, :]
    row_is_local = np.isin(ids, list(local_blocks))
    allowed = causal & (same_block | ~row_is_local[:, None])
    return AttentionMask(allowed)


def build_block_mask(partition: BlockPartition) -> AttentionMask:
    return _local_or_causal(partition, range(partition.final_index))


def build_dropout_mask(partition: BlockPartition, plan: DropoutPlan) -> AttentionMask:
    plan.check(partition)
    return _local_or_causal(partition, sorted(plan.corrupted))


def sample_dropout_plan(partition: BlockPartition, rate: float, rng_seed) -> DropoutPlan:
    """Corrupt each non-final block independently with probability ``rate``.

    ``rng_seed`` may be an int or an existing ``numpy.random.Generator``.
    """
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"dropout rate must be in [0, 1], got {rate}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    draws = rng.random(partition.final_index)
    return DropoutPlan(frozenset(int(i) for i in np.nonzero(draws < rate)[0]), rate)


# ---------------------------------------------------------------------------
# brute-force oracles


def _enumerate(n: int, predicate) -> AttentionMask:
    allowed = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            allowed[i, j] = bool(predicate(i, j))
    return AttentionMask(allowed)


def _which_block(ranges, i: int) -> int:
    for idx, (s, e) in enumerate(ranges):
        if s <= i < e:
            return idx
    raise IndexError(i)


def reference_full_causal(n: int) -> AttentionMask:
    return _enumerate(n, lambda i, j: j <= i)


def reference_block_mask(partition: BlockPartition) -> AttentionMask:
    ranges = partition.ranges
    last = len(ranges) - 1

    def allowed(i: int, j: int) -> bool:
        bi = _which_block(ranges, i)
        if bi == last:
            return j <= i
        return j <= i and _which_block(ranges, j) == bi

    return _enumerate(partition.n, allowed)


def reference_dropout_mask(partition: BlockPartition, plan: DropoutPlan) -> AttentionMask:
    ranges = partition.ranges

    def allowed(i: int, j: int) -> bool:
        bi = _which_block(ranges, i)
        if bi in plan.corrupted:
            return j <= i and _which_block(ranges, j) == bi
        return j <= i

    return _enumerate(partition.n, allowed)
