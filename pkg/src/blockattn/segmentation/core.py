"""Candidate scoring, threshold decisions and recursive refinement."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from blockattn.errors import ContractError
from blockattn.masks import BlockPartition
from blockattn.segmentation.candidates import CandidateCutSet, from_offsets, insert_candidates


class Scorer(Protocol):
    def score(self, cands: CandidateCutSet) -> np.ndarray:
        """Probability for each internal candidate ``C_1 .. C_{n-1}``."""


def even_pick(m: int, k: int) -> list[int]:
    """Indices of ``k - 1`` evenly spaced items out of ``m`` (cuts for ``k`` blocks)."""
    if k < 1:
        raise ContractError("parallel degree must be at least 1")
    if k - 1 > m:
        raise ContractError(f"parallel degree {k} needs {k - 1} cut points but only {m} exist")
    return [(j * m) // k for j in range(1, k)]


@dataclass
class AverageScorer:
    """Probability 1 on evenly spaced candidates giving ``parallel_degree`` blocks, else 0."""

    parallel_degree: int

    def score(self, cands: CandidateCutSet) -> np.ndarray:
        probs = np.zeros(cands.num_internal)
        probs[even_pick(cands.num_internal, self.parallel_degree)] = 1.0
        return probs


@dataclass
class FixedScorer:
    """Looks probabilities up by absolute document offset; unknown offsets score 0."""

    by_offset: dict[int, float]

    def score(self, cands: CandidateCutSet) -> np.ndarray:
        return np.array([self.by_offset.get(cands.base_offset + o, 0.0) for o in cands.internal_offsets])


def score_candidates(scorer: Scorer, cands: CandidateCutSet) -> np.ndarray:
    probs = np.asarray(scorer.score(cands), dtype=np.float64)
    if probs.shape != (cands.num_internal,):
        raise ContractError(f"scorer returned {probs.shape} probabilities for {cands.num_internal} candidates")
    return probs


def accepted_offsets(cands: CandidateCutSet, probs: Sequence[float], threshold: float) -> list[int]:
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must be in (0, 1), got {threshold}")
    if len(probs) != cands.num_internal:
        raise ContractError(f"{len(probs)} probabilities for {cands.num_internal} internal candidates")
    return [o for o, p in zip(cands.internal_offsets, probs) if p >= threshold]


def decide_cuts(cands: CandidateCutSet, probs: Sequence[float], threshold: float) -> BlockPartition:
    """Blocks between consecutive accepted cuts, in candidate-free text offsets."""
    return BlockPartition.from_boundaries(cands.text_len, accepted_offsets(cands, probs, threshold))


@dataclass
class SegmenterConfig:
    recursion_depth: int = 1
    thresholds: list[float] = field(default_factory=lambda: [0.5])
    min_blocks: int = 1
    max_candidates_per_block: int = 350
    rule: str = "newline"

    def __post_init__(self) -> None:
        if self.recursion_depth < 1:
            raise ContractError("recursion depth must be at least 1")
        if len(self.thresholds) != self.recursion_depth:
            raise ContractError(
                f"need one threshold per recursion level ({self.recursion_depth}), got {len(self.thresholds)}"
            )
        if any(not 0.0 < t < 1.0 for t in self.thresholds):
            raise ContractError("thresholds must lie in (0, 1)")
        if any(b < a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ContractError("thresholds must be non-decreasing across levels")
        if self.max_candidates_per_block < 1:
            raise ContractError("max_candidates_per_block must be positive")


def _windows(cands: CandidateCutSet, max_candidates: int, max_len: int | None) -> list[tuple[int, int]]:
    """Split a block into text windows each holding a bounded run of internal candidates.

    Every internal candidate lands strictly inside exactly one window, so it is
    scored once with its successor candidate present.
    """
    inner = list(cands.internal_offsets)
    end = cands.text_len

    def span(i: int, j: int) -> tuple[int, int]:
        return (inner[i - 1] if i > 0 else 0, inner[j] if j < len(inner) else end)

    def fits(i: int, j: int) -> bool:
        lo, hi = span(i, j)
        count = j - i
        return count <= max_candidates and (max_len is None or (hi - lo) + count + 2 <= max_len)

    windows = []
    i = 0
    while i < len(inner):
        j = i + 1
        while j < len(inner) and fits(i, j + 1):
            j += 1
        windows.append(span(i, j))
        i = j
    return windows


def score_block(scorer: Scorer, text: Sequence[int], base_offset: int, cfg: SegmenterConfig) -> dict[int, float]:
    """Probabilities keyed by absolute offset for every candidate inside one block."""
    cands = insert_candidates(text, cfg.rule, base_offset=base_offset)
    if cands.num_internal == 0:
        return {}
    max_len = getattr(scorer, "max_len", None)
    out: dict[int, float] = {}
    for ws, we in _windows(cands, cfg.max_candidates_per_block, max_len):
        inner = [o - ws for o in cands.internal_offsets if ws < o < we]
        sub = from_offsets(text[ws:we], inner, cfg.rule, base_offset=base_offset + ws)
        for o, p in zip(sub.internal_offsets, score_candidates(scorer, sub)):
            out[base_offset + ws + o] = float(p)
    return out


def recursive_levels(text: Sequence[int], cfg: SegmenterConfig, scorer: Scorer) -> list[BlockPartition]:
    """Partition after each recursion level; each level only splits existing blocks."""
    text = [int(t) for t in text]
    if not text:
        raise ContractError("cannot segment empty text")
    partition = BlockPartition(((0, len(text)),))
    levels = []
    for threshold in cfg.thresholds:
        cuts = set(partition.boundaries)
        for start, end in partition.ranges:
            probs = score_block(scorer, text[start:end], start, cfg)
            cuts.update(o for o, p in probs.items() if p >= threshold)
        partition = BlockPartition.from_boundaries(len(text), cuts)
        levels.append(partition)
    return levels


def recursive_segment(text: Sequence[int], cfg: SegmenterConfig, scorer: Scorer) -> BlockPartition:
    return recursive_levels(text, cfg, scorer)[-1]
