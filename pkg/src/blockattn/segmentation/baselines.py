"""Heuristic and statistical segmentation baselines at a requested parallel degree."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from blockattn.errors import ContractError
from blockattn.masks import BlockPartition
from blockattn.model import ToyTransformer
from blockattn.segmentation.candidates import match_offsets
from blockattn.segmentation.core import even_pick

HEURISTIC_METHODS = ("random", "average", "punctuation", "random_candidate", "average_candidate")
STATISTICAL_METHODS = ("loss", "entropy")


def _cut_pool(text: Sequence[int], method: str, rule: str) -> list[int]:
    if method in ("random", "average"):
        return match_offsets(text, "space")
    if method == "punctuation":
        return match_offsets(text, "sentence_punctuation")
    if method in ("random_candidate", "average_candidate"):
        return match_offsets(text, rule)
    raise ContractError(f"unknown heuristic method {method!r}; choose from {HEURISTIC_METHODS}")


def heuristic_segment(
    text: Sequence[int],
    method: str,
    parallel_degree: int,
    seed: int | np.random.Generator = 0,
    rule: str = "newline",
) -> BlockPartition:
    """Pick ``parallel_degree - 1`` cuts from the method's pool of cut points.

    ``punctuation`` uses every available sentence end when there are fewer
    than requested, so punctuation-free text stays a single block.
    """
    text = [int(t) for t in text]
    if not text:
        raise ContractError("cannot segment empty text")
    if parallel_degree < 1:
        raise ContractError("parallel degree must be at least 1")
    pool = _cut_pool(text, method, rule)
    want = parallel_degree - 1
    if method == "punctuation" and len(pool) < want:
        chosen = pool
    elif method.startswith("random"):
        if want > len(pool):
            raise ContractError(f"parallel degree {parallel_degree} infeasible with {len(pool)} cut points")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        chosen = [pool[i] for i in sorted(rng.choice(len(pool), size=want, replace=False))]
    else:
        chosen = [pool[i] for i in even_pick(len(pool), parallel_degree)]
    return BlockPartition.from_boundaries(len(text), chosen)


def chunked_topk(scores: Sequence[float], num_chunks: int) -> list[int]:
    """Leftmost argmax inside each of ``num_chunks`` equal, contiguous chunks."""
    scores = np.asarray(scores, dtype=np.float64)
    if num_chunks < 0 or num_chunks > len(scores):
        raise ContractError(f"cannot split {len(scores)} scores into {num_chunks} chunks")
    edges = [(c * len(scores)) // num_chunks for c in range(num_chunks + 1)] if num_chunks else [0]
    return [lo + int(np.argmax(scores[lo:hi])) for lo, hi in zip(edges[:-1], edges[1:])]


def token_entropy(logits: torch.Tensor) -> torch.Tensor:
    logp = F.log_softmax(logits, dim=-1)
    return -(logp.exp() * logp).sum(-1)


def next_token_scores(model: ToyTransformer, text: Sequence[int], method: str, chunk_size: int | None = None) -> np.ndarray:
    """Per-position surprise of the following token under full causal attention.

    Entry ``i`` scores the gap between tokens ``i`` and ``i + 1``; the last
    token has no successor and is omitted. Long texts are evaluated in
    independent windows of ``chunk_size`` tokens.
    """
    if method not in STATISTICAL_METHODS:
        raise ContractError(f"unknown statistical method {method!r}; choose from {STATISTICAL_METHODS}")
    chunk = chunk_size or model.cfg.max_seq_len
    if chunk < 1:
        raise ContractError("chunk_size must be at least 1")
    ids = torch.as_tensor(list(text), dtype=torch.long)
    n = ids.shape[0]
    out = np.empty(n - 1)
    with torch.no_grad():
        for lo in range(0, n - 1, chunk):
            hi = min(lo + chunk, n - 1)
            window = ids[lo:hi]
            m = window.shape[0]
            allowed = torch.tril(torch.ones((m, m), dtype=torch.bool))
            _, logits, _ = model.run(window[None], torch.arange(m), allowed)
            logits = logits[0]
            if method == "loss":
                vals = F.cross_entropy(logits, ids[lo + 1 : hi + 1], reduction="none")
            else:
                vals = token_entropy(logits)
            out[lo:hi] = vals.numpy()
    return out


def statistical_segment(
    model: ToyTransformer,
    text: Sequence[int],
    method: str,
    parallel_degree: int,
    chunk_size: int | None = None,
) -> BlockPartition:
    text = [int(t) for t in text]
    if parallel_degree < 1:
        raise ContractError("parallel degree must be at least 1")
    if parallel_degree - 1 > len(text) - 1:
        raise ContractError(f"parallel degree {parallel_degree} infeasible for {len(text)} tokens")
    if parallel_degree == 1:
        return BlockPartition(((0, len(text)),))
    scores = next_token_scores(model, text, method, chunk_size)
    cuts = [i + 1 for i in chunked_topk(scores, parallel_degree - 1)]
    return BlockPartition.from_boundaries(len(text), cuts)
