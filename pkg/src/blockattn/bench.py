"""Wall-clock prefill benchmark for the toy model, full versus block attention.

Block prefill encodes every context block on its own at local positions,
shifts the cached keys to their global offsets and then runs the query
against the concatenation, which is the uncached cost of block attention.
"""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Sequence

import torch

from blockattn.cachesim import CostModel, even_blocks, prefill_cost
from blockattn.errors import ContractError
from blockattn.model import ModelConfig, ToyTransformer, rotate_keys
from blockattn.rng import stream


def bench_model(max_len: int, seed: int = 0) -> ToyTransformer:
    """A narrow model so attention, not the projections, dominates the cost."""
    return ToyTransformer(ModelConfig(num_layers=2, num_heads=1, head_dim=8, vocab_size=258, max_seq_len=max_len, seed=seed))


CHUNK = 128  # prefill chunk; queries in a chunk only see keys up to the chunk's end


def _causal(n: int) -> torch.Tensor:
    return torch.tril(torch.ones((n, n), dtype=torch.bool))


def _encode(
    model: ToyTransformer,
    ids: torch.Tensor,
    start: int,
    past: list[tuple[torch.Tensor, torch.Tensor]] | None = None,
    chunk: int = CHUNK,
) -> tuple[torch.Tensor, list[tuple[torch.Tensor, torch.Tensor]]]:
    """Chunked causal prefill of ``ids`` at positions ``start..`` after optional ``past`` KV.

    Each chunk attends to everything before it plus itself causally, so the
    score matrices cover about half of the square that one dense masked call
    would compute. Returns the last logits and the (k, v) of all new tokens.
    """
    n = ids.shape[0]
    cfg = model.cfg
    keys = [[] if past is None else [past[li][0]] for li in range(cfg.num_layers)]
    values = [[] if past is None else [past[li][1]] for li in range(cfg.num_layers)]
    seen = 0 if past is None else past[0][0].shape[1]
    first_new = seen
    logits = None
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        kv = [(torch.cat(keys[li], 1), torch.cat(values[li], 1)) for li in range(cfg.num_layers)] if seen else None
        allowed = torch.ones((hi - lo, seen + hi - lo), dtype=torch.bool)
        allowed[:, seen:] = _causal(hi - lo)
        _, out, kvs = model.run(ids[None, lo:hi], torch.arange(start + lo, start + hi), allowed, kv, last_only=True)
        for li, (k, v) in enumerate(kvs):
            keys[li].append(k)
            values[li].append(v)
        seen += hi - lo
        logits = out[0, -1]
    new = [(torch.cat(keys[li], 1)[:, first_new:], torch.cat(values[li], 1)[:, first_new:]) for li in range(cfg.num_layers)]
    return logits, new


def prefill_full(model: ToyTransformer, ids: torch.Tensor, chunk: int = CHUNK) -> torch.Tensor:
    """Last-token logits of a chunked causal prefill over the whole sequence."""
    with torch.no_grad():
        return _encode(model, ids, 0, chunk=chunk)[0]


def prefill_block(
    model: ToyTransformer, ids: torch.Tensor, block_lengths: Sequence[int], chunk: int = CHUNK
) -> torch.Tensor:
    """Last-token logits; everything after the listed blocks is the query.

    Each block is prefilled alone at local positions, its keys are shifted to
    the block's global offset and the query is then prefilled after all of them.
    """
    cfg = model.cfg
    keys: list[list[torch.Tensor]] = [[] for _ in range(cfg.num_layers)]
    values: list[list[torch.Tensor]] = [[] for _ in range(cfg.num_layers)]
    offset = 0
    with torch.no_grad():
        for b in block_lengths:
            _, kvs = _encode(model, ids[offset : offset + b], 0, chunk=chunk)
            for li, (k, v) in enumerate(kvs):
                keys[li].append(rotate_keys(k[0], offset, cfg.rope_base)[None])
                values[li].append(v)
            offset += b
        past = [(torch.cat(keys[li], 1), torch.cat(values[li], 1)) for li in range(cfg.num_layers)]
        return _encode(model, ids[offset:], offset, past, chunk=chunk)[0]


def _time_pair(fn_a, fn_b, repeats: int, min_total: float = 1.0) -> tuple[float, float]:
    """Minimum wall times of two functions timed in alternation.

    Interleaving makes slow drifts of machine speed hit both sides alike, and
    short calls are repeated until ``min_total`` seconds are spent on each.
    """
    a: list[float] = []
    b: list[float] = []
    while len(a) < repeats or sum(a) < min_total or sum(b) < min_total:
        for fn, out in ((fn_a, a), (fn_b, b)):
            start = time.perf_counter()
            fn()
            out.append(time.perf_counter() - start)
    return min(a), min(b)


@dataclass
class BenchRow:
    cost: CostModel
    full_seconds: float
    block_seconds: float

    @property
    def gap_seconds(self) -> float:
        return self.full_seconds - self.block_seconds

    @property
    def measured_ratio(self) -> float:
        return self.block_seconds / self.full_seconds

    @property
    def ratio_error(self) -> float:
        """Relative error of the pair-count ratio as a predictor of the measured one."""
        return abs(self.cost.ratio - self.measured_ratio) / self.measured_ratio

    def as_dict(self) -> dict:
        return {
            **self.cost.as_dict(),
            "pair_ratio": self.cost.ratio,
            "full_seconds": self.full_seconds,
            "block_seconds": self.block_seconds,
            "gap_seconds": self.gap_seconds,
            "measured_ratio": self.measured_ratio,
            "ratio_error": self.ratio_error,
        }


def run_bench(
    context_lengths: Sequence[int],
    num_blocks: int,
    query_len: int,
    repeats: int = 3,
    seed: int = 0,
    model: ToyTransformer | None = None,
    chunk: int = CHUNK,
) -> list[BenchRow]:
    if not context_lengths or any(c <= 0 for c in context_lengths):
        raise ContractError("context lengths must be positive")
    if query_len <= 0 or num_blocks <= 0 or chunk <= 0:
        raise ContractError("query length, block count and chunk must be positive")
    if any(c < num_blocks for c in context_lengths):
        raise ContractError(f"every context must hold at least {num_blocks} tokens")
    longest = max(context_lengths) + query_len
    model = model or bench_model(longest, seed)
    if model.cfg.max_seq_len < longest:
        raise ContractError(f"model max_seq_len {model.cfg.max_seq_len} < {longest}")
    torch.set_num_threads(1)
    rng = stream(seed, "bench-tokens")
    rows = []
    for context in context_lengths:
        ids = torch.as_tensor(rng.integers(0, model.cfg.vocab_size, size=context + query_len), dtype=torch.long)
        blocks = even_blocks(context, num_blocks)
        prefill_full(model, ids, chunk)  # warm-up
        prefill_block(model, ids, blocks, chunk)
        full, block = _time_pair(
            lambda: prefill_full(model, ids, chunk), lambda: prefill_block(model, ids, blocks, chunk), repeats
        )
        rows.append(BenchRow(prefill_cost(context, blocks, query_len), full, block))
    return rows


def gaps_increasing(rows: Sequence[BenchRow]) -> bool:
    gaps = [r.gap_seconds for r in rows]
    return all(b > a for a, b in zip(gaps, gaps[1:]))


def median_ratio_error(rows: Sequence[BenchRow]) -> float:
    return statistics.median(r.ratio_error for r in rows)
