"""Cache-hit and prefill-cost arithmetic for prefix caching versus block caching.

Prompts are modelled as ``[system prompt, retrieved documents..., query]``.
Two documents with different ids never share tokens, and every query is
new, so matching happens at whole-segment granularity.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from blockattn.errors import ContractError
from blockattn.kvcache import CacheStats

SYSTEM = "__system__"


@dataclass(frozen=True)
class Request:
    docs: tuple[str, ...]
    query_len: int
    label: str = ""


@dataclass
class CacheScenario:
    system_prompt_len: int
    docs: dict[str, int]
    requests: list[Request] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.system_prompt_len <= 0:
            raise ContractError("system prompt length must be positive")
        for doc_id, length in self.docs.items():
            if length <= 0:
                raise ContractError(f"document {doc_id!r} has non-positive length")
        for req in self.requests:
            if req.query_len <= 0:
                raise ContractError("query length must be positive")
            missing = [d for d in req.docs if d not in self.docs]
            if missing:
                raise ContractError(f"request retrieves unknown documents {missing}")

    def segments(self, req: Request) -> list[tuple[str, int]]:
        return [(SYSTEM, self.system_prompt_len)] + [(d, self.docs[d]) for d in req.docs]

    @classmethod
    def from_dict(cls, data: dict) -> "CacheScenario":
        reqs = [
            Request(tuple(str(d) for d in r["docs"]), int(r["query_len"]), str(r.get("label", "")))
            for r in data["requests"]
        ]
        return cls(int(data["system_prompt_len"]), {str(k): int(v) for k, v in data["docs"].items()}, reqs)

    @classmethod
    def load(cls, path: str | Path) -> "CacheScenario":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "system_prompt_len": self.system_prompt_len,
            "docs": dict(self.docs),
            "requests": [
                {"docs": list(r.docs), "query_len": r.query_len, **({"label": r.label} if r.label else {})}
                for r in self.requests
            ],
        }


def simulate_prefix_cache(scenario: CacheScenario) -> list[CacheStats]:
    """Longest-common-prefix reuse against the most recently cached prompt."""
    out = []
    previous: list[tuple[str, int]] = []
    for req in scenario.requests:
        stats = CacheStats()
        segs = scenario.segments(req)
        matching = True
        for idx, (seg_id, length) in enumerate(segs):
            matching = matching and idx < len(previous) and previous[idx][0] == seg_id
            stats.record(matching, length)
        stats.record(False, req.query_len)
        previous = segs
        out.append(stats)
    return out


def simulate_block_cache(scenario: CacheScenario) -> list[CacheStats]:
    """Every segment is its own block; a block hits whenever it was encoded before."""
    out = []
    seen: set[str] = set()
    for req in scenario.requests:
        stats = CacheStats()
        for seg_id, length in scenario.segments(req):
            stats.record(seg_id in seen, length)
            seen.add(seg_id)
        stats.record(False, req.query_len)
        out.append(stats)
    return out


def aggregate(per_request: Iterable[CacheStats]) -> CacheStats:
    total = CacheStats()
    for s in per_request:
        total = total.merge(s)
    return total


def simulate(scenario: CacheScenario, mode: str) -> dict:
    if mode == "prefix":
        per = simulate_prefix_cache(scenario)
    elif mode == "block":
        per = simulate_block_cache(scenario)
    else:
        raise ContractError(f"unknown cache mode {mode!r}")
    return {
        "mode": mode,
        "requests": [
            {"index": i, "label": r.label, **s.as_dict()} for i, (r, s) in enumerate(zip(scenario.requests, per))
        ],
        "aggregate": aggregate(per).as_dict(),
        "steady_state": per[-1].as_dict() if per else None,
    }


# ---------------------------------------------------------------------------
# canned scenarios


def coding_agent_scenario(
    system_prompt_len: int = 15_000,
    num_files: int = 30,
    file_len: int = 10_000,
    files_per_query: int = 10,
    query_len: int = 200,
) -> CacheScenario:
    """Repository assistant: every file is read once, then a mixed retrieval follows.

    The last request is the steady state: all its files were encoded by
    earlier requests, but in a different order and combination.
    """
    docs = {f"file{i:02d}": file_len for i in range(num_files)}
    ids = list(docs)
    requests = [
        Request(tuple(ids[i : i + files_per_query]), query_len, f"warmup-{i // files_per_query}")
        for i in range(0, num_files, files_per_query)
    ]
    stride = max(1, num_files // files_per_query)
    mixed = tuple(ids[(1 + k * stride) % num_files] for k in range(files_per_query))
    requests.append(Request(mixed, query_len, "steady-state"))
    return CacheScenario(system_prompt_len, docs, requests)


def research_agent_scenario(system_prompt_len: int = 2_000, paper_len: int = 20_000, query_len: int = 200) -> CacheScenario:
    """Eight-turn browse-and-revisit trace over three papers A, B and C."""
    turns = [
        ((), "search"),
        (("A",), "browse A"),
        (("B",), "browse B"),
        (("C",), "browse C"),
        (("A",), "revisit A"),
        (("B", "C"), "compare B with C"),
        (("A", "B", "C"), "comparison table"),
        ((), "final report"),
    ]
    docs = {"A": paper_len, "B": paper_len, "C": paper_len}
    return CacheScenario(system_prompt_len, docs, [Request(d, query_len, label) for d, label in turns])


# ---------------------------------------------------------------------------
# prefill cost


@dataclass(frozen=True)
class CostModel:
    context_len: int
    query_len: int
    block_lengths: tuple[int, ...]
    full_pairs: int
    block_pairs: int
    per_pair_cost: float = 1.0

    @property
    def reduction(self) -> int:
        return self.full_pairs - self.block_pairs

    @property
    def relative_reduction(self) -> float:
        return self.reduction / self.full_pairs

    @property
    def ratio(self) -> float:
        return self.block_pairs / self.full_pairs

    @property
    def ttft_full(self) -> float:
        return self.full_pairs * self.per_pair_cost

    @property
    def ttft_block(self) -> float:
        return self.block_pairs * self.per_pair_cost

    def as_dict(self) -> dict:
        return {
            "context_len": self.context_len,
            "query_len": self.query_len,
            "num_blocks": len(self.block_lengths),
            "full_pairs": self.full_pairs,
            "block_pairs": self.block_pairs,
            "reduction": self.reduction,
            "relative_reduction": self.relative_reduction,
            "ttft_full_proxy": self.ttft_full,
            "ttft_block_proxy": self.ttft_block,
        }


def _tri(n: int) -> int:
    return n * (n + 1) // 2


def prefill_cost(context_len: int, partition: Sequence[int], query_len: int, per_pair_cost: float = 1.0) -> CostModel:
    """Attention pair counts for prefilling ``context + query``.

    ``partition`` lists the context block lengths (or is a BlockPartition
    over the context). The query is always the final, fully attending block.
    """
    lengths = tuple(getattr(partition, "lengths", partition))
    if sum(lengths) != context_len or any(b <= 0 for b in lengths):
        raise ContractError(f"block lengths {lengths} do not cover a context of {context_len}")
    if query_len <= 0:
        raise ContractError("query length must be positive")
    full = _tri(context_len + query_len)
    block = sum(_tri(b) for b in lengths) + query_len * context_len + _tri(query_len)
    return CostModel(context_len, query_len, lengths, full, block, per_pair_cost)


def even_blocks(context_len: int, num_blocks: int) -> list[int]:
    base, extra = divmod(context_len, num_blocks)
    return [base + (1 if i < extra else 0) for i in range(num_blocks)]
