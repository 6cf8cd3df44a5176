"""Neural segmenter: transformer backbone plus a two-layer cut head."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from blockattn.errors import ContractError, PositionRangeError
from blockattn.model import DTYPE, ModelConfig, ToyTransformer, checkpoint_bytes, read_checkpoint
from blockattn.rng import stream, torch_generator
from blockattn.segmentation.candidates import CandidateCutSet, from_offsets


class CutHead(nn.Module):
    def __init__(self, hidden_dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(hidden_dim, hidden_dim, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(hidden_dim, 1, dtype=DTYPE),
        )
        if generator is not None:
            with torch.no_grad():
                for p in self.parameters():
                    if p.dim() > 1:
                        nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=generator)
                    else:
                        p.zero_()

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.net(hidden).squeeze(-1)

    def zero_output(self) -> None:
        with torch.no_grad():
            self.net[2].weight.zero_()
            self.net[2].bias.zero_()


class Segmenter(nn.Module):
    """Scores candidate ``C_i`` from the backbone's hidden vector at ``C_{i+1}``."""

    def __init__(self, cfg: ModelConfig, backbone: ToyTransformer | None = None):
        super().__init__()
        self.backbone = backbone if backbone is not None else ToyTransformer(cfg)
        self.head = CutHead(self.backbone.cfg.hidden_dim, torch_generator(cfg.seed, "cut-head"))

    @property
    def cfg(self) -> ModelConfig:
        return self.backbone.cfg

    @property
    def max_len(self) -> int:
        return self.backbone.cfg.max_seq_len

    def candidate_logits(self, cands: CandidateCutSet) -> torch.Tensor:
        if len(cands.tokens) > self.max_len:
            raise PositionRangeError(
                f"sequence of {len(cands.tokens)} tokens exceeds max_seq_len {self.max_len}"
            )
        if cands.num_internal <= 0:
            return torch.zeros(0, dtype=DTYPE)
        ids = torch.as_tensor(cands.tokens, dtype=torch.long)[None]
        n = ids.shape[1]
        allowed = torch.tril(torch.ones((n, n), dtype=torch.bool))
        hidden, _, _ = self.backbone.run(ids, torch.arange(n), allowed)
        # C_i (i = 1..n-1) reads the hidden vector of C_{i+1}
        reader = torch.as_tensor(cands.positions[2:], dtype=torch.long)
        return self.head(hidden[0, reader])

    def probabilities(self, cands: CandidateCutSet) -> np.ndarray:
        with torch.no_grad():
            return torch.sigmoid(self.candidate_logits(cands)).numpy()

    def score(self, cands: CandidateCutSet) -> np.ndarray:
        return self.probabilities(cands)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(checkpoint_bytes(self, kind="segmenter"))

    @classmethod
    def load(cls, path: str | Path) -> "Segmenter":
        header, state = read_checkpoint(Path(path).read_bytes())
        if header.get("kind") != "segmenter":
            raise ContractError(f"expected a segmenter checkpoint, found {header.get('kind')!r}")
        seg = cls(ModelConfig(**header["model"]))
        seg.load_state_dict(state)
        return seg


@dataclass(frozen=True)
class SegmentationExample:
    text: tuple[int, ...]
    candidates: CandidateCutSet
    gold: tuple[bool, ...]  # one label per internal candidate
    category: str = ""

    def __post_init__(self) -> None:
        if len(self.gold) != self.candidates.num_internal:
            raise ContractError(
                f"{len(self.gold)} labels for {self.candidates.num_internal} internal candidates"
            )

    @property
    def gold_offsets(self) -> list[int]:
        return [o for o, g in zip(self.candidates.internal_offsets, self.gold) if g]

    @property
    def cut_rate(self) -> float:
        return cut_rate(self)


def cut_rate(example: SegmentationExample) -> float:
    """Accepted cuts divided by candidate cuts."""
    total = example.candidates.num_internal
    if total <= 0:
        raise ContractError("cut rate is undefined without candidates")
    return sum(bool(g) for g in example.gold) / total


def make_example(text: Sequence[int], candidate_offsets, gold_offsets, category: str = "") -> SegmentationExample:
    cands = from_offsets(text, candidate_offsets)
    gold_set = {int(o) for o in gold_offsets}
    unknown = gold_set - set(cands.internal_offsets)
    if unknown:
        raise ContractError(f"gold cuts {sorted(unknown)} are not candidate offsets")
    gold = tuple(o in gold_set for o in cands.internal_offsets)
    return SegmentationExample(tuple(int(t) for t in text), cands, gold, category)


# ---------------------------------------------------------------------------
# corpus files: one JSON record per line


def write_corpus(examples: Sequence[SegmentationExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            record = {
                "text": bytes(ex.text).decode("utf-8"),
                "candidate_offsets": list(ex.candidates.internal_offsets),
                "gold_cuts": ex.gold_offsets,
                "category": ex.category,
            }
            fh.write(json.dumps(record) + "\n")


def read_corpus(path: str | Path) -> list[SegmentationExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                text = list(rec["text"].encode("utf-8"))
                out.append(make_example(text, rec["candidate_offsets"], rec["gold_cuts"], rec.get("category", "")))
            except (KeyError, json.JSONDecodeError) as exc:
                raise ContractError(f"{path}:{lineno}: malformed corpus record ({exc})") from exc
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class HeadTrainConfig:
    epochs: int = 20
    lr_max: float = 3e-3
    lr_min: float = 3e-4
    freeze_backbone: bool = False
    seed: int = 0


@dataclass
class HeadTrainResult:
    epoch_losses: list[float] = field(default_factory=list)


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 1:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / (total - 1)))


def corpus_loss(segmenter: Segmenter, corpus: Sequence[SegmentationExample]) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for ex in corpus:
            logits = segmenter.candidate_logits(ex.candidates)
            target = torch.as_tensor(ex.gold, dtype=DTYPE)
            total += float(F.binary_cross_entropy_with_logits(logits, target, reduction="sum"))
            count += len(ex.gold)
    return total / count


def train_cut_head(
    segmenter: Segmenter, corpus: Sequence[SegmentationExample], hp: HeadTrainConfig | None = None
) -> HeadTrainResult:
    """Binary cross-entropy on every internal candidate, one example per step."""
    hp = hp or HeadTrainConfig()
    usable = [ex for ex in corpus if ex.candidates.num_internal > 0]
    if not usable:
        raise ContractError("training corpus has no internal candidates")
    params = list(segmenter.head.parameters())
    if not hp.freeze_backbone:
        params += list(segmenter.backbone.parameters())
    opt = torch.optim.Adam(params, lr=hp.lr_max)
    order_rng = stream(hp.seed, "cut-head-order")
    total_steps = hp.epochs * len(usable)
    step = 0
    result = HeadTrainResult()
    result.epoch_losses.append(corpus_loss(segmenter, usable))
    for _ in range(hp.epochs):
        for idx in order_rng.permutation(len(usable)):
            ex = usable[int(idx)]
            for group in opt.param_groups:
                group["lr"] = cosine_lr(step, total_steps, hp.lr_max, hp.lr_min)
            logits = segmenter.candidate_logits(ex.candidates)
            target = torch.as_tensor(ex.gold, dtype=DTYPE)
            loss = F.binary_cross_entropy_with_logits(logits, target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        result.epoch_losses.append(corpus_loss(segmenter, usable))
    return result
