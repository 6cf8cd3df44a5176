"""Block distillation: a frozen full-attention teacher guides a block-attention student.

Per training sequence the step runs four passes:

* teacher, full causal mask         -> reference distribution and CE
* teacher, block mask               -> CE used for the per-token weights
* student, block mask               -> weighted cross-entropy
* student, block-dropout mask       -> KL to the teacher on non-corrupted tokens
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from blockattn.errors import ContractError
from blockattn.masks import (
    BlockPartition,
    DropoutPlan,
    build_block_mask,
    build_dropout_mask,
    build_full_causal,
    sample_dropout_plan,
)
from blockattn.model import DTYPE, ModelConfig, ToyTransformer, clone_model
from blockattn.rng import stream


@dataclass(frozen=True)
class SinkLayout:
    sink_token_id: int
    sinks_per_block: int = 4


def insert_sink_tokens(
    tokens: Sequence[int], partition: BlockPartition, layout: SinkLayout
) -> tuple[list[int], BlockPartition]:
    """Prefix every block, the final one included, with ``sinks_per_block`` sink tokens."""
    tokens = [int(t) for t in tokens]
    if len(tokens) != partition.n:
        raise ContractError(f"partition covers {partition.n} tokens but sequence has {len(tokens)}")
    if layout.sink_token_id in tokens:
        raise ContractError("sequence already contains the sink token id")
    if layout.sinks_per_block == 0:
        return tokens, partition
    out: list[int] = []
    lengths = []
    for start, end in partition.ranges:
        out += [layout.sink_token_id] * layout.sinks_per_block + tokens[start:end]
        lengths.append(layout.sinks_per_block + end - start)
    return out, BlockPartition.from_lengths(lengths)


def strip_sink_tokens(
    tokens: Sequence[int], partition: BlockPartition, layout: SinkLayout
) -> tuple[list[int], BlockPartition]:
    s = layout.sinks_per_block
    if s == 0:
        return [int(t) for t in tokens], partition
    out: list[int] = []
    lengths = []
    for start, end in partition.ranges:
        head = tokens[start : start + s]
        if end - start <= s or any(int(t) != layout.sink_token_id for t in head):
            raise ContractError("block does not start with the expected sink tokens")
        out += [int(t) for t in tokens[start + s : end]]
        lengths.append(end - start - s)
    return out, BlockPartition.from_lengths(lengths)


# ---------------------------------------------------------------------------
# loss terms


@dataclass
class TokenWeights:
    alpha: float
    beta: float
    w: torch.Tensor


def token_weights(ce_block, ce_full, alpha: float, beta: float) -> TokenWeights:
    """w = max(ce_block - ce_full, 0) * alpha + beta, elementwise and unnormalised."""
    ce_block = torch.as_tensor(ce_block, dtype=DTYPE)
    ce_full = torch.as_tensor(ce_full, dtype=DTYPE)
    if ce_block.shape != ce_full.shape:
        raise ContractError(f"length mismatch: {tuple(ce_block.shape)} vs {tuple(ce_full.shape)}")
    if alpha < 0 or beta < 0:
        raise ContractError("alpha and beta must be non-negative")
    w = torch.clamp(ce_block - ce_full, min=0.0) * alpha + beta
    return TokenWeights(alpha, beta, w)


def per_token_ce(logits: torch.Tensor, tokens) -> torch.Tensor:
    """CE of each next-token prediction; the last position has no target."""
    targets = torch.as_tensor(tokens, dtype=torch.long)
    return F.cross_entropy(logits[:-1], targets[1:], reduction="none")


def kl_rows(teacher_logits: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """KL(teacher || student) for every row."""
    t_logp = F.log_softmax(teacher_logits, dim=-1)
    s_logp = F.log_softmax(student_logits, dim=-1)
    return (t_logp.exp() * (t_logp - s_logp)).sum(-1)


def block_dropout_kl(
    teacher_logits: torch.Tensor, student_logits: torch.Tensor, partition: BlockPartition, plan: DropoutPlan
) -> torch.Tensor:
    """Mean per-token KL(teacher || student) over tokens outside corrupted blocks."""
    if teacher_logits.shape != student_logits.shape:
        raise ContractError("teacher and student logits differ in shape")
    if teacher_logits.shape[0] != partition.n:
        raise ContractError("logits do not match the partition length")
    plan.check(partition)
    keep = torch.from_numpy(~plan.token_mask(partition))
    if not bool(keep.any()):
        raise ContractError("every token is corrupted; nothing to distil")
    return kl_rows(teacher_logits[keep], student_logits[keep]).mean()


@dataclass
class LossBreakdown:
    weighted_ce: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {"weighted_ce": float(self.weighted_ce.detach()), "kl": float(self.kl.detach()), "total": float(self.total.detach())}


@dataclass
class DistillationBatch:
    """One training sequence with everything the combined loss needs."""

    tokens: list[int]
    partition: BlockPartition
    plan: DropoutPlan
    teacher_full_logits: torch.Tensor
    teacher_block_ce: torch.Tensor
    teacher_full_ce: torch.Tensor
    student_block_logits: torch.Tensor
    student_dropout_logits: torch.Tensor


def distillation_loss(batch: DistillationBatch, weights: TokenWeights | torch.Tensor) -> LossBreakdown:
    w = weights.w if isinstance(weights, TokenWeights) else torch.as_tensor(weights, dtype=DTYPE)
    ce = per_token_ce(batch.student_block_logits, batch.tokens)
    if w.shape != ce.shape:
        raise ContractError(f"{tuple(w.shape)} weights for {tuple(ce.shape)} token losses")
    weighted = (ce * w).mean()
    kl = block_dropout_kl(batch.teacher_full_logits, batch.student_dropout_logits, batch.partition, batch.plan)
    return LossBreakdown(weighted, kl, weighted + kl)


def sink_adjusted_weights(weights: TokenWeights, tokens: Sequence[int], sink_id: int) -> TokenWeights:
    """Pin the weight to beta wherever the input or the target is a sink token."""
    ids = torch.as_tensor(list(tokens), dtype=torch.long)
    touches_sink = (ids[:-1] == sink_id) | (ids[1:] == sink_id)
    w = torch.where(touches_sink, torch.full_like(weights.w, weights.beta), weights.w)
    return TokenWeights(weights.alpha, weights.beta, w)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DistillConfig:
    alpha: float = 0.2
    beta: float = 0.1
    dropout_rate: float = 0.6
    sinks_per_block: int = 4
    thresholds: list[float] = field(default_factory=lambda: [0.5])
    seed: int = 0
    steps: int = 200
    lr_max: float = 3e-4
    lr_min: float = 3e-5
    batch_size: int = 8
    # toy model and corpus
    task: str = "echo"
    num_layers: int = 2
    num_heads: int = 2
    head_dim: int = 16
    max_seq_len: int = 256
    corpus_size: int = 256
    eval_size: int = 64
    num_blocks: int = 4
    block_len: int = 8
    teacher_steps: int = 600
    teacher_lr: float = 3e-3
    teacher_sink_fraction: float = 0.5  # share of teacher batches that carry sink tokens
    teacher_warmup_steps: int = 0  # repeated-span (induction) steps before task pretraining
    teacher_loss: str = "all"  # "all" positions, or "answers": label targets in the final block
    teacher_checkpoint: str = ""

    @classmethod
    def from_text(cls, text: str) -> "DistillConfig":
        """Parse ``key = value`` lines; '#' starts a comment."""
        types = {f.name: f for f in dataclasses.fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ContractError(f"line {lineno}: unknown key {key!r}")
            default = getattr(cls(), key)
            try:
                if isinstance(default, list):
                    values[key] = [float(v) for v in val.split(",") if v.strip()]
                elif isinstance(default, bool):
                    values[key] = val.lower() in ("1", "true", "yes")
                elif isinstance(default, int):
                    values[key] = int(val)
                elif isinstance(default, float):
                    values[key] = float(val)
                else:
                    values[key] = val
            except ValueError as exc:
                raise ContractError(f"line {lineno}: bad value for {key}: {val!r}") from exc
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "DistillConfig":
        return cls.from_text(Path(path).read_text())

    def validate(self) -> None:
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ContractError("dropout_rate must be in [0, 1]")
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be non-negative")
        if self.steps < 0 or self.batch_size < 1 or self.sinks_per_block < 0:
            raise ContractError("steps, batch_size and sinks_per_block must be non-negative (batch_size >= 1)")
        if not 0.0 <= self.teacher_sink_fraction <= 1.0:
            raise ContractError("teacher_sink_fraction must be in [0, 1]")
        if self.task not in ("echo", "shift", "block_head"):
            raise ContractError(f"unknown task {self.task!r}")
        if self.teacher_loss not in ("all", "answers"):
            raise ContractError(f"unknown teacher_loss {self.teacher_loss!r}")
        if self.teacher_warmup_steps < 0:
            raise ContractError("teacher_warmup_steps must be non-negative")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if isinstance(val, list):
                val = ",".join(repr(v) for v in val)
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 1:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / (total - 1)))


# ---------------------------------------------------------------------------
# training


@dataclass
class TeacherPasses:
    full_logits: torch.Tensor
    full_ce: torch.Tensor
    block_ce: torch.Tensor


class TeacherCache:
    """Teacher outputs per augmented sequence; both teacher passes are deterministic."""

    def __init__(self) -> None:
        self._store: dict[tuple, TeacherPasses] = {}
        self.misses = 0

    def get(self, teacher: ToyTransformer, tokens: Sequence[int], partition: BlockPartition) -> TeacherPasses:
        key = (tuple(tokens), partition.ranges)
        hit = self._store.get(key)
        if hit is None:
            self.misses += 1
            hit = teacher_passes(teacher, tokens, partition)
            self._store[key] = hit
        return hit


def teacher_passes(teacher: ToyTransformer, tokens: Sequence[int], partition: BlockPartition) -> TeacherPasses:
    with torch.no_grad():
        full = teacher(tokens, build_full_causal(len(tokens))).logits
        block = teacher(tokens, build_block_mask(partition)).logits
    return TeacherPasses(full, per_token_ce(full, tokens), per_token_ce(block, tokens))


def check_pair(student: ToyTransformer, teacher: ToyTransformer) -> None:
    if student.cfg != teacher.cfg:
        raise ContractError("teacher and student must share a model config")


def build_batch(
    student: ToyTransformer,
    teacher: ToyTransformer,
    tokens: Sequence[int],
    partition: BlockPartition,
    plan: DropoutPlan,
    teacher_cache: TeacherCache | None = None,
) -> DistillationBatch:
    tp = teacher_cache.get(teacher, tokens, partition) if teacher_cache else teacher_passes(teacher, tokens, partition)
    return DistillationBatch(
        tokens=list(tokens),
        partition=partition,
        plan=plan,
        teacher_full_logits=tp.full_logits,
        teacher_block_ce=tp.block_ce,
        teacher_full_ce=tp.full_ce,
        student_block_logits=student(tokens, build_block_mask(partition)).logits,
        student_dropout_logits=student(tokens, build_dropout_mask(partition, plan)).logits,
    )


def train_step(
    student: ToyTransformer,
    teacher: ToyTransformer,
    samples: Iterable,
    optimizer: torch.optim.Optimizer,
    cfg: DistillConfig,
    rng: np.random.Generator,
    sink_id: int,
    teacher_cache: TeacherCache | None = None,
) -> dict:
    """One optimizer update of the student averaged over ``samples``.

    Each sample provides ``tokens`` and ``partition`` before sink insertion.
    """
    check_pair(student, teacher)
    layout = SinkLayout(sink_id, cfg.sinks_per_block)
    student.train()
    totals = {"weighted_ce": 0.0, "kl": 0.0, "total": 0.0}
    passes = {"teacher_full_ce": 0.0, "teacher_block_ce": 0.0, "student_block_ce": 0.0, "student_dropout_ce": 0.0}
    corrupted = []
    losses = []
    samples = list(samples)
    for sample in samples:
        tokens, part = insert_sink_tokens(sample.tokens, sample.partition, layout)
        plan = sample_dropout_plan(part, cfg.dropout_rate, rng)
        batch = build_batch(student, teacher, tokens, part, plan, teacher_cache)
        weights = token_weights(batch.teacher_block_ce, batch.teacher_full_ce, cfg.alpha, cfg.beta)
        weights = sink_adjusted_weights(weights, tokens, sink_id)
        breakdown = distillation_loss(batch, weights)
        losses.append(breakdown.total)
        for k, v in breakdown.floats().items():
            totals[k] += v / len(samples)
        passes["teacher_full_ce"] += float(batch.teacher_full_ce.mean()) / len(samples)
        passes["teacher_block_ce"] += float(batch.teacher_block_ce.mean()) / len(samples)
        passes["student_block_ce"] += float(per_token_ce(batch.student_block_logits, tokens).detach().mean()) / len(samples)
        passes["student_dropout_ce"] += float(per_token_ce(batch.student_dropout_logits, tokens).detach().mean()) / len(samples)
        corrupted.append(sorted(plan.corrupted))
    loss = torch.stack(losses).mean()
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return {**totals, **passes, "corrupted": corrupted}


def make_sampler(cfg: DistillConfig):
    from blockattn.synthetic import TokenTask, block_head_training_sample, echo_sample, shift_sample

    task = TokenTask()
    if cfg.task == "echo":
        def draw(rng):
            return echo_sample(rng, task, cfg.num_blocks, cfg.block_len)
    elif cfg.task == "shift":
        def draw(rng):
            return shift_sample(rng, task, cfg.num_blocks, cfg.block_len)
    else:
        def draw(rng):
            return block_head_training_sample(rng, task, num_blocks=cfg.num_blocks, block_len=(cfg.block_len, cfg.block_len))
    return task, draw


def model_config(cfg: DistillConfig, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        num_layers=cfg.num_layers,
        num_heads=cfg.num_heads,
        head_dim=cfg.head_dim,
        vocab_size=vocab_size,
        max_seq_len=cfg.max_seq_len,
        seed=int(stream(cfg.seed, "init").integers(0, 2**31)),
    )


def induction_warmup(
    model: ToyTransformer, content: int, steps: int, lr: float, seed: int, batch_size: int = 32, length: int = 40
) -> list[float]:
    """Teach copy-from-earlier-occurrence on repeated random spans.

    Retrieval tasks whose answer sits next to an earlier copy of the probe
    only become learnable once the model has an induction circuit, and at toy
    scale that circuit forms far faster on dense repeat supervision than on a
    sparse retrieval signal. Loss covers the predictable second copy only.
    """
    from blockattn.synthetic import repeat_sequence

    rng = stream(seed, "teacher-warmup")
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    allowed = torch.tril(torch.ones((length, length), dtype=torch.bool))
    history = []
    for _ in range(steps):
        rows, weights = [], []
        for _ in range(batch_size):
            tokens, span = repeat_sequence(rng, content, length)
            rows.append(tokens)
            weights.append([0.0] * span + [1.0] * (span - 1) + [0.0] * (length - 2 * span))
        ids = torch.as_tensor(rows, dtype=torch.long)
        w = torch.as_tensor(weights, dtype=torch.float64)
        _, logits, _ = model.run(ids, torch.arange(length), allowed)
        ce = F.cross_entropy(
            logits[:, :-1].reshape(-1, logits.shape[-1]), ids[:, 1:].reshape(-1), reduction="none"
        ).view(batch_size, length - 1)
        loss = (ce * w).sum() / w.sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return history


def pretrain_teacher(
    model: ToyTransformer,
    draw: Callable,
    sink_id: int,
    sinks_per_block: int,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    sink_fraction: float = 0.5,
    answer_ids: range | None = None,
) -> list[float]:
    """Full-attention next-token training.

    A ``sink_fraction`` share of the batches carries sink tokens so the
    teacher also knows the sink-augmented format. With ``answer_ids`` the loss
    only covers final-block positions whose target is in that id range;
    otherwise every position counts.
    """
    rng = stream(seed, "teacher-data")
    coin = stream(seed, "teacher-sinks")
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    history = []
    for step in range(steps):
        for group in opt.param_groups:
            group["lr"] = cosine_lr(step, steps, lr, lr / 10)
        layout = SinkLayout(sink_id, sinks_per_block if coin.random() < sink_fraction else 0)
        rows, starts = [], []
        for _ in range(batch_size):
            s = draw(rng)
            tokens, part = insert_sink_tokens(s.tokens, s.partition, layout)
            rows.append(tokens)
            starts.append(part.ranges[-1][0])
        ids = torch.as_tensor(rows, dtype=torch.long)
        n = ids.shape[1]
        allowed = torch.tril(torch.ones((n, n), dtype=torch.bool))
        _, logits, _ = model.run(ids, torch.arange(n), allowed)
        ce = F.cross_entropy(
            logits[:, :-1].reshape(-1, logits.shape[-1]), ids[:, 1:].reshape(-1), reduction="none"
        ).view(batch_size, n - 1)
        if answer_ids is None:
            loss = ce.mean()
        else:
            target = ids[:, 1:]
            keep = (target >= answer_ids.start) & (target < answer_ids.stop)
            keep &= torch.arange(1, n)[None, :] >= torch.as_tensor(starts)[:, None]
            loss = (ce * keep).sum() / keep.sum().clamp(min=1)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return history


def evaluate(
    student: ToyTransformer, teacher: ToyTransformer, samples: Sequence, sink_id: int, sinks_per_block: int
) -> dict[str, float]:
    """Held-out agreement under block attention.

    The final block is the only part of a sequence left uncorrupted by the
    block mask, so ``kl_query`` (KL(teacher full || student block)) and the
    ``*_query_ce`` entries average over its tokens. Whole-sequence CE values
    are reported alongside for reference.
    """
    layout = SinkLayout(sink_id, sinks_per_block)
    kl_sum = count = 0.0
    sums = dict.fromkeys(("student_block_query_ce", "teacher_full_query_ce", "student_block_ce", "teacher_full_ce"), 0.0)
    with torch.no_grad():
        for s in samples:
            tokens, part = insert_sink_tokens(s.tokens, s.partition, layout)
            t_full = teacher(tokens, build_full_causal(len(tokens))).logits
            s_block = student(tokens, build_block_mask(part)).logits
            q0 = part.ranges[-1][0]
            kl_sum += float(kl_rows(t_full[q0:], s_block[q0:]).sum())
            s_ce, t_ce = per_token_ce(s_block, tokens), per_token_ce(t_full, tokens)
            sums["student_block_query_ce"] += float(s_ce[q0:].sum())
            sums["teacher_full_query_ce"] += float(t_ce[q0:].sum())
            count += len(tokens) - q0
            sums["student_block_ce"] += float(s_ce.mean()) / len(samples)
            sums["teacher_full_ce"] += float(t_ce.mean()) / len(samples)
    sums["student_block_query_ce"] /= count
    sums["teacher_full_query_ce"] /= count
    return {"kl_query": kl_sum / count, **sums}


def answer_accuracy(
    model: ToyTransformer, samples: Sequence, sink_id: int, sinks_per_block: int, block: bool = True
) -> float:
    """Share of samples whose last-position argmax equals ``sample.answer``.

    Samples end right before their answer (see
    :func:`blockattn.synthetic.block_head_sample`); ``block`` picks the block
    mask over full causal attention.
    """
    if not samples:
        raise ContractError("no samples to score")
    layout = SinkLayout(sink_id, sinks_per_block)
    hits = 0
    with torch.no_grad():
        for s in samples:
            tokens, part = insert_sink_tokens(s.tokens, s.partition, layout)
            mask = build_block_mask(part) if block else build_full_causal(len(tokens))
            hits += int(model(tokens, mask).logits[-1].argmax()) == s.answer
    return hits / len(samples)


def train_teacher(cfg: DistillConfig) -> tuple[ToyTransformer, list[float]]:
    """Fresh teacher for ``cfg``: optional induction warm-up, then full-attention task pretraining."""
    task, draw = make_sampler(cfg)
    teacher = ToyTransformer(model_config(cfg, task.vocab_size))
    history = induction_warmup(teacher, task.content, cfg.teacher_warmup_steps, cfg.teacher_lr, cfg.seed)
    answers = range(task.label_base, task.label_base + task.num_labels) if cfg.teacher_loss == "answers" else None
    history += pretrain_teacher(
        teacher, draw, task.sink, cfg.sinks_per_block or 4, cfg.teacher_steps, cfg.teacher_lr, cfg.seed,
        sink_fraction=cfg.teacher_sink_fraction, answer_ids=answers,
    )
    return teacher, history


@dataclass
class DistillResult:
    teacher: ToyTransformer
    student: ToyTransformer
    metrics: list[dict]
    eval_before: dict
    eval_after: dict
    teacher_history: list[float]


def distill(
    cfg: DistillConfig,
    teacher: ToyTransformer | None = None,
    on_metrics: Callable[[dict], None] | None = None,
    teacher_cache: TeacherCache | None = None,
) -> DistillResult:
    """Pretrain (or reuse) a teacher, copy it into a student and run ``cfg.steps`` steps."""
    cfg.validate()
    task, draw = make_sampler(cfg)
    history: list[float] = []
    if teacher is None:
        teacher, history = train_teacher(cfg)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    student = clone_model(teacher)
    for p in student.parameters():
        p.requires_grad_(True)

    data_rng = stream(cfg.seed, "corpus")
    corpus = [draw(data_rng) for _ in range(cfg.corpus_size)]
    eval_rng = stream(cfg.seed, "heldout")
    heldout = [draw(eval_rng) for _ in range(cfg.eval_size)]
    before = evaluate(student, teacher, heldout, task.sink, cfg.sinks_per_block)

    opt = torch.optim.Adam(student.parameters(), lr=cfg.lr_max)
    dropout_rng = stream(cfg.seed, "dropout")
    order_rng = stream(cfg.seed, "order")
    cache = teacher_cache if teacher_cache is not None else TeacherCache()
    metrics = []
    order: list[int] = []
    for step in range(cfg.steps):
        lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min)
        for group in opt.param_groups:
            group["lr"] = lr
        picks = []
        for _ in range(cfg.batch_size):
            if not order:
                order = [int(i) for i in order_rng.permutation(len(corpus))]
            picks.append(corpus[order.pop()])
        m = train_step(student, teacher, picks, opt, cfg, dropout_rng, task.sink, cache)
        m = {"step": step, "lr": lr, **m}
        metrics.append(m)
        if on_metrics:
            on_metrics(m)
    after = evaluate(student, teacher, heldout, task.sink, cfg.sinks_per_block)
    return DistillResult(teacher, student, metrics, before, after, history)


def metrics_line(m: dict) -> str:
    return json.dumps(m, sort_keys=True)
