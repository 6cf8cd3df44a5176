"""One test per acceptance criterion.

Each test records a single ``[acceptance N] PASS|FAIL ...`` line that is
printed as it runs and repeated in the terminal summary (see conftest.py).
"""
import math
import time

import numpy as np
import pytest
import torch

from blockattn.bench import gaps_increasing, run_bench
from blockattn.cachesim import coding_agent_scenario, research_agent_scenario, simulate_block_cache, simulate_prefix_cache
from blockattn.distillation import (
    DistillConfig,
    DistillationBatch,
    TeacherCache,
    answer_accuracy,
    block_dropout_kl,
    build_batch,
    distill,
    distillation_loss,
    make_sampler,
    token_weights,
    train_teacher,
)
from blockattn.masks import (
    BlockPartition,
    DropoutPlan,
    build_block_mask,
    build_dropout_mask,
    build_full_causal,
    reference_block_mask,
    reference_dropout_mask,
    reference_full_causal,
)
from blockattn.model import (
    ModelConfig,
    ToyTransformer,
    assemble_and_decode,
    encode_block,
    forward,
    forward_blocks,
    gradients,
    rotate_keys,
)
from blockattn.segmentation import (
    FixedScorer,
    HeadTrainConfig,
    Segmenter,
    SegmenterConfig,
    heuristic_segment,
    insert_candidates,
    recursive_levels,
    train_cut_head,
)
from blockattn.segmentation.core import accepted_offsets
from blockattn.synthetic import block_head_sample, boundary_f1, planted_segmentation_corpus

from conftest import ACCEPTANCE_LINES, random_partition


def report(number: int, ok: bool, detail: str, started: float) -> None:
    line = f"[acceptance {number}] {'PASS' if ok else 'FAIL'} {detail} ({time.perf_counter() - started:.2f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def scaled_model(cfg: ModelConfig, scale: float) -> ToyTransformer:
    """Larger-than-init weights so attention patterns are far from uniform."""
    m = ToyTransformer(cfg)
    with torch.no_grad():
        for p in m.parameters():
            p.mul_(scale)
    return m


# ---------------------------------------------------------------------------
# 1, 2: cache simulator


def test_acceptance_01_coding_agent_hit_rates():
    t0 = time.perf_counter()
    sc = coding_agent_scenario()
    prefix = simulate_prefix_cache(sc)[-1].hit_rate
    block = simulate_block_cache(sc)[-1].hit_rate
    elapsed = time.perf_counter() - t0
    ok = abs(prefix - 0.1302) <= 5e-4 and abs(block - 0.9983) <= 5e-4 and elapsed < 1.0
    report(1, ok, f"prefix={prefix:.6f} block={block:.6f}", t0)


def test_acceptance_02_research_agent_extra_hits():
    t0 = time.perf_counter()
    sc = research_agent_scenario()
    prefix = sum(s.hit_tokens for s in simulate_prefix_cache(sc))
    block = sum(s.hit_tokens for s in simulate_block_cache(sc))
    elapsed = time.perf_counter() - t0
    report(2, block - prefix == 120_000 and elapsed < 1.0, f"extra_hit_tokens={block - prefix}", t0)


# ---------------------------------------------------------------------------
# 3, 4, 5: block attention mechanics


def test_acceptance_03_assembled_decode_matches_block_mask():
    t0 = time.perf_counter()
    model = scaled_model(ModelConfig(num_layers=2, num_heads=2, head_dim=8, vocab_size=64, max_seq_len=64, seed=3), 10.0)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 65))
        part = random_partition(rng, n, max_blocks=8)
        tokens = rng.integers(0, 64, size=n)
        q0 = part.ranges[-1][0]
        cached = [encode_block(model, tokens[s:e]) for s, e in part.ranges[:-1]]
        got = assemble_and_decode(model, cached, tokens[q0:]).logits
        want = forward_blocks(model, tokens, part).logits[q0:]
        worst = max(worst, float((got - want).detach().abs().max()))
    elapsed = time.perf_counter() - t0
    report(3, worst <= 1e-6 and elapsed < 120, f"max_abs_diff={worst:.2e} cases=200", t0)


def test_acceptance_04_single_block_is_full_attention_bitwise():
    t0 = time.perf_counter()
    model = scaled_model(ModelConfig(num_layers=2, num_heads=2, head_dim=8, vocab_size=64, max_seq_len=128, seed=4), 10.0)
    rng = np.random.default_rng(4)
    equal = 0
    for _ in range(50):
        n = int(rng.integers(1, 129))
        tokens = rng.integers(0, 64, size=n)
        a = forward(model, tokens, build_block_mask(BlockPartition(((0, n),)))).logits
        b = forward(model, tokens, build_full_causal(n)).logits
        equal += bool(torch.equal(a, b))
    report(4, equal == 50, f"bitwise_equal={equal}/50", t0)


def test_acceptance_05_encode_block_is_prefix_independent():
    t0 = time.perf_counter()
    model = scaled_model(ModelConfig(num_layers=2, num_heads=2, head_dim=8, vocab_size=64, max_seq_len=128, seed=5), 10.0)
    rng = np.random.default_rng(5)
    identical = 0
    worst = 0.0
    for _ in range(50):
        block = [int(t) for t in rng.integers(0, 64, size=int(rng.integers(1, 33)))]
        alone = encode_block(model, block)
        prefix = [int(t) for t in rng.integers(0, 64, size=int(rng.integers(1, 64)))]
        doc = prefix + block
        in_doc = encode_block(model, doc[len(prefix) :])
        identical += alone.same_bytes(in_doc) and alone.tensor_bytes() == in_doc.tensor_bytes()
        # the block's states inside a monolithic block-mask pass agree after undoing the offset
        part = BlockPartition.from_lengths([len(prefix), len(block), 1])
        ids = torch.as_tensor(doc + [0])
        with torch.no_grad():
            _, _, kvs = model.run(ids[None], torch.arange(len(ids)), build_block_mask(part).as_tensor())
        for layer, (k, v) in enumerate(kvs):
            k_local = rotate_keys(k[0, len(prefix) : len(doc)], -len(prefix), model.cfg.rope_base)
            worst = max(worst, float((k_local - alone.keys[layer]).abs().max()))
            worst = max(worst, float((v[0, len(prefix) : len(doc)] - alone.values[layer]).abs().max()))
    ok = identical == 50 and worst <= 1e-9
    report(5, ok, f"byte_identical={identical}/50 monolithic_max_diff={worst:.2e}", t0)


# ---------------------------------------------------------------------------
# 6: masks


def test_acceptance_06_mask_builders_match_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(500):
        n = int(rng.integers(1, 129))
        part = random_partition(rng, n, max_blocks=12)
        plan = DropoutPlan(frozenset(int(i) for i in range(part.final_index) if rng.random() < 0.5))
        mismatches += build_block_mask(part) != reference_block_mask(part)
        mismatches += build_dropout_mask(part, plan) != reference_dropout_mask(part, plan)
        mismatches += build_full_causal(n) != reference_full_causal(n)
    report(6, mismatches == 0, f"mismatches={mismatches} cases=500", t0)


# ---------------------------------------------------------------------------
# 7, 8: loss formulas and gradients


def _softmax(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    s = sum(e)
    return [x / s for x in e]


def _random_batch(gen, n, vocab):
    part = random_partition(gen, n, max_blocks=5)
    corrupted = frozenset(int(i) for i in range(part.final_index) if gen.random() < 0.5)
    logits = lambda: torch.as_tensor(gen.normal(size=(n, vocab)) * 3)  # noqa: E731
    return DistillationBatch(
        tokens=[int(x) for x in gen.integers(0, vocab, size=n)],
        partition=part,
        plan=DropoutPlan(corrupted),
        teacher_full_logits=logits(),
        teacher_block_ce=torch.as_tensor(gen.exponential(size=n - 1)),
        teacher_full_ce=torch.as_tensor(gen.exponential(size=n - 1)),
        student_block_logits=logits(),
        student_dropout_logits=logits(),
    )


def test_acceptance_07_loss_formulas_match_brute_force():
    t0 = time.perf_counter()
    gen = np.random.default_rng(7)
    worst = 0.0
    invariant = True
    for _ in range(100):
        n, vocab = int(gen.integers(2, 12)), int(gen.integers(2, 7))
        b = _random_batch(gen, n, vocab)
        alpha, beta = float(gen.uniform(0, 1)), float(gen.uniform(0, 1))
        weights = token_weights(b.teacher_block_ce, b.teacher_full_ce, alpha, beta)
        want_w = [max(cb - cf, 0.0) * alpha + beta for cb, cf in zip(b.teacher_block_ce.tolist(), b.teacher_full_ce.tolist())]
        worst = max(worst, max(abs(x - y) for x, y in zip(weights.w.tolist(), want_w)))

        ce = []
        for i in range(n - 1):
            ce.append(-math.log(_softmax(b.student_block_logits[i].tolist())[b.tokens[i + 1]]))
        want_wce = sum(c * w for c, w in zip(ce, want_w)) / len(ce)

        corrupted = {i for blk in b.plan.corrupted for i in range(*b.partition.ranges[blk])}
        kl_terms = []
        for i in range(n):
            if i in corrupted:
                continue
            p = _softmax(b.teacher_full_logits[i].tolist())
            q = _softmax(b.student_dropout_logits[i].tolist())
            kl_terms.append(sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q)))
        want_kl = sum(kl_terms) / len(kl_terms)

        kl = float(block_dropout_kl(b.teacher_full_logits, b.student_dropout_logits, b.partition, b.plan))
        out = distillation_loss(b, weights)
        worst = max(worst, abs(kl - want_kl), abs(float(out.kl) - want_kl))
        worst = max(worst, abs(float(out.weighted_ce) - want_wce), abs(float(out.total) - (want_kl + want_wce)))

        if corrupted:
            scrambled = b.student_dropout_logits.clone()
            idx = torch.as_tensor(sorted(corrupted))
            scrambled[idx] = torch.as_tensor(gen.normal(size=(len(idx), vocab)) * 5)
            again = float(block_dropout_kl(b.teacher_full_logits, scrambled, b.partition, b.plan))
            invariant = invariant and again == kl
    report(7, worst <= 1e-9 and invariant, f"max_abs_err={worst:.2e} kl_invariance={invariant}", t0)


def test_acceptance_08_total_loss_gradients_match_finite_differences():
    t0 = time.perf_counter()
    cfg = ModelConfig(num_layers=1, num_heads=2, head_dim=4, vocab_size=10, max_seq_len=16, seed=8)
    student = scaled_model(cfg, 5.0)
    teacher = scaled_model(ModelConfig(**{**cfg.__dict__, "seed": 9}), 5.0)
    for p in teacher.parameters():
        p.requires_grad_(False)
    gen = np.random.default_rng(8)
    names = [n for n, _ in student.named_parameters()]
    params = dict(student.named_parameters())
    eps = 1e-6
    worst = 0.0
    checked = 0
    for _ in range(10):
        n = int(gen.integers(4, 13))
        part = random_partition(gen, n, max_blocks=4)
        plan = DropoutPlan(frozenset(int(i) for i in range(part.final_index) if gen.random() < 0.5))
        tokens = [int(t) for t in gen.integers(0, 10, size=n)]

        def total() -> torch.Tensor:
            batch = build_batch(student, teacher, tokens, part, plan)
            weights = token_weights(batch.teacher_block_ce, batch.teacher_full_ce, 0.2, 0.1)
            return distillation_loss(batch, weights).total

        grads = gradients(student, total())
        for _ in range(20):
            name = names[int(gen.integers(len(names)))]
            flat = params[name].data.view(-1)
            idx = int(gen.integers(flat.numel()))
            old = flat[idx].item()
            with torch.no_grad():
                flat[idx] = old + eps
                up = float(total())
                flat[idx] = old - eps
                down = float(total())
                flat[idx] = old
            fd = (up - down) / (2 * eps)
            an = float(grads[name].view(-1)[idx])
            # relative error, with a floor so exactly-zero gradients compare on an absolute scale
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
            checked += 1
    report(8, worst < 1e-4 and checked == 200, f"max_rel_err={worst:.2e} checks={checked}", t0)


# ---------------------------------------------------------------------------
# 9: distillation efficacy

EFFICACY_CONFIG = DistillConfig(
    task="shift",
    steps=500,
    teacher_steps=1200,
    sinks_per_block=0,
    teacher_sink_fraction=0.0,
    lr_max=3e-4,
    lr_min=3e-5,
    seed=0,
)


def test_acceptance_09_distillation_closes_block_gap():
    t0 = time.perf_counter()
    result = distill(EFFICACY_CONFIG)
    before, after = result.eval_before, result.eval_after
    drop = 1.0 - after["kl_query"] / before["kl_query"]
    gap_before = abs(before["student_block_query_ce"] - before["teacher_full_query_ce"])
    gap_after = abs(after["student_block_query_ce"] - after["teacher_full_query_ce"])
    elapsed = time.perf_counter() - t0
    ok = EFFICACY_CONFIG.steps <= 2000 and drop >= 0.5 and gap_after < gap_before and elapsed < 1800
    detail = (
        f"kl {before['kl_query']:.4f}->{after['kl_query']:.4f} (drop {drop:.1%}) "
        f"ce_gap {gap_before:.4f}->{gap_after:.4f} steps={EFFICACY_CONFIG.steps}"
    )
    report(9, ok, detail, t0)


# ---------------------------------------------------------------------------
# 10, 11: segmentation


def test_acceptance_10_cut_head_beats_random_candidate():
    t0 = time.perf_counter()
    train = planted_segmentation_corpus(200, seed=10)
    heldout = planted_segmentation_corpus(60, seed=11)
    seg = Segmenter(ModelConfig(num_layers=1, num_heads=2, head_dim=8, max_seq_len=512, seed=10))
    train_cut_head(seg, train, HeadTrainConfig(epochs=6, seed=10))
    predicted = [accepted_offsets(ex.candidates, seg.probabilities(ex.candidates), 0.5) for ex in heldout]
    gold = [ex.gold_offsets for ex in heldout]
    f1 = boundary_f1(predicted, gold)
    rng = np.random.default_rng(10)
    baseline = []
    for ex, pred in zip(heldout, predicted):
        part = heuristic_segment(ex.text, "random_candidate", len(pred) + 1, rng, rule="newline")
        baseline.append(list(part.boundaries))
    f1_random = boundary_f1(baseline, gold)
    report(10, f1 >= 0.9 and f1 - f1_random >= 0.3, f"cuthead_f1={f1:.3f} random_candidate_f1={f1_random:.3f}", t0)


def test_acceptance_11_threshold_monotonicity_and_refinement():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    violations = 0
    for _ in range(1000):
        lines = [bytes(rng.integers(97, 123, size=int(rng.integers(1, 6)))).decode() for _ in range(int(rng.integers(2, 12)))]
        text = list("\n".join(lines).encode())
        cands = insert_candidates(text)
        probs = rng.uniform(0, 1, size=cands.num_internal)
        t_lo, t_hi = sorted(rng.uniform(0.01, 0.99, size=2))
        if not set(accepted_offsets(cands, probs, t_hi)) <= set(accepted_offsets(cands, probs, t_lo)):
            violations += 1
        depth = int(rng.integers(2, 4))
        thresholds = sorted(float(t) for t in rng.uniform(0.01, 0.99, size=depth))
        scorer = FixedScorer(dict(zip(cands.internal_offsets, probs)))
        levels = recursive_levels(text, SegmenterConfig(recursion_depth=depth, thresholds=thresholds), scorer)
        for a, b in zip(levels, levels[1:]):
            violations += not set(a.boundaries) <= set(b.boundaries)
    report(11, violations == 0, f"violations={violations} vectors=1000", t0)


# ---------------------------------------------------------------------------
# 12: efficiency trend

BENCH_LENGTHS = (4096, 8192, 16384, 32768)
BENCH_BLOCKS = 2
BENCH_QUERY = 64


def test_acceptance_12_block_prefill_is_cheaper_and_tracks_pair_counts():
    t0 = time.perf_counter()
    rows = run_bench(BENCH_LENGTHS, BENCH_BLOCKS, BENCH_QUERY, repeats=5, seed=12)
    faster = all(r.block_seconds < r.full_seconds for r in rows)
    increasing = gaps_increasing(rows)
    worst = max(r.ratio_error for r in rows)
    ratios = " ".join(f"{r.cost.context_len}:{r.measured_ratio:.2f}/{r.cost.ratio:.2f}" for r in rows)
    ok = faster and increasing and worst <= 0.25
    report(12, ok, f"block<full={faster} gap_increasing={increasing} max_ratio_err={worst:.1%} measured/model {ratios}", t0)


# ---------------------------------------------------------------------------
# 13: sink ablation on block-head queries

HEAD_CONFIG = dict(
    task="block_head", block_len=6, teacher_warmup_steps=1500, teacher_steps=1500, teacher_lr=1e-3,
    teacher_loss="answers", teacher_sink_fraction=0.5, steps=200, seed=0,
)


def test_acceptance_13_sinks_help_block_head_queries():
    t0 = time.perf_counter()
    with_sinks = DistillConfig(**HEAD_CONFIG, sinks_per_block=4)
    without = DistillConfig(**HEAD_CONFIG, sinks_per_block=0)
    task, _ = make_sampler(with_sinks)
    teacher, _ = train_teacher(with_sinks)
    rng = np.random.default_rng(13)
    queries = [block_head_sample(rng, task, with_sinks.num_blocks, (with_sinks.block_len,) * 2, head=True) for _ in range(300)]
    acc_teacher = answer_accuracy(teacher, queries, task.sink, 0, block=False)
    a = distill(with_sinks, teacher=teacher, teacher_cache=TeacherCache()).student
    b = distill(without, teacher=teacher, teacher_cache=TeacherCache()).student
    acc_sinks = answer_accuracy(a, queries, task.sink, 4)
    acc_plain = answer_accuracy(b, queries, task.sink, 0)
    report(13, acc_sinks >= acc_plain, f"with_sinks={acc_sinks:.3f} sink_ablated={acc_plain:.3f} teacher_full={acc_teacher:.3f}", t0)
