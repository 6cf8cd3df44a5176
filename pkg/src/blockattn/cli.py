"""Command-line entry point.

Every subcommand prints one JSON document on stdout, logs to stderr and
writes ``manifest.json`` into the output directory. Exit codes: 0 ok,
2 usage or configuration problem, 3 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from blockattn import __version__
from blockattn.errors import BlockAttnError, ContractError
from blockattn.kvcache import CACHE_VERSION
from blockattn.model import CHECKPOINT_VERSION, KV_FORMAT_VERSION, ModelConfig, ToyTransformer, load_model, save_checkpoint
from blockattn.rng import stream

log = logging.getLogger("blockattn")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3

FORMAT_VERSIONS = {
    "checkpoint": CHECKPOINT_VERSION,
    "kv_block": KV_FORMAT_VERSION,
    "kv_cache": CACHE_VERSION,
    "manifest": 1,
    "metrics": 1,
}


class UsageError(Exception):
    """Bad flags, unreadable inputs or an invalid configuration file."""


@dataclass
class RunManifest:
    subcommand: str
    config_path: str | None
    seed: int
    out_dir: str
    argv: list[str]
    formats: dict[str, int] = field(default_factory=dict)
    package_version: str = __version__
    outputs: list[str] = field(default_factory=list)

    def write(self) -> Path:
        path = Path(self.out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def _config_defaults(path: str | None) -> dict[str, str]:
    """``key = value`` lines; keys use the long flag names with dashes or underscores."""
    if not path:
        return {}
    values = {}
    for lineno, raw in enumerate(_read_text(path).splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = val
    return values


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    sys.stdout.flush()


# ---------------------------------------------------------------------------
# subcommands


def cmd_segment(args, manifest: RunManifest) -> dict:
    from blockattn.segmentation import (
        AverageScorer,
        Segmenter,
        SegmenterConfig,
        heuristic_segment,
        recursive_levels,
        statistical_segment,
    )
    from blockattn.segmentation.baselines import HEURISTIC_METHODS, STATISTICAL_METHODS

    text = _read_text(args.input)
    ids = list(text.encode("utf-8"))
    thresholds = _floats(args.thresholds)
    if len(thresholds) == 1 and args.depth > 1:
        thresholds = thresholds * args.depth
    try:
        seg_cfg = SegmenterConfig(recursion_depth=args.depth, thresholds=thresholds, rule=args.rule)
    except ContractError as exc:
        raise UsageError(str(exc)) from exc

    levels = None
    if args.scorer in ("cuthead", "average"):
        if args.scorer == "cuthead":
            if not args.checkpoint:
                raise UsageError("the cuthead scorer needs --checkpoint (see train-segmenter)")
            scorer = Segmenter.load(args.checkpoint)
        else:
            if args.parallel_degree is None:
                raise UsageError("--scorer average needs --parallel-degree")
            scorer = AverageScorer(args.parallel_degree)
        levels = recursive_levels(ids, seg_cfg, scorer)
        partition = levels[-1]
    elif args.scorer in STATISTICAL_METHODS:
        if not args.checkpoint or args.parallel_degree is None:
            raise UsageError(f"--scorer {args.scorer} needs --checkpoint (a language model) and --parallel-degree")
        partition = statistical_segment(load_model(args.checkpoint), ids, args.scorer, args.parallel_degree)
    elif args.scorer in HEURISTIC_METHODS:
        if args.parallel_degree is None:
            raise UsageError(f"--scorer {args.scorer} needs --parallel-degree")
        partition = heuristic_segment(ids, args.scorer, args.parallel_degree, stream(args.seed, "heuristic"), args.rule)
    else:  # argparse restricts choices, so this is unreachable from the command line
        raise UsageError(f"unknown scorer {args.scorer!r}")

    blocks = [
        {"start": s, "end": e, "text": bytes(ids[s:e]).decode("utf-8", errors="replace")} for s, e in partition.ranges
    ]
    result = {
        "scorer": args.scorer,
        "rule": args.rule,
        "depth": args.depth,
        "thresholds": thresholds,
        "parallel_degree": partition.parallel_degree,
        "boundaries": partition.boundaries,
        "blocks": blocks,
    }
    if levels is not None:
        result["levels"] = [lv.boundaries for lv in levels]
    path = Path(manifest.out_dir) / "partition.json"
    path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    manifest.outputs.append(str(path))
    return result


def cmd_train_segmenter(args, manifest: RunManifest) -> dict:
    from blockattn.segmentation import HeadTrainConfig, Segmenter, read_corpus, train_cut_head
    from blockattn.synthetic import boundary_f1, planted_segmentation_corpus

    if args.corpus:
        try:
            corpus = read_corpus(args.corpus)
        except OSError as exc:
            raise UsageError(f"cannot read {args.corpus}: {exc}") from exc
        heldout = []
    else:
        corpus = planted_segmentation_corpus(args.synthetic, int(stream(args.seed, "seg-train").integers(2**31)))
        heldout = planted_segmentation_corpus(args.heldout, int(stream(args.seed, "seg-heldout").integers(2**31)))
    cfg = ModelConfig(
        num_layers=args.layers,
        num_heads=args.heads,
        head_dim=args.head_dim,
        max_seq_len=args.max_seq_len,
        seed=int(stream(args.seed, "init").integers(2**31)),
    )
    segmenter = Segmenter(cfg)
    hp = HeadTrainConfig(epochs=args.epochs, lr_max=args.lr, lr_min=args.lr / 10, freeze_backbone=args.freeze_backbone, seed=args.seed)
    log.info("training cut head on %d examples for %d epochs", len(corpus), hp.epochs)
    result = train_cut_head(segmenter, corpus, hp)
    path = Path(manifest.out_dir) / "segmenter.bkvm"
    segmenter.save(path)
    manifest.outputs.append(str(path))
    out = {"examples": len(corpus), "epoch_losses": result.epoch_losses, "checkpoint": str(path)}
    if heldout:
        pred = []
        for ex in heldout:
            probs = segmenter.probabilities(ex.candidates)
            pred.append([o for o, p in zip(ex.candidates.internal_offsets, probs) if p >= 0.5])
        out["heldout_f1"] = boundary_f1(pred, [ex.gold_offsets for ex in heldout])
    return out


def cmd_distill(args, manifest: RunManifest) -> dict:
    from blockattn.distillation import DistillConfig, distill, metrics_line

    try:
        cfg = DistillConfig.load(args.config) if args.config else DistillConfig()
        if args.seed_given:
            cfg.seed = args.seed
        if args.steps is not None:
            cfg.steps = args.steps
        cfg.validate()
    except OSError as exc:
        raise UsageError(f"cannot read {args.config}: {exc}") from exc
    except ContractError as exc:
        raise UsageError(f"invalid distillation config: {exc}") from exc
    manifest.seed = cfg.seed
    out_dir = Path(manifest.out_dir)
    (out_dir / "config.txt").write_text(cfg.to_text())
    teacher = load_model(cfg.teacher_checkpoint) if cfg.teacher_checkpoint else None
    metrics_path = out_dir / "metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as fh:

        def on_metrics(m: dict) -> None:
            fh.write(metrics_line(m) + "\n")
            if m["step"] % 50 == 0:
                log.info("step %d total %.5f kl %.5f", m["step"], m["total"], m["kl"])

        result = distill(cfg, teacher=teacher, on_metrics=on_metrics)
    save_checkpoint(result.teacher, out_dir / "teacher.bkvm")
    save_checkpoint(result.student, out_dir / "student.bkvm")
    manifest.outputs += [str(out_dir / n) for n in ("config.txt", "metrics.jsonl", "teacher.bkvm", "student.bkvm")]
    return {"steps": cfg.steps, "eval_before": result.eval_before, "eval_after": result.eval_after}


def cmd_simulate_cache(args, manifest: RunManifest) -> dict:
    from blockattn.cachesim import CacheScenario, coding_agent_scenario, research_agent_scenario, simulate

    if args.scenario:
        try:
            scenario = CacheScenario.from_dict(json.loads(_read_text(args.scenario)))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise BlockAttnError(f"malformed scenario file {args.scenario}: {exc}") from exc
    elif args.preset == "research-agent":
        scenario = research_agent_scenario()
    else:
        scenario = coding_agent_scenario()
    modes = ["prefix", "block"] if args.mode == "both" else [args.mode]
    out = {mode: simulate(scenario, mode) for mode in modes}
    if len(modes) == 2:
        out["extra_hit_tokens"] = out["block"]["aggregate"]["hit_tokens"] - out["prefix"]["aggregate"]["hit_tokens"]
    return out


def cmd_bench(args, manifest: RunManifest) -> dict:
    from blockattn.bench import gaps_increasing, median_ratio_error, run_bench

    lengths = _ints(args.lengths)
    rows = run_bench(lengths, args.blocks, args.query_len, repeats=args.repeats, seed=args.seed, chunk=args.chunk)
    for r in rows:
        log.info("context %d: full %.4fs block %.4fs", r.cost.context_len, r.full_seconds, r.block_seconds)
    return {
        "rows": [r.as_dict() for r in rows],
        "gaps_increasing": gaps_increasing(rows),
        "median_ratio_error": median_ratio_error(rows),
    }


COMMANDS = {
    "segment": cmd_segment,
    "train-segmenter": cmd_train_segmenter,
    "distill": cmd_distill,
    "simulate-cache": cmd_simulate_cache,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    from blockattn.segmentation.baselines import HEURISTIC_METHODS, STATISTICAL_METHODS
    from blockattn.segmentation.candidates import RULES

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    common.add_argument("--out", default="blockattn-out", help="output directory for artifacts and manifest.json")
    common.add_argument("--config", default=None, help="key = value file; for distill the distillation config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="blockattn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", parents=[common], help="split a text file into blocks")
    p.add_argument("input")
    p.add_argument("--rule", default="newline", choices=sorted(RULES))
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--thresholds", default="0.5", help="one threshold per recursion level, comma separated")
    scorers = ["cuthead", "average", *[m for m in HEURISTIC_METHODS if m != "average"], *STATISTICAL_METHODS]
    p.add_argument("--scorer", default="cuthead", choices=scorers)
    p.add_argument("--parallel-degree", type=int, default=None)
    p.add_argument("--checkpoint", default=None, help="segmenter checkpoint (cuthead) or language model (loss, entropy)")

    p = sub.add_parser("train-segmenter", parents=[common], help="train the cut head")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--corpus", default=None, help="JSONL corpus with text, candidate_offsets and gold_cuts")
    src.add_argument("--synthetic", type=int, default=150, help="size of a planted synthetic corpus")
    p.add_argument("--heldout", type=int, default=60)
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--freeze-backbone", action="store_true")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=8)
    p.add_argument("--max-seq-len", type=int, default=512)

    p = sub.add_parser("distill", parents=[common], help="block-attention distillation at toy scale")
    p.add_argument("--steps", type=int, default=None, help="override the config's step count")

    p = sub.add_parser("simulate-cache", parents=[common], help="prefix versus block cache hit rates")
    p.add_argument("--scenario", default=None, help="scenario JSON file")
    p.add_argument("--preset", default="coding-agent", choices=["coding-agent", "research-agent"])
    p.add_argument("--mode", default="both", choices=["prefix", "block", "both"])

    p = sub.add_parser("bench", parents=[common], help="measured and modelled prefill cost")
    p.add_argument("--lengths", default="256,512,1024,2048")
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--query-len", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--chunk", type=int, default=128, help="prefill chunk length")
    return parser


def _apply_config_defaults(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config and args.command != "distill":
        sub = parser._subparsers._group_actions[0].choices[args.command]  # type: ignore[union-attr]
        known = {a.dest: a for a in sub._actions}
        overrides = {}
        for key, raw in _config_defaults(args.config).items():
            if key not in known or key in ("config", "help"):
                raise UsageError(f"{args.config}: unknown option {key!r} for {args.command}")
            action = known[key]
            try:
                overrides[key] = action.type(raw) if action.type else raw
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {raw!r}") from exc
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config_defaults(parser, argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"blockattn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    torch.set_num_threads(1)
    out_dir = Path(args.out)
    manifest = RunManifest(args.command, args.config, args.seed, str(out_dir), argv, dict(FORMAT_VERSIONS))
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = COMMANDS[args.command](args, manifest)
        manifest.write()
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (BlockAttnError, ValueError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    _emit(payload)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
