"""Command-line entry point: ``ngrec {eval,stats,gen-synth,train-toy,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import gradcheck as gc
from . import synthbench as sb
from .domain import compute_stats, dumps_json, parse_ground_truth, parse_predictions
from .errors import DivergenceDetected, InvalidConfig, IoFailure, NGRecError
from .experiment import SLICE_LENGTHS, ToyConfig, run_grid, summarize, write_report
from .metrics import evaluate
from .ngdino import ABLATIONS

EXIT_OK, EXIT_PROPERTY, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 1, 2, 3
THREADS_ENV = "NGREC_THREADS"


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from None


def _read_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config is not JSON: {exc.msg}", f"{path}: byte offset {exc.pos}") from None
    if not isinstance(doc, dict):
        raise InvalidConfig("config must be a JSON object", str(path))
    return doc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    gt = parse_ground_truth(args.gt, strict=not args.lenient, box_format=args.box_format)
    preds = parse_predictions(args.pred, strict=not args.lenient)
    threads = args.threads if args.threads is not None else int(os.environ.get(THREADS_ENV, "1"))
    report = evaluate(gt, preds, iou_threshold=args.iou, matcher=args.matcher,
                      category_strict=args.category_strict, threads=max(threads, 1))
    print(report.summary())
    if args.report:
        write_report(report, args.report)
    return EXIT_OK


def cmd_stats(args) -> int:
    stats = compute_stats(parse_ground_truth(args.gt, strict=not args.lenient))
    text = dumps_json(stats.to_dict())
    if args.out:
        _write(Path(args.out), text + "\n")
    print(text)
    return EXIT_OK


_SYNTH_FLAGS = ("n_scenes", "seed", "no_target_rate", "max_targets", "evidence_noise", "min_objects",
                "max_objects", "zipf_exponent", "color_rate", "region_rate", "hard_distractor_rate")


def synth_config_from_args(args) -> sb.SynthConfig:
    doc = _read_config(args.config) if args.config else {}
    known = {f.name for f in fields(sb.SynthConfig)}
    unknown = set(doc) - known
    if unknown:
        raise InvalidConfig(f"unknown synth config keys: {sorted(unknown)}", str(args.config))
    for key in ("image_size", "scale_mix"):
        if key in doc:
            doc[key] = tuple(doc[key])
    for name in _SYNTH_FLAGS:
        value = getattr(args, name)
        if value is not None:
            doc[name] = value
    try:
        return sb.SynthConfig(**doc)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from None


def cmd_gen_synth(args) -> int:
    cfg = synth_config_from_args(args)
    scenes = sb.generate(cfg)
    out = Path(args.out)
    sb.export_as_benchmark(scenes, out / "ground_truth.json", out / "answer_key.jsonl")
    _write(out / "config.json", dumps_json(cfg.to_dict()) + "\n")
    totals = sb.declared_totals(scenes)
    print(f"wrote {totals['expression_count']} expressions, {totals['instance_count']} targets, "
          f"{totals['no_target_count']} without target to {out}")
    return EXIT_OK


def toy_config_from_args(args) -> ToyConfig:
    cfg = ToyConfig.from_dict(_read_config(args.config)) if args.config else ToyConfig()
    over = {k: getattr(args, k) for k in ("train_scenes", "eval_scenes", "evidence_noise")
            if getattr(args, k) is not None}
    sched = {k: getattr(args, k) for k in ("stage1_epochs", "stage2_epochs", "lr", "stage1_lr", "batch_size")
             if getattr(args, k) is not None}
    if args.teacher_forcing is not None:
        sched["teacher_forcing"] = args.teacher_forcing
    return replace(cfg, **over, schedule=replace(cfg.schedule, **sched))


def cmd_train_toy(args) -> int:
    cfg = toy_config_from_args(args)
    if args.ablate == "grid" and args.ls == "grid":
        raise InvalidConfig("choose one grid: --ablate grid or --ls grid")
    ablations = list(ABLATIONS) if args.ablate == "grid" else [args.ablate]
    lengths = list(SLICE_LENGTHS) if args.ls == "grid" else [int(args.ls)] if args.ls else None
    out = Path(args.out)
    results = run_grid(cfg, args.seeds, ablations, lengths, out)
    rows = summarize(results)
    _write(out / "summary.json", json.dumps({"config": cfg.to_dict(), "rows": rows}, sort_keys=True, indent=1)
           + "\n")
    print(f"{'ablation':<10} {'L_s':>4} {'F1_inst':>8} {'N-acc':>7} {'count acc':>9}")
    for r in rows:
        count = "-" if r["count_bin_accuracy"] is None else f"{r['count_bin_accuracy'] * 100:9.2f}"
        nacc = "-" if r["n_acc"] is None else f"{r['n_acc'] * 100:7.2f}"
        print(f"{r['ablation']:<10} {r['per_bin_length']:>4} {r['f1_inst'] * 100:8.2f} {nacc:>7} {count:>9}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errors = gc.check_model(args.seed)
    print(gc.format_table(errors))
    return EXIT_OK if gc.max_error(errors) <= gc.TOLERANCE else EXIT_PROPERTY


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ngrec", description="Grounding metrics and count-aware decoder toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("gt")
    e.add_argument("pred")
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--matcher", choices=("greedy", "optimal"), default="greedy")
    e.add_argument("--category-strict", action=argparse.BooleanOptionalAction, default=True)
    e.add_argument("--report", help="write the full report as JSON")
    e.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    e.add_argument("--box-format", choices=("xywh", "cxcywh_norm"), default="xywh")
    e.add_argument("--lenient", action="store_true", help="warn on unknown fields instead of failing")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", help="dataset statistics")
    s.add_argument("gt")
    s.add_argument("--out")
    s.add_argument("--lenient", action="store_true")
    s.set_defaults(func=cmd_stats)

    g = sub.add_parser("gen-synth", help="generate a synthetic benchmark and its answer key")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON file of generator settings; flags override it")
    for name in _SYNTH_FLAGS:
        kind = float if name.endswith(("_rate", "_noise", "_exponent")) else int
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=kind)
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train-toy", help="two-stage training on a synthetic suite")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file of toy experiment settings; flags override it")
    t.add_argument("--ablate", choices=ABLATIONS + ("grid",), default="none")
    t.add_argument("--ls", choices=[str(n) for n in SLICE_LENGTHS] + ["grid"],
                   help="number queries per count bin")
    t.add_argument("--seeds", type=int, nargs="+", default=[0])
    t.add_argument("--train-scenes", type=int)
    t.add_argument("--eval-scenes", type=int)
    t.add_argument("--evidence-noise", type=float)
    t.add_argument("--stage1-epochs", type=int)
    t.add_argument("--stage2-epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--stage1-lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--teacher-forcing", action=argparse.BooleanOptionalAction, default=None)
    t.set_defaults(func=cmd_train_toy)

    c = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceDetected as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except NGRecError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
