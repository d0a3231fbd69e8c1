"""Seeded toy experiments: the component ablation grid and the slice-length grid."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

from . import synthbench as sb
from .errors import InvalidConfig
from .metrics import MetricReport
from .ngdino import ABLATIONS, NGDINO, LossWeights, ModelConfig
from .tensor import save_checkpoint
from .train import Schedule, SceneTensors, evaluate_model, train

logger = logging.getLogger(__name__)

SLICE_LENGTHS = (1, 10, 100)
# train and eval suites are drawn from disjoint seed ranges
TRAIN_SEED_OFFSET = 1000
EVAL_SEED_OFFSET = 5000


@dataclass(frozen=True)
class ToyConfig:
    train_scenes: int = 2000
    eval_scenes: int = 500
    no_target_rate: float = 0.1
    max_targets: int = 8
    evidence_noise: float = 0.1
    dim: int = 32
    num_queries: int = 16
    per_bin_length: int = 10
    schedule: Schedule = field(default_factory=Schedule)

    def __post_init__(self):
        if self.train_scenes < 1 or self.eval_scenes < 1:
            raise InvalidConfig("scene counts must be positive")

    def synth(self, n: int, seed: int) -> sb.SynthConfig:
        return sb.SynthConfig(n_scenes=n, seed=seed, no_target_rate=self.no_target_rate,
                              max_targets=self.max_targets, evidence_noise=self.evidence_noise)

    def model(self, ablation: str, per_bin_length: int | None = None) -> ModelConfig:
        return ModelConfig.for_ablation(ablation, dim=self.dim, num_queries=self.num_queries,
                                        per_bin_length=per_bin_length or self.per_bin_length)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ToyConfig":
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidConfig(f"unknown toy config keys: {sorted(unknown)}")
        sched = doc.pop("schedule", None)
        cfg = cls(**doc)
        if sched is not None:
            sched = dict(sched)
            bad = set(sched) - {f.name for f in fields(Schedule)}
            if bad:
                raise InvalidConfig(f"unknown schedule keys: {sorted(bad)}")
            if isinstance(sched.get("weights"), dict):
                sched["weights"] = LossWeights(**sched["weights"])
            cfg = replace(cfg, schedule=replace(cfg.schedule, **sched))
        return cfg


@dataclass
class Suite:
    train_scenes: list
    eval_scenes: list
    train: SceneTensors
    eval: SceneTensors


def build_suite(cfg: ToyConfig, seed: int) -> Suite:
    tr = sb.generate(cfg.synth(cfg.train_scenes, TRAIN_SEED_OFFSET + seed))
    ev = sb.generate(cfg.synth(cfg.eval_scenes, EVAL_SEED_OFFSET + seed))
    return Suite(tr, ev, SceneTensors.from_scenes(tr, cfg.dim, cfg.num_queries),
                 SceneTensors.from_scenes(ev, cfg.dim, cfg.num_queries))


@dataclass(frozen=True)
class CellResult:
    ablation: str
    per_bin_length: int
    seed: int
    report: MetricReport


def run_cell(cfg: ToyConfig, suite: Suite, ablation: str, seed: int, per_bin_length: int | None = None,
             out_dir=None) -> CellResult:
    """Train one model on ``suite`` and evaluate it on the held-out split.

    When ``out_dir`` is given, writes ``checkpoint.json``, ``train_log.jsonl``
    and ``report.json`` there.
    """
    ls = per_bin_length or cfg.per_bin_length
    model = NGDINO(cfg.model(ablation, ls), seed=seed)
    schedule = replace(cfg.schedule, seed=seed)
    out = Path(out_dir) if out_dir is not None else None
    train(model, suite.train, schedule, log_path=out / "train_log.jsonl" if out else None)
    report = evaluate_model(model, suite.eval_scenes, suite.eval)
    report.config.update({"ablation": ablation, "per_bin_length": ls, "seed": seed, "toy": cfg.to_dict()})
    if out is not None:
        save_checkpoint(model.named_parameters(), out / "checkpoint.json",
                        {"ablation": ablation, "per_bin_length": ls, "seed": seed})
        write_report(report, out / "report.json")
    logger.info("seed %d %s L_s=%d F1_inst %.4f n_acc %s", seed, ablation, ls, report.f1_inst, report.n_acc)
    return CellResult(ablation, ls, seed, report)


def write_report(report: MetricReport, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")


def run_grid(cfg: ToyConfig, seeds: Sequence[int], ablations: Sequence[str] = ABLATIONS,
             slice_lengths: Sequence[int] | None = None, out_dir=None) -> list[CellResult]:
    """Every (seed, ablation, slice length) cell; one suite per seed is shared across cells."""
    for a in ablations:
        if a not in ABLATIONS:
            raise InvalidConfig(f"unknown ablation {a!r}")
    lengths = list(slice_lengths) if slice_lengths else [cfg.per_bin_length]
    results = []
    for seed in seeds:
        suite = build_suite(cfg, seed)
        for a in ablations:
            for ls in lengths:
                cell_dir = None
                if out_dir is not None:
                    cell_dir = Path(out_dir) / f"seed{seed}" / f"{a}_ls{ls}"
                results.append(run_cell(cfg, suite, a, seed, ls, cell_dir))
    return results


def summarize(results: Sequence[CellResult]) -> list[dict]:
    """Seed means per (ablation, slice length), in first-seen order."""
    groups: dict[tuple[str, int], list[MetricReport]] = {}
    for r in results:
        groups.setdefault((r.ablation, r.per_bin_length), []).append(r.report)
    rows = []
    for (a, ls), reps in groups.items():
        def avg(key):
            vals = [getattr(r, key) for r in reps if getattr(r, key) is not None]
            return sum(vals) / len(vals) if vals else None

        rows.append({
            "ablation": a, "per_bin_length": ls, "seeds": len(reps),
            "f1_inst": avg("f1_inst"), "acc_inst": avg("acc_inst"), "f1_img": avg("f1_img"),
            "acc_img": avg("acc_img"), "n_acc": avg("n_acc"), "count_bin_accuracy": avg("count_bin_accuracy"),
            "count_mae": avg("count_mae"),
        })
    return rows
