"""The full desk experiment: two baselines, a finetuned baseline and R rounds
of mutual learning, each model scored with one channel and with all channels."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .model import EEND
from .training import (TrainConfig, TrainLog, der_metrics, finetune_round, mutual_learn,
                       resume_or_train, train_baseline)

log = logging.getLogger(__name__)


@dataclass
class RowResult:
    row: int
    label: str
    kind: str  # "single" or "multi": the input condition the model was trained for
    der_1ch: float
    der_1ch_median: float
    der_multi: float
    der_multi_median: float


@dataclass
class ExperimentResult:
    seed: int
    multi_channels: int
    rows: list = field(default_factory=list)

    def row(self, n: int) -> RowResult:
        return next(r for r in self.rows if r.row == n)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "multi_channels": self.multi_channels,
                "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        return cls(d["seed"], d["multi_channels"], [RowResult(**r) for r in d["rows"]])


def row_labels(rounds: int, multi_channels: int) -> list[tuple[int, str, str]]:
    c = multi_channels
    labels = [(1, f"Baseline {c}-ch model", "multi"),
              (2, "Baseline 1-ch model", "single"),
              (3, f"Finetune (2) using {c}-ch data", "multi")]
    teacher = 1
    for r in range(rounds):
        student = 4 + 2 * r
        labels.append((student, f"Knowledge distillation from ({teacher})", "single"))
        labels.append((student + 1, f"Finetune ({student}) using {c}-ch data", "multi"))
        teacher = student + 1
    return labels


def _row(spec, metrics) -> RowResult:
    n, label, kind = spec
    return RowResult(n, label, kind, metrics["der_1ch"], metrics["der_1ch_median"],
                     metrics["der_multi"], metrics["der_multi_median"])


def run_experiment(train_sessions: list, eval_sessions: list, cfg: TrainConfig, rounds: int,
                   out_dir, train_log: TrainLog | None = None,
                   resume: bool = False) -> ExperimentResult:
    """Train and score every model of the table; checkpoints land in ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_log = train_log if train_log is not None else TrainLog()
    multi_channels = min(cfg.teacher_channels, train_sessions[0].features.shape[0])
    labels = row_labels(rounds, multi_channels)
    mcfg = cfg.model_config(train_sessions[0].features.shape[1])

    def score(model: EEND) -> dict:
        return der_metrics(model, eval_sessions, multi_channels, cfg.collar)

    multi = resume_or_train(out, "baseline_multi.ckpt", resume, mcfg,
                            lambda: train_baseline(train_sessions, cfg, "multi", train_log).model)
    single = resume_or_train(out, "baseline_single.ckpt", resume, mcfg,
                             lambda: train_baseline(train_sessions, cfg, "single",
                                                    train_log).model)
    tuned = resume_or_train(out, "finetune_baseline_single.ckpt", resume, mcfg,
                            lambda: finetune_round(train_sessions, single, cfg,
                                                   "finetune-baseline", train_log).model)
    result = ExperimentResult(cfg.seed, multi_channels)
    for spec, model in zip(labels[:3], (multi, single, tuned)):
        result.rows.append(_row(spec, score(model)))
        log.info("row %d done: %s", spec[0], result.rows[-1])
    state = mutual_learn(train_sessions, rounds, cfg, multi, eval_sessions, out / "mutual",
                         train_log, resume)
    for r, entry in enumerate(state.metrics):
        for offset, prefix in ((0, "single_"), (1, "multi_")):
            metrics = {k[len(prefix):]: v for k, v in entry.items() if k.startswith(prefix)}
            result.rows.append(_row(labels[3 + 2 * r + offset], metrics))
    train_log.write_csv(out / "train_log.csv")
    (out / "results.json").write_text(json.dumps(result.to_dict(), indent=2))
    return result


@dataclass
class CriterionCheck:
    name: str
    wins: int
    needed: int
    detail: str

    @property
    def passed(self) -> bool:
        return self.wins >= self.needed


def directional_checks(results: list[ExperimentResult], margin: float = 0.005) -> list:
    """Count the seeds on which each expected ordering of the table holds."""
    n = len(results)
    need = -(-2 * n // 3)
    a = [r.row(1).der_multi < r.row(2).der_1ch for r in results]
    b = [r.row(4).der_1ch < r.row(2).der_1ch for r in results]
    c_close = [r.row(5).der_multi <= r.row(1).der_multi + margin for r in results]
    c_lower = [r.row(5).der_multi < r.row(1).der_multi for r in results]
    checks = [
        CriterionCheck("multi baseline beats single baseline", sum(a), need,
                       _pairs(results, (1, "der_multi"), (2, "der_1ch"))),
        CriterionCheck("distilled student beats single baseline", sum(b), need,
                       _pairs(results, (4, "der_1ch"), (2, "der_1ch"))),
        CriterionCheck("finetuned student within margin of multi baseline", sum(c_close), need,
                       _pairs(results, (5, "der_multi"), (1, "der_multi"))),
        CriterionCheck("finetuned student strictly lower on some seed", sum(c_lower), 1,
                       _pairs(results, (5, "der_multi"), (1, "der_multi"))),
    ]
    return checks


def _pairs(results, left, right) -> str:
    parts = []
    for r in results:
        lv = getattr(r.row(left[0]), left[1])
        rv = getattr(r.row(right[0]), right[1])
        parts.append(f"seed {r.seed}: {100 * lv:.3f} vs {100 * rv:.3f}")
    return "; ".join(parts)
