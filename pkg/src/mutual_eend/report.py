"""Result tables, JSON summaries and figures for experiment runs."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

from matplotlib import pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiment import ExperimentResult  # noqa: E402


def _pct(v: float) -> str:
    return f"{100 * v:6.2f}"


def _cell(value: float, median: float, mismatched: bool) -> str:
    mark = "*" if mismatched else " "
    return f"{_pct(value)} ({_pct(median).strip():>5}){mark}"


def format_table(rows, multi_channels: int, title: str = "") -> str:
    """Fixed-width DER table; values in percent, median-filtered in parentheses.

    ``*`` marks a mismatched condition: a multi-channel model scored on one
    channel, or a single-channel model scored on all channels.
    """
    label_w = max([len(f"({r.row}) {r.label}") for r in rows] + [10])
    head_1, head_c = "DER_1ch", f"DER_{multi_channels}ch"
    cell_w = 17
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'':{label_w}}  {head_1:>{cell_w}}  {head_c:>{cell_w}}")
    lines.append("-" * (label_w + 2 * cell_w + 4))
    for r in rows:
        name = f"({r.row}) {r.label}"
        one = _cell(r.der_1ch, r.der_1ch_median, r.kind == "multi")
        many = _cell(r.der_multi, r.der_multi_median, r.kind == "single")
        lines.append(f"{name:<{label_w}}  {one:>{cell_w}}  {many:>{cell_w}}")
    lines.append("* mismatched condition; parentheses: 11-frame median filtering")
    return "\n".join(lines) + "\n"


def mean_rows(results: list[ExperimentResult]):
    """Per-row means over seeds, as rows of the first result's type."""
    first = results[0]
    out = []
    for row in first.rows:
        same = [r.row(row.row) for r in results]
        out.append(type(row)(row.row, row.label, row.kind,
                             *(float(np.mean([getattr(s, f) for s in same]))
                               for f in ("der_1ch", "der_1ch_median", "der_multi",
                                         "der_multi_median"))))
    return out


def write_summary(results: list[ExperimentResult], checks, out_dir) -> dict:
    """Write ``table.txt`` and ``summary.json``; return the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    c = results[0].multi_channels
    parts = [format_table(r.rows, c, f"seed {r.seed}") for r in results]
    if len(results) > 1:
        parts.append(format_table(mean_rows(results), c, f"mean over {len(results)} seeds"))
    if checks:
        parts.append("".join(f"{'PASS' if k.passed else 'FAIL'} {k.name}: {k.wins}/"
                             f"{len(results)} seeds (need {k.needed}) [{k.detail}]\n"
                             for k in checks))
    table = "\n".join(parts)
    (out / "table.txt").write_text(table)
    summary = {
        "runs": [r.to_dict() for r in results],
        "checks": [{"name": k.name, "wins": k.wins, "needed": k.needed, "passed": k.passed}
                   for k in checks],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def plot_der_bars(results: list[ExperimentResult], path) -> None:
    rows = mean_rows(results)
    c = results[0].multi_channels
    x = np.arange(len(rows))
    width = 0.38
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for offset, field, label in ((-width / 2, "der_1ch", "1 channel"),
                                 (width / 2, "der_multi", f"{c} channels")):
        means = [100 * getattr(r, field) for r in rows]
        ax.bar(x + offset, means, width, label=label)
        for k, res in enumerate(results):
            pts = [100 * getattr(res.row(r.row), field) for r in rows]
            ax.scatter(x + offset, pts, s=10, color="k", zorder=3,
                       label="seeds" if (k == 0 and offset > 0) else None)
    ax.set_xticks(x)
    ax.set_xticklabels([f"({r.row})" for r in rows])
    ax.set_xlabel("model")
    ax.set_ylabel("DER (%)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def read_train_log(path) -> list[tuple]:
    with open(path, newline="") as fh:
        return [(r["phase"], int(r["step"]), r["split"], float(r["loss"]), float(r["lr"]))
                for r in csv.DictReader(fh)]


def plot_losses(log_rows, path) -> None:
    phases = list(dict.fromkeys(p for p, *_ in log_rows))
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharex=False)
    for phase in phases:
        val = [(s, l) for p, s, sp, l, _ in log_rows if p == phase and sp == "val"]
        lr = [(s, r) for p, s, sp, _, r in log_rows if p == phase and sp == "train"]
        if val:
            axes[0].plot(*zip(*val), marker=".", label=phase)
        if lr:
            axes[1].plot(*zip(*lr), label=phase)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("validation loss")
    axes[0].set_yscale("log")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("learning rate")
    axes[0].legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render(results: list[ExperimentResult], checks, out_dir, log_paths=()) -> dict:
    """Table, JSON and figures for a set of seeds; returns the summary dict."""
    out = Path(out_dir)
    summary = write_summary(results, checks, out)
    plot_der_bars(results, out / "der_by_model.png")
    for seed, p in log_paths:
        if Path(p).exists():
            plot_losses(read_train_log(p), out / f"losses_seed{seed}.png")
    return summary
