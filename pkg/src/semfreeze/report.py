"""Render run outputs as matplotlib figures, written next to the CSV files.

Figures are derived from the delimited outputs, not from live state, so a
run directory can be re-rendered at any time.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_PHASE_COLORS = {"before": "tab:red", "after": "tab:blue", "trace": "tab:purple"}


def _read_csv_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def save_deviation_figure(violin_csv: Path, out_png: Path) -> None:
    """Per-layer deviation mean with a p10..p90 band, one series per phase."""
    rows = _read_csv_rows(violin_csv)
    if not rows:
        raise ValueError(f"{violin_csv} has no rows")
    fig, ax = plt.subplots(figsize=(7, 4))
    phases = sorted({r["phase"] for r in rows}, reverse=True)
    for phase in phases:
        sub = sorted((r for r in rows if r["phase"] == phase), key=lambda r: int(r["layer"]))
        layers = [int(r["layer"]) for r in sub]
        mean = [float(r["mean"]) for r in sub]
        lo = [float(r["p10"]) for r in sub]
        hi = [float(r["p90"]) for r in sub]
        color = _PHASE_COLORS.get(phase)
        ax.plot(layers, mean, marker="o", label=f"{phase} (mean)", color=color)
        ax.fill_between(layers, lo, hi, alpha=0.2, color=color)
    ax.set_xlabel("layer")
    ax.set_ylabel("deviation")
    ax.set_ylim(bottom=0.0)
    ax.set_title("Per-layer transition deviation (band: p10..p90)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def save_histogram_figure(histogram_csv: Path, out_png: Path) -> None:
    rows = _read_csv_rows(histogram_csv)
    if not rows:
        raise ValueError(f"{histogram_csv} has no rows")
    boundaries = [int(r["eof"]) for r in rows]
    counts = [int(r["count"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(boundaries, counts, color="tab:green")
    ax.set_xlabel("natural freeze boundary")
    ax.set_ylabel("records")
    ax.set_title("Natural boundary distribution")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def save_quota_figure(plans_csv: Path, out_png: Path) -> None:
    rows = _read_csv_rows(plans_csv)
    if not rows:
        raise ValueError(f"{plans_csv} has no rows")
    growths = sorted({r["growth"] for r in rows})
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / len(growths)
    for i, growth in enumerate(growths):
        sub = sorted((r for r in rows if r["growth"] == growth), key=lambda r: int(r["boundary"]))
        xs = np.array([int(r["boundary"]) for r in sub], dtype=float)
        ax.bar(xs + i * width, [int(r["quota"]) for r in sub], width=width, label=growth)
    ax.set_xlabel("freeze boundary")
    ax.set_ylabel("batch quota")
    ax.set_title("Budget plan quotas")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def save_schedule_figure(ledger_csv: Path, out_png: Path) -> None:
    rows = _read_csv_rows(ledger_csv)
    if not rows:
        raise ValueError(f"{ledger_csv} has no rows")
    fig, ax = plt.subplots(figsize=(7, 4))
    for phase, marker in (("slot", "o"), ("forced", "x")):
        steps = [i for i, r in enumerate(rows) if r["phase"] == phase]
        bounds = [int(rows[i]["assigned_boundary"]) for i in steps]
        if steps:
            ax.scatter(steps, bounds, s=12, marker=marker, label=phase)
    ax.set_xlabel("training step")
    ax.set_ylabel("assigned boundary")
    ax.set_title("Scheduler assignments")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def save_summary_figure(report_json: Path, out_png: Path) -> None:
    with open(report_json) as fh:
        rep = json.load(fh)
    fig, ax = plt.subplots(figsize=(5, 4))
    names, values = ["cost_saving"], [rep.get("cost_saving") or 0.0]
    if rep.get("accuracy") is not None:
        names.append("accuracy")
        values.append(rep["accuracy"])
    ax.bar(names, values, color=["tab:orange", "tab:blue"][: len(names)])
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"{rep.get('policy', '?')} on {rep.get('task', '?')}")
    for i, v in enumerate(values):
        ax.text(i, v + 0.02, f"{v:.3f}", ha="center")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def render_run_dir(run_dir) -> list[Path]:
    """Render every known CSV/JSON in a run directory to PNGs alongside it."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    made: list[Path] = []
    targets = (
        ("violin.csv", "deviations.png", save_deviation_figure),
        ("histogram.csv", "histogram.png", save_histogram_figure),
        ("plans.csv", "quotas.png", save_quota_figure),
        ("schedule_ledger.csv", "schedule.png", save_schedule_figure),
        ("report.json", "summary.png", save_summary_figure),
    )
    for src, dst, fn in targets:
        src_path = run_dir / src
        if src_path.exists():
            out = run_dir / dst
            fn(src_path, out)
            made.append(out)
    if not made:
        raise FileNotFoundError(f"no renderable outputs found in {run_dir}")
    return made
