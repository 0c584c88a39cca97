"""Matplotlib figure rendering for the report paths.

Figures are written next to the delimited outputs (JSONL/CSV/markdown)
of each subcommand.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import REPORT_COLUMNS, MetricsReport
from .toytrainer import TrainLog

DPI = 150


def plot_metrics(report: MetricsReport, path: str | Path) -> None:
    """Bar chart of per-task scores and aggregates."""
    labels, values = [], []
    flat = {
        "acc_p": report.acc_p,
        "acc_o": report.acc_o,
        "acc_api": report.acc_api,
        "acc_rc": report.acc_rc,
        **report.per_task,
    }
    for col in REPORT_COLUMNS:
        if flat.get(col) is not None:
            labels.append(col)
            values.append(flat[col])
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(range(len(values)), values, color="#4878cf")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=40, ha="right")
    ax.set_ylabel("score (%)")
    ax.set_ylim(0, 100)
    ax.set_title("Per-task and aggregate scores")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def plot_buckets(report: MetricsReport, out_dir: str | Path) -> list[Path]:
    """One bar chart per difficulty factor with populated buckets."""
    written = []
    for factor, rows in sorted(report.buckets.items()):
        populated = [r for r in rows if r["macc"] is not None]
        if not populated:
            continue
        labels = [
            f"[{r['lo']:g}, {'inf' if r['hi'] is None else format(r['hi'], 'g')})"
            for r in populated
        ]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(range(len(populated)), [r["macc"] for r in populated], color="#6acc64")
        ax.set_xticks(range(len(populated)))
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel("mAcc (%)")
        ax.set_ylim(0, 100)
        ax.set_title(f"mAcc by {factor}")
        fig.tight_layout()
        path = Path(out_dir) / f"buckets_{factor}.png"
        fig.savefig(path, dpi=DPI)
        plt.close(fig)
        written.append(path)
    return written


def plot_train_log(log: TrainLog, path: str | Path, title: str = "Training") -> None:
    """Reward/IoU curves with the threshold schedule on a twin axis."""
    steps = log.column("step")
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(steps, log.column("mean_reward"), label="mean reward")
    ax1.plot(steps, log.column("mean_iou"), label="mean IoU")
    ax1.legend(loc="lower right")
    ax1.set_title(title)
    ax2.plot(steps, log.column("tau_iou_at_mean_s"), label="IoU threshold", color="#d65f5f")
    ax2.plot(steps, log.column("hard_group_fraction"), label="hard-group fraction",
             color="#956cb4")
    ax2.plot(steps, log.column("kl"), label="KL", color="#8c8c8c")
    ax2.legend(loc="upper left")
    ax2.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def plot_schedule_comparison(
    logs: dict[str, TrainLog], path: str | Path
) -> None:
    """Overlaid mean IoU and threshold curves for fixed vs dynamic runs."""
    fig, ax = plt.subplots(figsize=(7, 4))
    colors = {"fixed": "#4878cf", "dynamic": "#d65f5f"}
    for mode, log in logs.items():
        c = colors.get(mode)
        ax.plot(log.column("step"), log.column("mean_iou"),
                label=f"{mode}: mean IoU", color=c)
        ax.plot(log.column("step"), log.column("tau_iou_at_mean_s"),
                linestyle="--", label=f"{mode}: threshold", color=c, alpha=0.6)
    ax.set_xlabel("step")
    ax.legend()
    ax.set_title("Fixed vs dynamic threshold schedule")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
