"""File-based matplotlib figures for training logs and metric reports."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import METRIC_NAMES, MetricReport


def _read_jsonl(path: Path) -> list[dict]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


def plot_supervised_log(log_path: Path, out_path: Path) -> Path:
    """Loss components and validation quality against epochs."""
    records = _read_jsonl(log_path)
    epochs = [r["epoch"] for r in records]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [r["l_pred"] for r in records], label="object prediction")
    ax_loss.plot(epochs, [r["l_gen"] for r in records], label="question generation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss per sample")
    ax_loss.set_yscale("log")
    ax_loss.legend()
    ax_val.plot(epochs, [r["val_f1"] for r in records], label="candidate F1")
    ax_val.plot(epochs, [r["val_perfect"] for r in records], label="perfect address")
    ax_val.plot(epochs, [r["val_correct"] for r in records], label="correct address")
    ax_val.set_xlabel("epoch")
    ax_val.set_ylim(0, 1)
    ax_val.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_rl_log(log_path: Path, out_path: Path) -> Path:
    """Return and success curves for the policy stage."""
    records = _read_jsonl(log_path)
    epochs = [r["epoch"] for r in records]
    fig, (ax_ret, ax_succ) = plt.subplots(1, 2, figsize=(10, 4))
    ax_ret.plot(epochs, [r["mean_return"] for r in records], label="mean return")
    ax_ret.plot(epochs, [r["baseline_value"] for r in records], label="baseline", ls="--")
    ax_ret.set_xlabel("epoch")
    ax_ret.legend()
    ax_succ.plot(epochs, [r["train_success"] for r in records], label="train (sampled)")
    ax_succ.plot(epochs, [r["val_success"] for r in records], label="val (greedy)")
    ax_succ.set_xlabel("epoch")
    ax_succ.set_ylabel("task success")
    ax_succ.set_ylim(0, 1)
    ax_succ.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_report(report: MetricReport, out_path: Path) -> Path:
    """Bar chart of every report metric with a std whisker per split."""
    splits = list(report.per_seed[0].keys()) if report.per_seed else []
    names = list(METRIC_NAMES)
    fig, ax = plt.subplots(figsize=(max(8, 1.6 * len(names)), 4.5))
    width = 0.8 / max(len(splits), 1)
    for si, split in enumerate(splits):
        means, stds = zip(*(report.aggregate(split, n) for n in names))
        xs = [i + si * width for i in range(len(names))]
        ax.bar(xs, means, width=width, yerr=stds, capsize=3, label=split)
    ax.set_xticks([i + width * (len(splits) - 1) / 2 for i in range(len(names))])
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_title(f"evaluation mode: {report.mode}")
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
