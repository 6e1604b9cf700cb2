"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG output byte-stable across runs
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_error_histograms(histograms: dict, path, title: str = "Per-pose A-MPJPE"):
    """Overlayed step histograms with a logarithmic count axis."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, hist in histograms.items():
        rows = hist.to_rows()
        lows = np.array([lo for lo, _, _ in rows])
        counts = np.array([c for _, _, c in rows], dtype=float)
        ax.step(lows, np.where(counts > 0, counts, np.nan), where="post", label=label)
    ax.set_yscale("log")
    ax.set_xlabel("error (mm); last bin is overflow")
    ax.set_ylabel("number of poses")
    ax.set_title(title)
    ax.legend()
    _save(fig, path)


def plot_loss_curve(history, path):
    rows = history.rows
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(rows))
    ax.plot(x, [r["mean_train_loss"] for r in rows], label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss per pose")
    val = [r.get("val_a_mpjpe") for r in rows]
    if any(v is not None for v in val):
        ax2 = ax.twinx()
        ax2.plot(x, [np.nan if v is None else v for v in val], color="tab:red", label="val A-MPJPE")
        ax2.set_ylabel("val A-MPJPE (mm)")
    ax.legend(loc="upper right")
    _save(fig, path)


def plot_ablation(rows, path):
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [r.label for r in rows]
    ax.bar(range(len(rows)), [r.a_mpjpe for r in rows], color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("A-MPJPE (mm)")
    _save(fig, path)


def plot_corruption_suite(summary: list[dict], path):
    fig, ax = plt.subplots(figsize=(7, 4))
    kinds = [s["corruption"] for s in summary]
    x = np.arange(len(kinds))
    ax.bar(x - 0.2, [s["direct_median_root_error"] for s in summary], 0.4, label="direct")
    ax.bar(x + 0.2, [s["baseline_median_root_error"] for s in summary], 0.4, label="baseline")
    ax.set_xticks(x)
    ax.set_xticklabels(kinds, rotation=30, ha="right")
    ax.set_ylabel("median root error (mm)")
    ax.legend()
    _save(fig, path)
