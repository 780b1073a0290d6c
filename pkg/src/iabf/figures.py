"""Matplotlib rendering of report figures (distortion curves, training curves).

Figures are written next to the delimited output they summarize; the Agg
backend keeps everything headless.
"""

from __future__ import annotations

import csv

import numpy as np


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_distortion_figure(reports, path: str) -> None:
    """Distortion versus noise level, one line per method."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    by_method: dict[str, list] = {}
    for r in reports:
        by_method.setdefault(r.method, []).append(r)
    for method, rows in sorted(by_method.items()):
        rows = sorted(rows, key=lambda r: r.epsilon)
        ax.plot([r.epsilon for r in rows], [r.distortion for r in rows],
                marker="o", label=method)
    ax.set_xlabel("noise level")
    ax.set_ylabel("distortion per image")
    ax.grid(alpha=0.3)
    if by_method:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_training_figure(metrics_csv: str, path: str) -> None:
    """Two panels from a metrics file: training objective and validation distortion."""
    plt = _plt()
    steps, rec = [], []
    val_epochs, val_dist = [], []
    with open(metrics_csv, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            if row["split"] == "train":
                steps.append(int(row["step"]))
                rec.append(float(row["rec_loss"]))
            elif row["split"] == "val" and row["distortion"] != "nan":
                val_epochs.append(int(row["epoch"]))
                val_dist.append(float(row["distortion"]))
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(steps, rec, lw=0.8)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("reconstruction objective")
    axes[0].grid(alpha=0.3)
    axes[1].plot(val_epochs, val_dist, marker="o", ms=3, color="tab:orange")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("validation distortion")
    axes[1].grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_chain_figure(states: np.ndarray, path: str) -> None:
    """Per-step movement of a sampling chain (mean absolute change)."""
    plt = _plt()
    states = np.asarray(states, dtype=np.float64)
    deltas = np.abs(np.diff(states, axis=0)).mean(axis=1) if states.shape[0] > 1 else []
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(range(1, states.shape[0]), deltas, marker="o", ms=3)
    ax.set_xlabel("chain step")
    ax.set_ylabel("mean absolute pixel change")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
