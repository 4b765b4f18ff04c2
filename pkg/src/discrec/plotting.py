"""Matplotlib rendering for reports; every figure lands next to its CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def norm_profiles_figure(profiles, path: str | Path) -> Path:
    """Grouped bars of mean embedding norm per ID level, one group per source."""
    path = Path(path)
    levels = len(profiles[0].values)
    x = np.arange(1, levels + 1)
    width = 0.8 / len(profiles)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for i, profile in enumerate(profiles):
        ax.bar(x + (i - (len(profiles) - 1) / 2) * width, profile.values, width, label=profile.source)
    ax.set_xlabel("semantic ID level")
    ax.set_ylabel("mean embedding norm")
    ax.set_xticks(x)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def heatmap_figure(matrix: np.ndarray, path: str | Path, title: str = "") -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4, 3.6))
    im = ax.imshow(matrix, cmap="viridis", aspect="equal")
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def metric_bars_figure(rows: dict[str, dict[str, float]], path: str | Path, title: str = "") -> Path:
    """rows: {row_label: {metric: value}}; one bar group per metric."""
    path = Path(path)
    labels = list(rows)
    metrics = sorted({m for r in rows.values() for m in r})
    x = np.arange(len(metrics))
    width = 0.8 / max(len(labels), 1)
    fig, ax = plt.subplots(figsize=(7, 3.4))
    for i, label in enumerate(labels):
        values = [rows[label].get(m, 0.0) for m in metrics]
        ax.bar(x + (i - (len(labels) - 1) / 2) * width, values, width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(metrics, fontsize=8)
    if title:
        ax.set_title(title, fontsize=10)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def bucket_curves_figure(buckets: dict[str, dict], metric: str, path: str | Path, title: str = "") -> Path:
    """Line of a single metric across ordered bucket labels."""
    path = Path(path)
    try:
        keys = sorted(buckets, key=lambda k: float(k))
    except ValueError:
        keys = sorted(buckets)
    values = [buckets[k][metric] for k in keys]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(keys, values, marker="o")
    ax.set_xlabel("bucket")
    ax.set_ylabel(metric)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
