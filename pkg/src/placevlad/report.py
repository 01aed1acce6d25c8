"""Matplotlib renderings that sit next to the delimited outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def save_recall_curve(ns, recalls, path: str | Path, title: str = "Recall@N") -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.plot(list(ns), list(recalls), marker="o", color="#2c6fbb")
    ax.set_xlabel("N")
    ax.set_ylabel("recall")
    ax.set_ylim(-0.02, 1.02)
    ax.set_xticks(list(ns))
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_training_curves(rows, path: str | Path) -> Path:
    """Two panels: loss terms per epoch, validation recall per epoch."""
    path = Path(path)
    epochs = [r.epoch for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.5))
    ax1.plot(epochs, [r.l_r for r in rows], label="ranking", color="#2c6fbb")
    ax1.plot(epochs, [r.l_u for r in rows], label="combined", color="#444444")
    if any(r.m > 0 for r in rows):
        ax1.plot(epochs, [r.m for r in rows], label="domain", color="#c44e52")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax1.grid(alpha=0.3)
    ax2.plot(epochs, [r.r1 for r in rows], label="R@1", color="#2c6fbb")
    ax2.plot(epochs, [r.r5 for r in rows], label="R@5", color="#55a868")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation recall")
    ax2.set_ylim(-0.02, 1.02)
    ax2.legend()
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
