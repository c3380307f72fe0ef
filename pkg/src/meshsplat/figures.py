"""Figure rendering for fit and evaluation reports.

Every plot goes straight to a file; nothing opens a window. These sit
beside the CSV outputs so a run directory is self-describing.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_TERMS = ["total", "color", "silhouette", "edge", "laplacian"]


def plot_loss_curves(history: Sequence[dict], path) -> None:
    """Loss terms over iterations on a log scale, one line per term."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    if history:
        its = [row["iteration"] for row in history]
        for term in _TERMS:
            vals = np.asarray([row[term] for row in history], dtype=float)
            ax.plot(its, np.maximum(vals, 1e-12), label=term, linewidth=1.2)
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metric_bars(names: Sequence[str], psnr: Sequence[float],
                     ssim: Sequence[float], path) -> None:
    """Per-view PSNR and SSIM as paired bar charts."""
    path = Path(path)
    x = np.arange(len(names))
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(max(6, 0.35 * len(names)), 6), sharex=True)
    ax1.bar(x, psnr, color="#4878cf")
    ax1.set_ylabel("PSNR (dB)")
    ax1.grid(True, axis="y", alpha=0.3)
    ax2.bar(x, ssim, color="#6acc65")
    ax2.set_ylabel("SSIM")
    ax2.set_ylim(0, 1.05)
    ax2.set_xticks(x)
    ax2.set_xticklabels(names, rotation=90, fontsize=6)
    ax2.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_view_grid(rendered: Sequence[np.ndarray], target: Sequence[np.ndarray],
                   path, max_views: int = 6) -> None:
    """Side-by-side render/target strips for a handful of views."""
    path = Path(path)
    n = min(len(rendered), max_views)
    if n == 0:
        fig, ax = plt.subplots(figsize=(4, 2))
        ax.axis("off")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return
    fig, axes = plt.subplots(2, n, figsize=(2.0 * n, 4.2), squeeze=False)
    for i in range(n):
        axes[0][i].imshow(np.clip(rendered[i], 0, 1))
        axes[0][i].set_title(f"render {i}", fontsize=8)
        axes[1][i].imshow(np.clip(target[i], 0, 1))
        axes[1][i].set_title(f"target {i}", fontsize=8)
        for row in (0, 1):
            axes[row][i].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
