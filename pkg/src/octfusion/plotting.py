"""Figure rendering for run reports (files only, non-interactive backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_KEYS = ("l_recon", "l_cross_relation", "l_consistency", "l_total")


def plot_loss_curves(rows, path) -> Path:
    """Per-step loss components on a log scale."""
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [int(r["step"]) for r in rows]
    for key in LOSS_KEYS:
        vals = np.array([float(r[key]) for r in rows])
        ax.plot(steps, np.clip(vals, 1e-12, None), label=key, lw=1.2 if key == "l_total" else 0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_subset_summary(summary, path) -> Path:
    """Mean AUROC per training-subset size with 95% CI error bars."""
    rows = sorted(summary, key=lambda r: int(r["size"]))
    sizes = [int(r["size"]) for r in rows]
    mean = np.array([float(r["mean"]) for r in rows])
    lo = np.array([float(r["ci_low"]) for r in rows])
    hi = np.array([float(r["ci_high"]) for r in rows])
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(sizes, mean, yerr=np.vstack([mean - lo, hi - mean]), fmt="o-", capsize=4)
    ax.set_xlabel("training samples")
    ax.set_ylabel("test AUROC")
    ax.set_xticks(sizes)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_fairness(rows, path) -> Path:
    """Heatmap of protected/privileged ratios (attribute x metric); undefined cells blank."""
    attrs = list(dict.fromkeys(r["attribute"] for r in rows))
    metrics = list(dict.fromkeys(r["metric"] for r in rows))
    grid = np.full((len(attrs), len(metrics)), np.nan)
    for r in rows:
        try:
            grid[attrs.index(r["attribute"]), metrics.index(r["metric"])] = float(r["ratio"])
        except (TypeError, ValueError):
            pass
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * len(metrics), 1.2 + 0.6 * len(attrs)))
    # zero ratios saturate the colour scale instead of producing -inf
    shade = np.log2(np.where(grid > 0, grid, 2.0**-1), where=~np.isnan(grid), out=np.full_like(grid, np.nan))
    im = ax.imshow(shade, cmap="coolwarm", vmin=-1, vmax=1)
    ax.set_xticks(range(len(metrics)), metrics, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(attrs)), attrs, fontsize=8)
    for i in range(len(attrs)):
        for j in range(len(metrics)):
            text = "n/a" if np.isnan(grid[i, j]) else f"{grid[i, j]:.2f}"
            ax.text(j, i, text, ha="center", va="center", fontsize=7)
    fig.colorbar(im, ax=ax, label="log2 ratio")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
