"""Report figures: posterior bands per derivative order and the inferred
per-channel gains, rendered to PNG files next to the CSV artifacts."""
from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .inference import PosteriorSummary
from .model import ProfileSet

__all__ = ["plot_posterior_bands", "plot_calibration_factors"]

_ORDER_LABEL = {0: "f(x)", 1: "f'(x)", 2: "f''(x)"}


def plot_posterior_bands(summary: PosteriorSummary, ps: ProfileSet, order: int,
                         path, show_data: bool = True) -> Path:
    """Median curve and 95% band per profile; for order 0 the observations
    are overlaid (masked-out points in green, matching their outlier role)."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    cmap = plt.get_cmap("tab10")
    for j, pid in enumerate(ps.profile_ids):
        color = cmap(j % 10)
        ax.fill_between(summary.grid, summary.lower95[order][j],
                        summary.upper95[order][j], alpha=0.25, color=color, lw=0)
        ax.plot(summary.grid, summary.median[order][j], color=color, lw=1.2, label=pid)
        if order == 0 and show_data:
            used = ps.mask[:, j]
            ax.plot(ps.positions[used], ps.data[used, j], ".", ms=5, color=color)
            if (~used).any():
                ax.plot(ps.positions[~used], ps.data[~used, j], "x", ms=6,
                        color="green", mew=1.5)
    ax.set_xlabel("position")
    ax.set_ylabel(_ORDER_LABEL.get(order, f"order {order}"))
    ax.set_title(f"Posterior median and 95% band, derivative order {order}")
    if len(ps.profile_ids) <= 10:
        ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_calibration_factors(channel_ids, positions, a_median, a_lower, a_upper,
                             path) -> Path:
    path = Path(path)
    positions = np.asarray(positions, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    yerr = np.vstack([a_median - a_lower, a_upper - a_median])
    ax.errorbar(positions, a_median, yerr=yerr, fmt="o", ms=4, capsize=3, lw=1)
    ax.axhline(1.0, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("position")
    ax.set_ylabel("gain a_i")
    ax.set_title("Inferred calibration factors (median, 95% interval)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
