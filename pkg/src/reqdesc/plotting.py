"""PNG figures for benchmark curves and training losses (Agg backend, no display)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def plot_angle_curves(curves: dict[str, dict[float, float]], path, threshold: float = 5.0) -> Path:
    """One line per method: MMA at ``threshold`` against rotation angle."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        for name, per_angle in curves.items():
            angles = sorted(per_angle)
            ax.plot(angles, [per_angle[a] for a in angles], marker="o", ms=2.5, lw=1.2, label=name)
        ax.set_xlabel("rotation (degrees)")
        ax.set_ylabel(f"MMA@{threshold:g}px")
        ax.set_xlim(0, 350)
        ax.set_ylim(0, 1.02)
        ax.set_xticks(range(0, 360, 45))
        ax.legend(frameon=False, ncol=2)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_losses(total, orientation, descriptor, path) -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(8.0, 2.6))
        for ax, series, title in zip(axes, (total, orientation, descriptor),
                                     ("total", "orientation", "descriptor")):
            ax.plot(range(1, len(series) + 1), series, lw=0.8)
            ax.set_title(title)
            ax.set_xlabel("iteration")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
