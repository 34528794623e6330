"""Matplotlib figure rendering for run reports.

Figures are written to files next to the delimited outputs of a run; no
interactive backend is ever required.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import ImageBuffer

__all__ = ["plot_flow_trace", "plot_palm_trace", "plot_labeling_panels"]


def plot_flow_trace(rows, path) -> None:
    """Potential and mean entropy of a flow trajectory against time."""
    t = [r.t for r in rows]
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.plot(t, [r.potential for r in rows], color="tab:blue", label="J")
    ax.set_xlabel("t")
    ax.set_ylabel("J", color="tab:blue")
    ax2 = ax.twinx()
    ax2.semilogy(
        t, [r.mean_entropy for r in rows], color="tab:orange", label="mean entropy"
    )
    ax2.set_ylabel("mean entropy [nats]", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_palm_trace(trace, path) -> None:
    """Surrogate objective, energy, and iterate movement of the outer loop."""
    rows = [r for r in trace if np.isfinite(r.max_row_change)]
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9.6, 3.6))
    ax.plot([r.k for r in trace], [r.surrogate_objective for r in trace], label="surrogate")
    ax.plot([r.k for r in trace], [r.e_alpha for r in trace], label="energy")
    ax.set_xlabel("outer iteration k")
    ax.legend()
    if rows:
        ax2.semilogy([r.k for r in rows], [r.max_row_change for r in rows])
    ax2.set_xlabel("outer iteration k")
    ax2.set_ylabel("max row change")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_labeling_panels(panels, path) -> None:
    """Images side by side; panels is a list of (title, ImageBuffer)."""
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.6))
    if len(panels) == 1:
        axes = [axes]
    for ax, (title, img) in zip(axes, panels):
        assert isinstance(img, ImageBuffer)
        ax.imshow(img.pixels.reshape(img.height, img.width, -1))
        ax.set_title(title)
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
