"""Figure helpers for run reports (Agg backend, fixed sizes and styles)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 100,
    "figure.dpi": 100,
    "svg.hashsalt": "scorecomp",
}


def figsize(scale=1.0):
    width = 6.0 * scale
    return width, width * (math.sqrt(5.0) - 1.0) / 2.0


def close(fig):
    plt.close(fig)


def trace_figure(steps, trace, names, title="Mean gated weight per step"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        for i, name in enumerate(names):
            ax.plot(steps, trace[:, i], label=name, lw=1.2)
        ax.invert_xaxis()
        ax.set_xlabel("denoising step t")
        ax.set_ylabel("mean weight")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(title)
        ax.legend(loc="best", frameon=False)
        fig.tight_layout()
    return fig


def bar_figure(labels, values, ylabel, title):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        x = np.arange(len(labels))
        ax.bar(x, values, color="0.35")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        fig.tight_layout()
    return fig


def heatmap_figure(matrix, row_labels, col_labels, title, vmin=0.0, vmax=1.0):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.8))
        im = ax.imshow(matrix, vmin=vmin, vmax=vmax, cmap="viridis")
        ax.set_xticks(range(len(col_labels)))
        ax.set_xticklabels(col_labels)
        ax.set_yticks(range(len(row_labels)))
        ax.set_yticklabels(row_labels)
        for (i, j), v in np.ndenumerate(matrix):
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", color="w", fontsize=8)
        ax.set_xlabel("condition")
        ax.set_ylabel("adapter")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
    return fig
