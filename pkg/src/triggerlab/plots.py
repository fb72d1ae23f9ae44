"""SVG figures: clean/poisoned channel overlays, per-input trigger traces,
and the three-panel activation-cluster scatter."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def overlay_panels(clean: np.ndarray, poisoned: np.ndarray, path,
                   n_windows: int = 4, channel: int = 0):
    """One panel per window: the clean channel trace overlaid with its
    poisoned counterpart."""
    n = min(n_windows, len(clean))
    fig, axes = plt.subplots(2, n, figsize=(3 * n, 4.5), sharex=True)
    axes = np.atleast_2d(axes)
    for i in range(n):
        c = clean[i][..., channel] if clean[i].ndim == 2 else clean[i][-1][..., channel]
        p = poisoned[i][..., channel] if poisoned[i].ndim == 2 else poisoned[i][-1][..., channel]
        axes[0, i].plot(c, lw=0.9, color="tab:blue")
        axes[0, i].set_title(f"window {i} clean", fontsize=8)
        axes[1, i].plot(p, lw=0.9, color="tab:red")
        axes[1, i].set_title(f"window {i} poisoned", fontsize=8)
    for ax in axes.ravel():
        ax.tick_params(labelsize=7)
    fig.suptitle(f"channel {channel}: clean vs poisoned", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def delta_traces(deltas: np.ndarray, path, n_windows: int = 6, channel: int = 0):
    """Per-input triggers drawn on one axis to show they differ by input."""
    n = min(n_windows, len(deltas))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i in range(n):
        d = deltas[i][..., channel] if deltas[i].ndim == 2 else deltas[i][-1][..., channel]
        ax.plot(d, lw=0.9, label=f"input {i}")
    ax.set_xlabel("time step")
    ax.set_ylabel("trigger value")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cluster_panels(embedding: np.ndarray, provenance: np.ndarray,
                   assignments: np.ndarray, path):
    """Combined scatter plus one panel per cluster, colored by provenance."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 4), sharex=True, sharey=True)
    colors = np.where(provenance == "poisoned", "dimgray", "tab:green")
    axes[0].scatter(embedding[:, 0], embedding[:, 1], c=colors, s=12, alpha=0.8)
    axes[0].set_title("combined", fontsize=9)
    for c in (0, 1):
        m = assignments == c
        axes[c + 1].scatter(embedding[m, 0], embedding[m, 1], c=colors[m], s=12, alpha=0.8)
        axes[c + 1].set_title(f"cluster {c + 1}", fontsize=9)
    handles = [plt.Line2D([], [], marker="o", ls="", color="tab:green", label="clean"),
               plt.Line2D([], [], marker="o", ls="", color="dimgray", label="poisoned")]
    axes[0].legend(handles=handles, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
