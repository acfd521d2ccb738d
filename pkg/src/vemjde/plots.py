"""Figure rendering for the evaluate/bench report paths.

Every function writes one PNG next to the CSV it illustrates. Uses the
Agg backend so the CLI works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def save_roc(path, curves: dict):
    """curves: label -> RocCurve."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for label, curve in curves.items():
        ax.plot(curve.fpr, curve.tpr, label=f"{label} (AUC {curve.auc:.3f})")
    ax.plot([0, 1], [0, 1], "k:", lw=0.8)
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("sensitivity")
    ax.legend(loc="lower right", fontsize=8)
    _save(fig, path)


def save_hrf(path, dt, estimate, truth=None):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    t = np.arange(len(estimate)) * dt
    ax.plot(t, estimate, label="estimate")
    if truth is not None:
        ax.plot(np.arange(len(truth)) * dt, truth, "k--", label="ground truth")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("amplitude")
    ax.legend(fontsize=8)
    _save(fig, path)


def save_ppm(path, probs, coords):
    """Heatmap of per-voxel activation probabilities on their 2D slice."""
    coords = np.asarray(coords)
    nx = coords[:, 0].max() + 1
    ny = coords[:, 1].max() + 1
    grid = np.full((nx, ny), np.nan)
    grid[coords[:, 0], coords[:, 1]] = probs
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(grid, origin="lower", vmin=0, vmax=1, cmap="viridis")
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_xticks([])
    ax.set_yticks([])
    _save(fig, path)


def save_convergence(path, trace):
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    it = np.arange(1, len(trace) + 1)
    axes[0].semilogy(it, [max(s.c_h, 1e-300) for s in trace], label="$c_H$")
    axes[0].semilogy(it, [max(s.c_a, 1e-300) for s in trace], label="$c_A$")
    axes[0].set_xlabel("iteration")
    axes[0].legend(fontsize=8)
    axes[1].plot(it, [s.free_energy for s in trace])
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("free energy")
    _save(fig, path)


def save_bench(path, rows):
    """rows: (dimension, value, seconds_per_iteration) tuples."""
    dims = sorted({r[0] for r in rows})
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for dim in dims:
        pts = sorted((r[1], r[2]) for r in rows if r[0] == dim)
        ax.loglog([p[0] for p in pts], [p[1] for p in pts], "o-", label=dim)
    ax.set_xlabel("dimension value")
    ax.set_ylabel("seconds / iteration")
    ax.legend(fontsize=8)
    _save(fig, path)
