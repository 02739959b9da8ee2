"""Matplotlib rendering of experiment outputs to PNG files.

Figures accompany the CSV/PGM outputs; they are rendered headlessly and
saved with fixed dpi and no metadata so reruns produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_mosaic_png",
    "save_purity_png",
    "save_response_panel_png",
    "save_rate_curves_png",
    "save_slack_hist_png",
    "save_inpaint_png",
    "save_curve_png",
]

_DPI = 120


def _save(fig, path):
    fig.savefig(path, dpi=_DPI, metadata={"Software": None})
    plt.close(fig)


def save_mosaic_png(path, mosaic, title=None):
    h, w = mosaic.shape
    fig, ax = plt.subplots(figsize=(max(3, w / 40), max(3, h / 40)))
    ax.imshow(mosaic, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def save_purity_png(path, freq, active_ids, purities, threshold=0.05):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.bar(np.arange(len(freq)), freq, color="steelblue")
    ax1.axhline(threshold, color="crimson", ls="--", lw=1, label="active threshold")
    ax1.set_xlabel("pooled unit")
    ax1.set_ylabel("activation frequency")
    ax1.legend(frameon=False)
    if len(active_ids):
        ax2.bar([str(i) for i in active_ids], purities, color="darkorange")
    ax2.axhline(0.9, color="crimson", ls="--", lw=1)
    ax2.set_ylim(0, 1.05)
    ax2.set_xlabel("active unit")
    ax2.set_ylabel("orientation purity")
    fig.tight_layout()
    _save(fig, path)


def save_response_panel_png(path, maps, title=None):
    """Blend the units' response maps into one (distance x orientation) panel.

    Each unit gets a hue; pixel intensity follows its response relative to
    its own peak, matching how the maps are read side by side.
    """
    if not maps:
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.set_axis_off()
        _save(fig, path)
        return
    nb, nt = maps[0].grid.shape
    rgb = np.zeros((nt, nb, 3))
    cmap = plt.get_cmap("hsv")
    for idx, m in enumerate(maps):
        grid = np.nan_to_num(m.grid)
        peak = grid.max()
        if peak <= 0:
            continue
        color = np.asarray(cmap(idx / max(len(maps), 1))[:3])
        rgb += (grid / peak).T[:, :, None] * color[None, None, :]
    rgb = np.clip(rgb, 0.0, 1.0)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.imshow(
        rgb,
        origin="lower",
        aspect="auto",
        extent=(maps[0].b_samples[0], maps[0].b_samples[-1],
                maps[0].theta_samples[0], maps[0].theta_samples[-1]),
        interpolation="nearest",
    )
    ax.set_xlabel("edge distance from center (px)")
    ax.set_ylabel("edge orientation (rad)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def save_rate_curves_png(path, gap_curves, bound, label):
    """Energy-gap trajectories against the worst-case bound (log-log)."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for gaps in gap_curves:
        ks = np.arange(1, len(gaps) + 1)
        ax.loglog(ks, np.maximum(gaps, 1e-300), color="steelblue", alpha=0.25, lw=0.8)
    ks = np.arange(1, max(len(g) for g in gap_curves) + 1)
    ax.loglog(ks, bound(ks), color="crimson", lw=2, label=label)
    ax.set_xlabel("sweep k")
    ax.set_ylabel("energy gap")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def save_slack_hist_png(path, slacks, title=None):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(slacks, bins=40, color="seagreen")
    ax.axvline(0.0, color="crimson", ls="--", lw=1)
    ax.set_xlabel("descent inequality slack")
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def save_inpaint_png(path, originals, masks, recon_a, recon_b, labels=("one layer", "two layer")):
    """A few example patches: original, observed pixels, both reconstructions."""
    n = len(originals)
    fig, axes = plt.subplots(n, 4, figsize=(8, 2 * n), squeeze=False)
    for i in range(n):
        size = int(round(np.sqrt(originals[i].size)))
        shown = originals[i].reshape(size, size)
        masked = np.where(masks[i], originals[i], np.nan).reshape(size, size)
        panels = [shown, masked, recon_a[i].reshape(size, size), recon_b[i].reshape(size, size)]
        titles = ["original", "observed", labels[0], labels[1]]
        vmax = max(abs(shown.min()), abs(shown.max())) or 1.0
        for j, (panel, ttl) in enumerate(zip(panels, titles)):
            ax = axes[i][j]
            ax.imshow(panel, cmap="gray", vmin=-vmax, vmax=vmax, interpolation="nearest")
            ax.set_axis_off()
            if i == 0:
                ax.set_title(ttl, fontsize=9)
    fig.tight_layout()
    _save(fig, path)


def save_curve_png(path, values, xlabel, ylabel):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(len(values)), values, marker="o", color="steelblue")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save(fig, path)
