"""Heatmap figures for saliency templates."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from camf.data import AtlasParcellation  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    # fixed metadata keeps PNG bytes stable between reruns
    fig.savefig(path, dpi=100, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_fc_template(grid: np.ndarray, path, title="FC saliency template") -> Path:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(grid, cmap="hot", interpolation="nearest")
    ax.set_title(title)
    ax.set_xlabel("ROI")
    ax.set_ylabel("ROI")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def _mid_slices(vol: np.ndarray):
    cx, cy, cz = (s // 2 for s in vol.shape)
    return [("x", vol[cx, :, :].T), ("y", vol[:, cy, :].T), ("z", vol[:, :, cz].T)]


def plot_volume_template(vol: np.ndarray, path, title="sMRI saliency template") -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.6))
    vmax = float(vol.max()) or 1.0
    for ax, (axis, sl) in zip(axes, _mid_slices(vol)):
        im = ax.imshow(sl, cmap="hot", origin="lower", vmin=0, vmax=vmax, interpolation="nearest")
        ax.set_title(f"{axis}-axis mid slice")
        ax.axis("off")
    fig.suptitle(title)
    fig.colorbar(im, ax=list(axes), fraction=0.02)
    return _save(fig, path)


def region_map(vol: np.ndarray, atlas: AtlasParcellation) -> np.ndarray:
    """Replace each voxel by the mean activation of its region (background 0)."""
    labels = atlas.labels
    k = len(atlas.region_names)
    sums = np.bincount(labels.ravel(), weights=vol.ravel(), minlength=k + 1)
    counts = np.maximum(np.bincount(labels.ravel(), minlength=k + 1), 1)
    means = sums / counts
    means[0] = 0.0
    return means[labels]


def plot_region_template(vol: np.ndarray, atlas: AtlasParcellation, path) -> Path:
    return plot_volume_template(region_map(vol, atlas), path, title="Region-level saliency template")
