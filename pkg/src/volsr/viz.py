"""File-based visual outputs: slice PNGs, loss curves, and metric figures.

Slice exports are exact 8-bit grayscale PNGs with a linear intensity map
over the post-clip range. Figures render through the Agg backend so every
entry point works headless; each function writes a file and returns its
path.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .volume import Axis, Volume, slice_image


def to_gray8(image: np.ndarray, clip: tuple[float, float] | None = None) -> np.ndarray:
    """Linear 8-bit mapping of a 2D image over the post-clip range.

    Without a clip range, the image's own min-max is used; a constant image
    maps to uniform mid-gray.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    if clip is not None:
        lo, hi = float(clip[0]), float(clip[1])
        if lo >= hi:
            raise ValueError(f"clip range must satisfy lo < hi, got ({lo}, {hi})")
        img = np.clip(img, lo, hi)
    else:
        lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        norm = (img - lo) / (hi - lo)
        return np.clip(np.rint(norm * 255.0), 0, 255).astype(np.uint8)
    return np.full(img.shape, 128, dtype=np.uint8)


def save_slice_png(image: np.ndarray, path, clip: tuple[float, float] | None = None) -> Path:
    """Write one 2D slice as an 8-bit grayscale PNG."""
    path = Path(path)
    Image.fromarray(to_gray8(image, clip), mode="L").save(path)
    return path


def save_slice_panel(
    v: Volume,
    path,
    indices: tuple[int, int, int] | None = None,
    clip: tuple[float, float] | None = None,
    title: str | None = None,
) -> Path:
    """Figure with the three orthogonal views side by side."""
    path = Path(path)
    if indices is None:
        indices = tuple(n // 2 for n in v.data.shape)
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.8))
    for ax, axis, idx in zip(axes, (Axis.AXIAL, Axis.CORONAL, Axis.SAGITTAL), indices):
        img = to_gray8(slice_image(v, axis, idx), clip)
        ax.imshow(img, cmap="gray", vmin=0, vmax=255)
        ax.set_title(f"{axis.name.lower()} [{idx}]")
        ax.set_axis_off()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_loss_curves(log_rows: list[dict], path, title: str = "training losses") -> Path:
    """Per-step loss curves from training-log rows (dicts keyed like the
    log CSV header).
    """
    path = Path(path)
    if not log_rows:
        raise ValueError("no log rows to plot")
    steps = [float(r["step"]) for r in log_rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    for key in ("pixel", "perc", "gen_total"):
        ax1.plot(steps, [float(r[key]) for r in log_rows], label=key)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.set_title("generator terms")
    ax1.legend()
    for key in ("adv", "disc"):
        ax2.plot(steps, [float(r[key]) for r in log_rows], label=key)
    ax2.set_xlabel("step")
    ax2.set_ylabel("loss")
    ax2.set_title("adversarial terms")
    ax2.legend()
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_metrics_figure(rows: list[dict], path, title: str = "evaluation metrics") -> Path:
    """Grouped per-volume SSIM and PSNR bars by method, from evaluation
    rows (dicts keyed like the evaluation CSV header).
    """
    path = Path(path)
    if not rows:
        raise ValueError("no evaluation rows to plot")
    volumes = sorted({r["volume_id"] for r in rows})
    methods = sorted({r["method"] for r in rows})
    x = np.arange(len(volumes), dtype=np.float64)
    width = 0.8 / max(len(methods), 1)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(12, 4.2))
    for ax, metric in ((ax1, "ssim"), (ax2, "psnr")):
        for m, method in enumerate(methods):
            by_vol = {r["volume_id"]: float(r[metric]) for r in rows if r["method"] == method}
            vals = [by_vol.get(vid, np.nan) for vid in volumes]
            finite = [v if np.isfinite(v) else np.nan for v in vals]
            ax.bar(x + (m - (len(methods) - 1) / 2) * width, finite, width, label=method)
        ax.set_xticks(x)
        ax.set_xticklabels(volumes, rotation=45, ha="right", fontsize=8)
        ax.set_ylabel(metric)
        ax.legend()
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
