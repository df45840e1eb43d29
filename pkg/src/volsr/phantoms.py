"""Synthetic volumes: smooth random blobs carrying band-limited texture.

The texture spectrum is confined to an annulus strictly below the x4
degradation cutoff, so a downsampled phantom still contains every frequency
needed to reconstruct it; what separates reconstruction methods is how
faithfully they restore that band.
"""

from __future__ import annotations

import numpy as np

from .volume import Volume


def make_phantom(
    shape: tuple[int, int, int] = (64, 64, 64),
    seed: int = 0,
    blob_count: int = 12,
    texture_strength: float = 0.35,
    band: tuple[float, float] = (2.5, 7.0),
) -> Volume:
    """One deterministic phantom: positive smooth blobs, plus noise texture
    band-limited to ``band`` (in integer frequency indices) and concentrated
    where the blobs are.
    """
    rng = np.random.default_rng(seed)
    d0, d1, d2 = shape
    grid = np.stack(
        np.meshgrid(
            np.arange(d0, dtype=np.float64),
            np.arange(d1, dtype=np.float64),
            np.arange(d2, dtype=np.float64),
            indexing="ij",
        )
    )
    blobs = np.zeros(shape)
    for _ in range(blob_count):
        center = rng.uniform(0.15, 0.85, size=3) * np.array(shape)
        sigma = rng.uniform(0.06, 0.16) * min(shape)
        amp = rng.uniform(0.5, 1.0)
        r2 = sum((grid[a] - center[a]) ** 2 for a in range(3))
        blobs += amp * np.exp(-r2 / (2.0 * sigma * sigma))
    peak = blobs.max()
    if peak > 0:
        blobs /= peak

    noise = rng.standard_normal(shape)
    freqs = [np.abs(np.fft.fftfreq(n) * n) for n in shape]
    radius = np.sqrt(
        freqs[0][:, None, None] ** 2 + freqs[1][None, :, None] ** 2 + freqs[2][None, None, :] ** 2
    )
    lo, hi = band
    mask = (radius >= lo) & (radius <= hi)
    texture = np.fft.ifftn(np.fft.fftn(noise) * mask).real
    spread = texture.std()
    if spread > 0:
        texture /= spread

    data = blobs * (1.0 + texture_strength * texture)
    return Volume(data - data.min(), spacing=(1.0, 1.0, 1.0))


def make_phantom_suite(
    count: int,
    shape: tuple[int, int, int] = (64, 64, 64),
    seed: int = 0,
    **kwargs,
) -> list[Volume]:
    """``count`` phantoms with consecutive per-phantom seeds."""
    return [make_phantom(shape, seed=seed + i, **kwargs) for i in range(count)]
