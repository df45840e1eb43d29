"""3D Fourier transforms and the k-space degradation that builds LR/HR pairs.

Degradation runs five steps: forward 3D FFT, centered low-frequency crop by
the upscaling factor, zero-padding back to the original dimensions, inverse
3D FFT, and nearest-neighbor downsampling to the low-resolution grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .volume import Volume, VolumeError, nearest_source_indices


class SpectralError(ValueError):
    """Invalid shape or scale for a spectral operation."""


class ConjugateSymmetryWarning(UserWarning):
    """Inverse transform discarded a non-negligible imaginary component."""


@dataclass(frozen=True)
class Spectrum3D:
    """Unnormalized forward DFT of a volume, DC term at index (0, 0, 0)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.complex128)
        if arr.ndim != 3:
            raise SpectralError(f"spectrum must be 3-D, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


def dft3_forward(v: Volume) -> Spectrum3D:
    """Unnormalized forward 3D DFT; the DC bin equals the sum of all voxels."""
    return Spectrum3D(np.fft.fftn(v.data.astype(np.float64)), v.spacing)


def dft3_inverse(s: Spectrum3D) -> Volume:
    """Inverse 3D DFT with 1/(D*H*W) scaling; returns the real part.

    Warns with :class:`ConjugateSymmetryWarning` when the discarded
    imaginary residue exceeds 1e-3 of the real peak, which indicates the
    spectrum was not conjugate-symmetric.
    """
    full = np.fft.ifftn(s.data)
    re = full.real
    residue = float(np.abs(full.imag).max())
    peak = float(np.abs(re).max())
    if residue > 1e-3 * max(peak, np.finfo(np.float64).tiny):
        warnings.warn(
            f"imaginary residue {residue:.3e} exceeds 1e-3 of real peak {peak:.3e}",
            ConjugateSymmetryWarning,
            stacklevel=2,
        )
    return Volume(re, s.spacing)


def lowpass_mask(shape: tuple[int, int, int], scale: int) -> np.ndarray:
    """Boolean mask of retained bins for a centered crop by ``scale``.

    Per axis of length N the retained integer frequencies satisfy
    |f| < N / (2 * scale); the boundary (Nyquist) row of the crop window is
    excluded so a real input stays real through the inverse transform.
    """
    axes = []
    for n in shape:
        freqs = np.fft.fftfreq(n, d=1.0 / n).round().astype(np.int64)
        axes.append(np.abs(freqs) < n / (2 * scale))
    return axes[0][:, None, None] & axes[1][None, :, None] & axes[2][None, None, :]


def kspace_degrade(v: Volume, scale: int) -> Volume:
    """Produce the low-resolution counterpart of ``v`` at ``1/scale`` per axis.

    Pipeline: forward FFT -> retain the centered (D/scale, H/scale, W/scale)
    low-frequency block with its boundary Nyquist rows zeroed -> zero-pad to
    the original shape -> inverse FFT -> nearest-neighbor downsample by
    1/scale. The crop and zero-pad are applied jointly as a frequency mask,
    which is the same linear map. Output spacing is ``spacing * scale``;
    mean intensity is preserved because only the DC bin aliases onto DC.

    ``scale == 1`` is a no-op (full-band crop). Requires every shape
    component divisible by ``2 * scale``.
    """
    scale = int(scale)
    if scale < 1:
        raise SpectralError(f"scale must be a positive integer, got {scale}")
    if scale == 1:
        return v
    if any(n % (2 * scale) for n in v.shape):
        raise SpectralError(
            f"shape {v.shape} must be divisible by 2*scale={2 * scale} on every axis"
        )
    spec = np.fft.fftn(v.data.astype(np.float64))
    spec[~lowpass_mask(v.shape, scale)] = 0.0
    smooth = np.fft.ifftn(spec)
    residue = float(np.abs(smooth.imag).max())
    peak = float(np.abs(smooth.real).max())
    if residue > 1e-4 * max(peak, np.finfo(np.float64).tiny):
        raise SpectralError(f"degradation produced a complex volume (residue {residue:.3e})")
    smooth = smooth.real

    idx = [nearest_source_indices(n, n // scale) for n in v.shape]
    data = smooth[np.ix_(*idx)]
    spacing = tuple(s * scale for s in v.spacing)
    return Volume(data, spacing, v.intensity_meta)
