"""Dense 3D scalar volumes: container type, VBIN file I/O, normalization,
and classical nearest/trilinear resampling baselines.

Array layout is ``(D, H, W)`` indexed ``(z, y, x)`` with ``x`` fastest.
Anatomical views map to array axes as axial=z, coronal=y, sagittal=x.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

VBIN_MAGIC = b"VSRVBIN\x00"


class VolumeError(ValueError):
    """Invalid volume data or invalid operation arguments."""


class VbinFormatError(VolumeError):
    """Base class for malformed VBIN files."""


class VbinHeaderError(VbinFormatError):
    """VBIN magic or JSON header is malformed."""


class VbinPayloadError(VbinFormatError):
    """VBIN payload size disagrees with the header shape."""


class Axis(Enum):
    """Anatomical viewing axes, mapped to array axes of ``(D, H, W)`` data.

    AXIAL slices fix z (axis 0) and image the (y, x) plane; CORONAL fixes y
    (axis 1) imaging (z, x); SAGITTAL fixes x (axis 2) imaging (z, y).
    """

    AXIAL = 0
    CORONAL = 1
    SAGITTAL = 2


@dataclass(frozen=True)
class Volume:
    """An immutable dense 3D grid of 32-bit float voxels.

    Attributes:
        data: float32 array of shape (D, H, W), all values finite. The array
            is marked read-only; all operations return new volumes.
        spacing: voxel edge lengths (sz, sy, sx), strictly positive. Units
            are whatever the source data uses (mm, um); the toolkit only
            rescales them.
        intensity_meta: (clip_lo, clip_hi) recorded by clipping
            normalization, or None if no clipping was applied.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_meta: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise VolumeError(f"volume data must be 3-D, got shape {arr.shape}")
        if arr.size == 0:
            raise VolumeError("volume has an empty axis")
        if not np.isfinite(arr).all():
            raise VolumeError("volume contains NaN or Inf")
        arr.setflags(write=False)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise VolumeError(f"spacing must be three positive values, got {self.spacing}")
        meta = self.intensity_meta
        if meta is not None:
            meta = (float(meta[0]), float(meta[1]))
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "intensity_meta", meta)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


def load_volume(path: str | Path) -> Volume:
    """Read a VBIN file.

    VBIN layout: 8-byte magic ``VSRVBIN\\0``, little-endian uint32 header
    length, UTF-8 JSON header ``{"shape": [D, H, W], "spacing": [sz, sy, sx],
    "clip": [lo, hi] | null}``, then D*H*W little-endian float32 voxels in
    z-major (x fastest) order.

    Raises:
        FileNotFoundError: missing file.
        VbinHeaderError: bad magic or malformed/incomplete header.
        VbinPayloadError: payload length disagrees with the header shape.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(VBIN_MAGIC) + 4 or blob[: len(VBIN_MAGIC)] != VBIN_MAGIC:
        raise VbinHeaderError(f"{path}: not a VBIN file (bad magic)")
    (hdr_len,) = struct.unpack_from("<I", blob, len(VBIN_MAGIC))
    hdr_start = len(VBIN_MAGIC) + 4
    if len(blob) < hdr_start + hdr_len:
        raise VbinHeaderError(f"{path}: truncated header")
    try:
        header = json.loads(blob[hdr_start : hdr_start + hdr_len].decode("utf-8"))
        shape = tuple(int(n) for n in header["shape"])
        spacing = tuple(float(s) for s in header["spacing"])
        clip = header.get("clip")
    except (ValueError, KeyError, TypeError) as exc:
        raise VbinHeaderError(f"{path}: malformed header ({exc})") from exc
    if len(shape) != 3 or any(n <= 0 for n in shape):
        raise VbinHeaderError(f"{path}: header shape {shape} is not a positive 3-D shape")
    payload = blob[hdr_start + hdr_len :]
    expected = shape[0] * shape[1] * shape[2] * 4
    if len(payload) != expected:
        raise VbinPayloadError(
            f"{path}: payload holds {len(payload)} bytes, header shape {shape} needs {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    meta = None if clip is None else (float(clip[0]), float(clip[1]))
    return Volume(data, spacing, meta)


def save_volume(v: Volume, path: str | Path) -> None:
    """Write ``v`` as a VBIN file readable by :func:`load_volume`.

    Round-trips are bitwise exact. Raises VolumeError on non-finite data
    and OSError on unwritable paths.
    """
    if not np.isfinite(v.data).all():
        raise VolumeError("refusing to save a volume with NaN or Inf")
    header = {
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "clip": None if v.intensity_meta is None else list(v.intensity_meta),
    }
    hdr = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(VBIN_MAGIC)
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        fh.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def normalize(v: Volume, clip: tuple[float, float] | None = None) -> Volume:
    """Map intensities into [0, 1].

    Plain mode (``clip=None``) is per-volume min-max: min -> 0, max -> 1.
    Clip mode clamps to ``[lo, hi]`` first, records the range in
    ``intensity_meta``, then min-max normalizes the clamped values.
    A constant volume maps to all zeros.
    """
    data = v.data.astype(np.float64)
    meta = v.intensity_meta
    if clip is not None:
        lo, hi = float(clip[0]), float(clip[1])
        if lo >= hi:
            raise VolumeError(f"clip range must satisfy lo < hi, got ({lo}, {hi})")
        data = np.clip(data, lo, hi)
        meta = (lo, hi)
    mn = float(data.min())
    mx = float(data.max())
    if mx > mn:
        data = (data - mn) / (mx - mn)
    else:
        data = np.zeros_like(data)
    return Volume(data, v.spacing, meta)


def _as_factors(factor) -> tuple[float, float, float]:
    if np.isscalar(factor):
        f = (float(factor),) * 3
    else:
        f = tuple(float(x) for x in factor)
    if len(f) != 3 or any(x <= 0 for x in f):
        raise VolumeError(f"resampling factor must be positive (per axis), got {factor}")
    return f  # type: ignore[return-value]


def _output_shape(shape: tuple[int, int, int], factors) -> tuple[int, ...]:
    out = tuple(int(np.floor(n * f + 0.5)) for n, f in zip(shape, factors))
    if any(n < 1 for n in out):
        raise VolumeError(f"factor {factors} empties an axis of shape {shape}")
    return out


def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    # Voxel-center alignment: output center o maps to input coordinate
    # (o + 0.5) * (n_in / n_out) - 0.5.
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5


def nearest_source_indices(n_in: int, n_out: int) -> np.ndarray:
    """Source index per output index for nearest-neighbor resampling.

    Exact halfway ties round toward the lower index.
    """
    coords = _source_coords(n_in, n_out)
    idx = np.ceil(coords - 0.5).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def _rescaled_spacing(v: Volume, out_shape) -> tuple[float, float, float]:
    # Realized per-axis ratio n_in/n_out; equals 1/factor whenever
    # n_in * factor is integral, and keeps the physical extent fixed.
    return tuple(s * n_in / n_out for s, n_in, n_out in zip(v.spacing, v.shape, out_shape))


def resample_nearest(v: Volume, factor) -> Volume:
    """Nearest-neighbor resampling by a positive per-axis factor.

    The output shape is ``round(shape * factor)`` per axis; each output
    voxel copies the input voxel whose center is nearest (ties toward the
    lower index); spacing is rescaled so physical extent is preserved.
    """
    factors = _as_factors(factor)
    out_shape = _output_shape(v.shape, factors)
    iz, iy, ix = (nearest_source_indices(n_in, n_out) for n_in, n_out in zip(v.shape, out_shape))
    data = v.data[np.ix_(iz, iy, ix)]
    return Volume(data, _rescaled_spacing(v, out_shape), v.intensity_meta)


def resample_trilinear(v: Volume, factor) -> Volume:
    """Trilinear resampling by a positive per-axis factor.

    Same grid convention as :func:`resample_nearest`; source coordinates are
    clamped to the volume boundary, so exact linear ramps are reproduced
    exactly in the interior and flatten at the edges.
    """
    factors = _as_factors(factor)
    out_shape = _output_shape(v.shape, factors)
    coords = [np.clip(_source_coords(n_in, n_out), 0.0, n_in - 1.0)
              for n_in, n_out in zip(v.shape, out_shape)]
    lo = [np.floor(c).astype(np.int64) for c in coords]
    hi = [np.minimum(l + 1, n - 1) for l, n in zip(lo, v.shape)]
    t = [c - l for c, l in zip(coords, lo)]

    data = v.data.astype(np.float64)
    out = np.zeros(out_shape, dtype=np.float64)
    for dz in (0, 1):
        wz = (t[0] if dz else 1.0 - t[0])[:, None, None]
        iz = hi[0] if dz else lo[0]
        for dy in (0, 1):
            wy = (t[1] if dy else 1.0 - t[1])[None, :, None]
            iy = hi[1] if dy else lo[1]
            for dx in (0, 1):
                wx = (t[2] if dx else 1.0 - t[2])[None, None, :]
                ix = hi[2] if dx else lo[2]
                out += wz * wy * wx * data[np.ix_(iz, iy, ix)]
    return Volume(out, _rescaled_spacing(v, out_shape), v.intensity_meta)


def slice_image(v: Volume, axis: Axis, index: int) -> np.ndarray:
    """Extract one 2D slice as a float32 array.

    Axial slices image (y, x), coronal (z, x), sagittal (z, y); row order
    follows the array axes.
    """
    n = v.shape[axis.value]
    if not 0 <= index < n:
        raise VolumeError(f"slice index {index} out of range for axis {axis.name} of size {n}")
    return np.take(v.data, index, axis=axis.value)
