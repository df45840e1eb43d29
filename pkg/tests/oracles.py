"""Independent reference implementations used to verify the library.

Everything here is deliberately naive: direct summation one output bin at a
time, explicit loops over kernel taps, full-kernel window correlation. Slow
but obviously correct, and sharing no code paths with the package.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def naive_dft3(x: np.ndarray) -> np.ndarray:
    """Forward 3D DFT by the defining triple sum, one bin at a time."""
    x = np.asarray(x, dtype=np.complex128)
    d, h, w = x.shape
    nz = np.arange(d)[:, None, None]
    ny = np.arange(h)[None, :, None]
    nx = np.arange(w)[None, None, :]
    out = np.empty((d, h, w), dtype=np.complex128)
    for k in range(d):
        for l in range(h):
            for m in range(w):
                phase = k * nz / d + l * ny / h + m * nx / w
                out[k, l, m] = (x * np.exp(-2j * np.pi * phase)).sum()
    return out


def naive_idft3(x: np.ndarray) -> np.ndarray:
    """Inverse 3D DFT by the defining sum with 1/N scaling."""
    x = np.asarray(x, dtype=np.complex128)
    d, h, w = x.shape
    nz = np.arange(d)[:, None, None]
    ny = np.arange(h)[None, :, None]
    nx = np.arange(w)[None, None, :]
    out = np.empty((d, h, w), dtype=np.complex128)
    for k in range(d):
        for l in range(h):
            for m in range(w):
                phase = k * nz / d + l * ny / h + m * nx / w
                out[k, l, m] = (x * np.exp(2j * np.pi * phase)).sum()
    return out / (d * h * w)


def direct_conv(x: np.ndarray, w: np.ndarray, b, stride: int, padding: int) -> np.ndarray:
    """Cross-correlation by explicit loops; works for 2 or 3 spatial dims."""
    nsp = x.ndim - 2
    n, cin = x.shape[:2]
    cout = w.shape[0]
    k_sp = w.shape[2:]
    pad = [(0, 0), (0, 0)] + [(padding, padding)] * nsp
    xp = np.pad(np.asarray(x, dtype=np.float64), pad)
    out_sp = tuple(
        (xs + 2 * padding - ks) // stride + 1 for xs, ks in zip(x.shape[2:], k_sp)
    )
    out = np.zeros((n, cout) + out_sp)
    for ni in range(n):
        for co in range(cout):
            for pos in np.ndindex(*out_sp):
                acc = 0.0 if b is None else float(b[co])
                for ci in range(cin):
                    for tap in np.ndindex(*k_sp):
                        src = tuple(p * stride + t for p, t in zip(pos, tap))
                        acc += xp[(ni, ci) + src] * w[(co, ci) + tap]
                out[(ni, co) + pos] = acc
    return out


def fd_gradient(build_loss, array: np.ndarray, h: float = 1e-5, sample=None, rng=None):
    """Central-difference gradient of ``build_loss()`` w.r.t. entries of
    ``array`` (perturbed in place). Returns {flat_index: derivative} for the
    checked entries: all of them, or ``sample`` random ones.
    """
    flat = array.reshape(-1)
    if sample is None or sample >= flat.size:
        indices = range(flat.size)
    else:
        indices = sorted(rng.choice(flat.size, size=sample, replace=False))
    grads = {}
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(build_loss())
        flat[i] = orig - h
        fm = float(build_loss())
        flat[i] = orig
        grads[int(i)] = (fp - fm) / (2.0 * h)
    return grads


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def max_grad_rel_err(analytic: np.ndarray, numeric: dict, floor: float = 1e-6) -> float:
    flat = analytic.reshape(-1)
    return max(rel_err(float(flat[i]), g, floor) for i, g in numeric.items())


def direct_ssim3d(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    """SSIM with an explicit, non-separated 11^3 Gaussian window applied to
    valid positions only (no padding), averaged over those positions.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    t = np.arange(11, dtype=np.float64) - 5.0
    g1 = np.exp(-(t * t) / (2.0 * 1.5 * 1.5))
    g1 /= g1.sum()
    kernel = g1[:, None, None] * g1[None, :, None] * g1[None, None, :]
    kernel /= kernel.sum()

    def local_mean(x):
        win = sliding_window_view(x, (11, 11, 11))
        return np.tensordot(win, kernel, axes=([3, 4, 5], [0, 1, 2]))

    mu_a = local_mean(a)
    mu_b = local_mean(b)
    saa = local_mean(a * a) - mu_a * mu_a
    sbb = local_mean(b * b) - mu_b * mu_b
    sab = local_mean(a * b) - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def direct_psnr(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(data_range * data_range / mse)


def tile_starts(n: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def gaussian_tile_profile(window: int) -> np.ndarray:
    center = (window - 1) / 2.0
    sigma = window / 8.0
    t = np.arange(window, dtype=np.float64) - center
    return np.exp(-(t * t) / (2.0 * sigma * sigma))


def brute_force_sliding_window(
    lr_data: np.ndarray,
    forward_tile,
    scale: int,
    lr_win: int,
    overlap: float,
    blend: str,
) -> np.ndarray:
    """Per-voxel weighted average over all covering tiles, accumulated one
    output voxel at a time in plain Python.
    """
    stride = max(1, int(round(lr_win * (1.0 - overlap))))
    starts = [tile_starts(n, lr_win, stride) for n in lr_data.shape]
    hr_win = lr_win * scale
    if blend == "constant":
        prof = np.ones(hr_win)
    else:
        prof = gaussian_tile_profile(hr_win)
    hr_shape = tuple(n * scale for n in lr_data.shape)
    num = np.zeros(hr_shape)
    den = np.zeros(hr_shape)
    for z0 in starts[0]:
        for y0 in starts[1]:
            for x0 in starts[2]:
                tile = lr_data[z0 : z0 + lr_win, y0 : y0 + lr_win, x0 : x0 + lr_win]
                sr = forward_tile(tile)
                for lz in range(hr_win):
                    for ly in range(hr_win):
                        for lx in range(hr_win):
                            wgt = prof[lz] * prof[ly] * prof[lx]
                            gz = z0 * scale + lz
                            gy = y0 * scale + ly
                            gx = x0 * scale + lx
                            num[gz, gy, gx] += wgt * sr[lz, ly, lx]
                            den[gz, gy, gx] += wgt
    assert den.min() > 0
    return num / den


def perceptual_by_slices(sr: np.ndarray, hr: np.ndarray, fx, stride: int = 1) -> float:
    """Slice-at-a-time re-derivation of the three-view perceptual distance:
    every strided slice along each volume axis goes through the extractor
    alone; per-layer mean absolute feature differences are averaged over the
    slices of a view and summed over layers and views.
    """
    from volsr.models import extract_features_2d
    from volsr.nn import Tensor

    total = 0.0
    for axis in (2, 3, 4):
        sl = [slice(None)] * 5
        sl[axis] = slice(None, None, stride)
        a_view = np.moveaxis(sr[tuple(sl)], axis, 2)
        b_view = np.moveaxis(hr[tuple(sl)], axis, 2)
        n, c, m = a_view.shape[:3]
        layer_sums = None
        count = 0
        for i in range(n):
            for j in range(m):
                fa = extract_features_2d(Tensor(a_view[i : i + 1, :, j]), fx)
                fb = extract_features_2d(Tensor(b_view[i : i + 1, :, j]), fx)
                diffs = [float(np.mean(np.abs(x.data - y.data))) for x, y in zip(fa, fb)]
                layer_sums = diffs if layer_sums is None else [
                    s + d for s, d in zip(layer_sums, diffs)
                ]
                count += 1
        total += sum(s / count for s in layer_sums)
    return total


def adam_reference(param: np.ndarray, grads: list[np.ndarray], lr, beta1, beta2, eps):
    """Textbook bias-corrected Adam trajectory starting from zero moments."""
    p = param.astype(np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p
