"""Differentiable convolution, pooling, and upsampling kernels.

One generic N-spatial-dimension implementation backs both ``conv2d`` and
``conv3d``. Forward and weight gradients route through BLAS either via an
im2col matrix (small activations) or a per-tap GEMM loop (large activations,
bounded memory); the input gradient of a stride-1 convolution is itself a
convolution with the spatially flipped, channel-transposed kernel.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import AutodiffError, Tensor, _make

# im2col buffers above this size fall back to the per-tap path.
_MAX_COL_BYTES = 256 * 2**20


def _spatial_params(value, nsp: int, name: str) -> tuple[int, ...]:
    if np.isscalar(value):
        out = (int(value),) * nsp
    else:
        out = tuple(int(v) for v in value)
    if len(out) != nsp:
        raise AutodiffError(f"{name} must have {nsp} components, got {value}")
    return out


def _conv_geometry(x_sp, k_sp, s_sp, p_sp):
    out = []
    for n, k, s, p in zip(x_sp, k_sp, s_sp, p_sp):
        span = n + 2 * p - k
        if span < 0 or span % s:
            raise AutodiffError(
                f"conv: size {n} with kernel {k}, stride {s}, padding {p} "
                "gives a non-integral output size"
            )
        out.append(span // s + 1)
    return tuple(out)


def _pad_spatial(x: np.ndarray, p_sp) -> np.ndarray:
    if not any(p_sp):
        return x
    pad = [(0, 0), (0, 0)] + [(p, p) for p in p_sp]
    return np.pad(x, pad)


def _tap_slices(tap, out_sp, s_sp):
    return tuple(
        slice(i, i + s * (n - 1) + 1, s) for i, n, s in zip(tap, out_sp, s_sp)
    )


def _im2col(xp: np.ndarray, k_sp, s_sp, out_sp) -> np.ndarray:
    n, cin = xp.shape[:2]
    nsp = len(k_sp)
    view = sliding_window_view(xp, k_sp, axis=tuple(range(2, 2 + nsp)))
    sub = view[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in s_sp)]
    # (N, Cin, *out_sp, *k_sp) -> (N, *out_sp, Cin, *k_sp) -> matrix
    order = (0,) + tuple(range(2, 2 + nsp)) + (1,) + tuple(range(2 + nsp, 2 + 2 * nsp))
    mat = sub.transpose(order).reshape(
        n * int(np.prod(out_sp)), cin * int(np.prod(k_sp))
    )
    return mat


def _use_im2col(xp_shape, k_sp, out_sp) -> bool:
    n, cin = xp_shape[:2]
    col_bytes = n * int(np.prod(out_sp)) * cin * int(np.prod(k_sp)) * 8
    return col_bytes <= _MAX_COL_BYTES


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, s_sp, p_sp) -> np.ndarray:
    nsp = x.ndim - 2
    k_sp = w.shape[2:]
    cout, cin = w.shape[:2]
    out_sp = _conv_geometry(x.shape[2:], k_sp, s_sp, p_sp)
    xp = _pad_spatial(x, p_sp)
    n = x.shape[0]

    if _use_im2col(xp.shape, k_sp, out_sp):
        col = _im2col(xp, k_sp, s_sp, out_sp)
        out = col @ w.reshape(cout, -1).T
        out = out.reshape((n,) + out_sp + (cout,))
        out = np.moveaxis(out, -1, 1)
        out = np.ascontiguousarray(out)
    else:
        out = np.zeros((n, cout) + out_sp)
        for tap in np.ndindex(*k_sp):
            xs = xp[(slice(None), slice(None)) + _tap_slices(tap, out_sp, s_sp)]
            # (Cout, Cin) x (N, Cin, *out) -> (Cout, N, *out)
            contrib = np.tensordot(w[(slice(None), slice(None)) + tap], xs, axes=([1], [1]))
            out += np.moveaxis(contrib, 0, 1)
    if b is not None:
        out += b.reshape((1, cout) + (1,) * nsp)
    return out


def _conv_grad_w(x: np.ndarray, g: np.ndarray, w_shape, s_sp, p_sp) -> np.ndarray:
    nsp = x.ndim - 2
    k_sp = w_shape[2:]
    cout = w_shape[0]
    out_sp = g.shape[2:]
    xp = _pad_spatial(x, p_sp)
    if _use_im2col(xp.shape, k_sp, out_sp):
        col = _im2col(xp, k_sp, s_sp, out_sp)
        g_mat = np.moveaxis(g, 1, -1).reshape(-1, cout)
        return (g_mat.T @ col).reshape(w_shape)
    gw = np.zeros(w_shape)
    contract = ([0] + list(range(2, 2 + nsp)), [0] + list(range(2, 2 + nsp)))
    for tap in np.ndindex(*k_sp):
        xs = xp[(slice(None), slice(None)) + _tap_slices(tap, out_sp, s_sp)]
        gw[(slice(None), slice(None)) + tap] = np.tensordot(g, xs, axes=contract)
    return gw


def _conv_grad_x(g: np.ndarray, w: np.ndarray, x_shape, s_sp, p_sp) -> np.ndarray:
    nsp = g.ndim - 2
    k_sp = w.shape[2:]
    out_sp = g.shape[2:]
    if all(s == 1 for s in s_sp):
        # Full correlation with the flipped, channel-transposed kernel.
        wt = np.ascontiguousarray(
            np.flip(w, axis=tuple(range(2, 2 + nsp))).swapaxes(0, 1)
        )
        inv_pad = tuple(k - 1 - p for k, p in zip(k_sp, p_sp))
        return _conv_forward(g, wt, None, (1,) * nsp, inv_pad)
    xp_shape = (x_shape[0], x_shape[1]) + tuple(
        n + 2 * p for n, p in zip(x_shape[2:], p_sp)
    )
    gx = np.zeros(xp_shape)
    for tap in np.ndindex(*k_sp):
        # (N, Cout, *out) x (Cout, Cin) -> (N, *out, Cin)
        contrib = np.tensordot(g, w[(slice(None), slice(None)) + tap], axes=([1], [0]))
        gx[(slice(None), slice(None)) + _tap_slices(tap, out_sp, s_sp)] += np.moveaxis(
            contrib, -1, 1
        )
    unpad = tuple(slice(p, p + n) for p, n in zip(p_sp, x_shape[2:]))
    return gx[(slice(None), slice(None)) + unpad]


def _conv(x: Tensor, w: Tensor, b: Tensor, stride, padding, nsp: int, name: str) -> Tensor:
    if x.ndim != nsp + 2:
        raise AutodiffError(f"{name}: input must be {nsp + 2}-D, got shape {x.shape}")
    if w.ndim != nsp + 2:
        raise AutodiffError(f"{name}: kernel must be {nsp + 2}-D, got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise AutodiffError(
            f"{name}: input channels {x.shape[1]} != kernel channels {w.shape[1]}"
        )
    if b is not None and (b.ndim != 1 or b.shape[0] != w.shape[0]):
        raise AutodiffError(f"{name}: bias shape {b.shape} != ({w.shape[0]},)")
    if any(k % 2 == 0 for k in w.shape[2:]):
        raise AutodiffError(f"{name}: kernel sizes must be odd, got {w.shape[2:]}")
    s_sp = _spatial_params(stride, nsp, "stride")
    p_sp = _spatial_params(padding, nsp, "padding")
    if any(s < 1 for s in s_sp) or any(p < 0 for p in p_sp):
        raise AutodiffError(f"{name}: bad stride {stride} or padding {padding}")

    x_data, w_data = x.data, w.data
    out = _conv_forward(x_data, w_data, None if b is None else b.data, s_sp, p_sp)
    x_shape = x_data.shape

    def grad_xw(g):
        gx = _conv_grad_x(g, w_data, x_shape, s_sp, p_sp) if x.requires_grad else None
        gw = _conv_grad_w(x_data, g, w_data.shape, s_sp, p_sp) if w.requires_grad else None
        return gx, gw

    if b is None:
        return _make(out, (x, w), grad_xw)

    def bwd(g):
        gx, gw = grad_xw(g)
        gb = g.sum(axis=(0,) + tuple(range(2, 2 + nsp))) if b.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, w, b), bwd)


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride=1, padding=0) -> Tensor:
    """3D cross-correlation of (N, Cin, D, H, W) with (Cout, Cin, k, k, k).

    Output size per axis must be integral: (n + 2p - k) divisible by the
    stride. Differentiable with respect to x, w, and b.
    """
    return _conv(x, w, b, stride, padding, 3, "conv3d")


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=1, padding=0) -> Tensor:
    """2D cross-correlation of (N, Cin, H, W) with (Cout, Cin, k, k)."""
    return _conv(x, w, b, stride, padding, 2, "conv2d")


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """k x k max pooling with stride k; trailing rows/columns that do not
    fill a window are dropped. Ties route the gradient to the first maximum.
    """
    if x.ndim != 4:
        raise AutodiffError(f"maxpool2d: input must be 4-D, got {x.shape}")
    k = int(k)
    n, c, h, w = x.shape
    h2, w2 = h // k, w // k
    if h2 < 1 or w2 < 1:
        raise AutodiffError(f"maxpool2d: input {h}x{w} smaller than window {k}")
    xc = x.data[:, :, : h2 * k, : w2 * k]
    windows = xc.reshape(n, c, h2, k, w2, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h2, w2, k * k
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    x_shape = x.shape

    def bwd(g):
        gwin = np.zeros((n, c, h2, w2, k * k))
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gc = gwin.reshape(n, c, h2, w2, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, h2 * k, w2 * k
        )
        gx = np.zeros(x_shape)
        gx[:, :, : h2 * k, : w2 * k] = gc
        return (gx,)

    return _make(out, (x,), bwd)


def avgpool3d(x: Tensor, k: int = 2) -> Tensor:
    """k^3 mean pooling with stride k; spatial dims must be divisible by k."""
    if x.ndim != 5:
        raise AutodiffError(f"avgpool3d: input must be 5-D, got {x.shape}")
    k = int(k)
    n, c, d, h, w = x.shape
    if d % k or h % k or w % k:
        raise AutodiffError(f"avgpool3d: dims {(d, h, w)} not divisible by {k}")
    d2, h2, w2 = d // k, h // k, w // k
    out = x.data.reshape(n, c, d2, k, h2, k, w2, k).mean(axis=(3, 5, 7))

    def bwd(g):
        ge = (g / k**3)[:, :, :, None, :, None, :, None]
        return (np.broadcast_to(ge, (n, c, d2, k, h2, k, w2, k)).reshape(n, c, d, h, w),)

    return _make(out, (x,), bwd)


def upsample_nearest3d(x: Tensor, factor: int) -> Tensor:
    """Replicate each voxel factor^3 times; the gradient sums over replicas."""
    if x.ndim != 5:
        raise AutodiffError(f"upsample_nearest3d: input must be 5-D, got {x.shape}")
    f = int(factor)
    if f < 1:
        raise AutodiffError(f"upsample_nearest3d: factor must be >= 1, got {factor}")
    if f == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    n, c, d, h, w = x.shape
    expanded = np.broadcast_to(
        x.data[:, :, :, None, :, None, :, None], (n, c, d, f, h, f, w, f)
    )
    out = expanded.reshape(n, c, d * f, h * f, w * f)

    def bwd(g):
        return (g.reshape(n, c, d, f, h, f, w, f).sum(axis=(3, 5, 7)),)

    return _make(np.ascontiguousarray(out), (x,), bwd)
