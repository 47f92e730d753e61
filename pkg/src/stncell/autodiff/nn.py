"""Neural-network primitives on :class:`~stncell.autodiff.tensor.Tensor`.

Image tensors are ``[C, H, W]`` or batched ``[N, C, H, W]``; a 3-d input
yields a 3-d output.  Convolution is cross-correlation (no kernel flip)
implemented with an im2col matrix product, which keeps the reduction order
fixed and therefore the results bit-reproducible.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError
from .branches import note_branch
from .tensor import Tensor, lift


def _batched(x: Tensor):
    if x.ndim == 3:
        return x.values[None], True
    if x.ndim == 4:
        return x.values, False
    raise DimensionError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: str = "same", stride: int = 1) -> Tensor:
    """2-d cross-correlation plus per-channel bias.

    ``padding="same"`` zero-pads by ``k // 2`` so a stride-1 convolution
    keeps the spatial size; ``"valid"`` does not pad.
    """
    x, kernels, bias = lift(x), lift(kernels), lift(bias)
    xv, squeeze = _batched(x)
    kv, bv = kernels.values, bias.values
    if kv.ndim != 4:
        raise DimensionError(f"kernels must be [C_out,C_in,kH,kW], got {kv.shape}")
    n, c, h, w = xv.shape
    c_out, c_in, kh, kw = kv.shape
    if c_in != c:
        raise DimensionError(f"channel axis: input has {c}, kernels expect {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"kernel axes (kH,kW)=({kh},{kw}) must be odd")
    if bv.shape != (c_out,):
        raise DimensionError(f"bias must have shape ({c_out},), got {bv.shape}")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise DimensionError(f"spatial axes ({h},{w}) smaller than kernel ({kh},{kw})")

    if kh == 1 and kw == 1 and stride == 1:
        return _pointwise_conv(x, kernels, bias, xv, squeeze)

    xp = np.pad(xv, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xv
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    # Columns are laid out [C*kH*kW, N*H'*W'] so both the gather here and the
    # scatter in backward walk contiguous image rows.
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    wmat = kv.reshape(c_out, -1)
    out = wmat @ cols
    out += bv[:, None]
    out = np.ascontiguousarray(out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3))
    hp, wp = xp.shape[2], xp.shape[3]

    def backward(g):
        if squeeze:
            g = g[None]
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        d_kernels = (g2 @ cols.T).reshape(kv.shape)
        d_bias = g2.sum(axis=1)
        if not x.requires_grad:
            return (None, d_kernels, d_bias)
        dcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
        dxp = np.zeros((c, n, hp, wp), dtype=dcols.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
        dx = dxp[:, :, ph : ph + h, pw : pw + w].transpose(1, 0, 2, 3)
        if squeeze:
            dx = dx[0]
        return (dx, d_kernels, d_bias)

    return Tensor(out[0] if squeeze else out, parents=(x, kernels, bias), backward_fn=backward, op="conv2d")


def _pointwise_conv(x: Tensor, kernels: Tensor, bias: Tensor, xv: np.ndarray, squeeze: bool) -> Tensor:
    """1x1 convolution as a batched matrix product over flattened pixels."""
    n, c, h, w = xv.shape
    wmat = kernels.values.reshape(kernels.shape[0], c)
    x3 = xv.reshape(n, c, h * w)
    out = np.matmul(wmat, x3)
    out += bias.values[:, None]
    out = out.reshape(n, -1, h, w)

    def backward(g):
        g3 = (g[None] if squeeze else g).reshape(n, -1, h * w)
        d_kernels = np.einsum("nop,ncp->oc", g3, x3).reshape(kernels.shape)
        d_bias = g3.sum(axis=(0, 2))
        if not x.requires_grad:
            return (None, d_kernels, d_bias)
        dx = np.matmul(wmat.T, g3).reshape(n, c, h, w)
        return (dx[0] if squeeze else dx, d_kernels, d_bias)

    return Tensor(out[0] if squeeze else out, parents=(x, kernels, bias), backward_fn=backward, op="conv2d")


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2, padding: str = "valid") -> Tensor:
    """Max pooling; gradient goes to the first maximal element in row-major order."""
    x = lift(x)
    xv, squeeze = _batched(x)
    n, c, h, w = xv.shape
    if padding == "valid":
        p = 0
        if window == stride and (h % window or w % window):
            raise DimensionError(f"spatial axes (H,W)=({h},{w}) must be divisible by {window}")
    elif padding == "same":
        p = window // 2
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(xv, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else xv
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = (hp - window) // stride + 1, (wp - window) // stride + 1
    # One strided view per window offset, in row-major order; the running
    # maximum only moves on a strict increase, so ties keep the first element.
    offsets = [(i, j) for i in range(window) for j in range(window)]
    views = [xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] for i, j in offsets]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def selection():
        first = np.full(out.shape, len(views), dtype=np.int64)
        for k in range(len(views) - 1, -1, -1):
            first[views[k] == out] = k
        return (first,)

    note_branch(selection)

    def backward(g):
        if squeeze:
            g = g[None]
        dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), v in zip(offsets, views):
            hit = v == out
            hit &= ~taken
            taken |= hit
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += g * hit
        dx = dxp[:, :, p : p + h, p : p + w]
        return (dx[0] if squeeze else dx,)

    return Tensor(out[0] if squeeze else out, parents=(x,), backward_fn=backward, op="maxpool2d")


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine layer ``weights @ x + bias`` over the last axis of ``x``."""
    x, weights, bias = lift(x), lift(weights), lift(bias)
    xv, wv, bv = x.values, weights.values, bias.values
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[1] or bv.shape != (wv.shape[0],):
        raise DimensionError(
            f"dense: input {xv.shape}, weights {wv.shape}, bias {bv.shape} do not conform"
        )
    out = xv @ wv.T + bv

    def backward(g):
        g2 = g.reshape(-1, wv.shape[0])
        x2 = xv.reshape(-1, wv.shape[1])
        dx = g @ wv if x.requires_grad else None
        dw = g2.T @ x2 if weights.requires_grad else None
        return (dx, dw, g2.sum(axis=0))

    return Tensor(out, parents=(x, weights, bias), backward_fn=backward, op="dense")


def relu(x: Tensor) -> Tensor:
    x = lift(x)
    mask = x.values > 0
    note_branch(lambda: (mask,))
    return Tensor(x.values * mask, parents=(x,), backward_fn=lambda g: (g * mask,), op="relu")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row maximum for stability."""
    x = lift(x)
    z = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor(s, parents=(x,), backward_fn=backward, op="softmax")


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading batch axis (or everything for a 3-d input)."""
    if x.ndim == 3:
        return x.reshape(-1)
    return x.reshape(x.shape[0], -1)
