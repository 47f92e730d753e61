"""Spatial-transformer geometry: ground-truth transforms, sampling grids,
differentiable bilinear sampling and scale extraction.

Normalized coordinates follow the pixel-center convention: ``-1`` and ``+1``
are the outer edges of the image and pixel ``j`` of an axis with ``n``
pixels sits at ``(2j + 1) / n - 1``.  With this convention a scale of
``d_c / d_i`` maps the ``d_c`` output pixels exactly onto ``d_c`` consecutive
source pixels and a translation of ``-2 * delta / d_i`` moves the sampling
window by exactly ``delta`` pixels.

A transform ``theta`` (shape ``[2, 3]``, or ``[N, 2, 3]`` for a batch) maps
output coordinates ``(x_t, y_t, 1)`` to source coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .autodiff import Tensor, lift, note_branch
from .errors import ContractError, DimensionError

# Sampling positions this close to a pixel center are snapped onto it so that
# the identity transform reproduces the input bit for bit.
SNAP_TOLERANCE = 1e-9


@dataclass(frozen=True)
class CropGeometry:
    """Patch side ``d_i``, cell box side ``d_c`` and the fixed sampling scale."""

    d_i: int = 128
    d_c: int = 64
    scale: float = 0.5

    def __post_init__(self):
        if not self.d_i > self.d_c > 0:
            raise ContractError(f"need d_i > d_c > 0, got d_i={self.d_i}, d_c={self.d_c}")
        if self.scale <= 0:
            raise ContractError("scale must be positive")

    @property
    def max_offset(self) -> int:
        return (self.d_i - self.d_c) // 2

    @property
    def context_size(self) -> int:
        """Side of the region needed to cut any offset patch around a cell."""
        return self.d_i + 2 * self.max_offset


def check_offsets(dx: int, dy: int, geom: CropGeometry) -> None:
    bound = geom.max_offset
    if abs(dx) > bound or abs(dy) > bound:
        raise ContractError(f"offset ({dx}, {dy}) leaves the cell outside the patch; bound is {bound}")


def make_ground_truth_theta(geom: CropGeometry, dx: float = 0, dy: float = 0) -> np.ndarray:
    """Similarity transform that re-centres a patch whose crop origin moved by ``(dx, dy)``."""
    check_offsets(dx, dy, geom)
    tx = -2.0 * dx / geom.d_i
    ty = -2.0 * dy / geom.d_i
    return np.array([[geom.scale, 0.0, tx], [0.0, geom.scale, ty]])


def ground_truth_thetas(geom: CropGeometry, offsets: np.ndarray) -> np.ndarray:
    """Batched :func:`make_ground_truth_theta` for ``offsets`` of shape ``[N, 2]``."""
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    if np.any(np.abs(offsets) > geom.max_offset):
        raise ContractError(f"offsets exceed the containment bound {geom.max_offset}")
    theta = np.zeros((len(offsets), 2, 3))
    theta[:, 0, 0] = theta[:, 1, 1] = geom.scale
    theta[:, :, 2] = -2.0 * offsets / geom.d_i
    return theta


def normalized_coords(n: int) -> np.ndarray:
    j = np.arange(n, dtype=np.float64)
    return (2.0 * j + 1.0 - n) / n


def affine_grid(theta, h_out: int, w_out: int) -> Tensor:
    """Source coordinates for every output pixel, shape ``[(N,) H_out, W_out, 2]``.

    The last axis holds ``(x, y)``.  Differentiable with respect to ``theta``.
    """
    theta = lift(theta)
    if theta.shape[-2:] != (2, 3):
        raise DimensionError(f"theta must end in (2, 3), got {theta.shape}")
    if h_out < 1 or w_out < 1:
        raise DimensionError(f"grid size must be positive, got ({h_out}, {w_out})")
    ys, xs = np.meshgrid(normalized_coords(h_out), normalized_coords(w_out), indexing="ij")
    base = np.stack([xs.ravel(), ys.ravel(), np.ones(h_out * w_out)], axis=1)  # [P, 3]
    tv = theta.values
    batched = tv.ndim == 3
    t3 = tv if batched else tv[None]
    out = np.einsum("pk,nik->npi", base, t3).reshape(len(t3), h_out, w_out, 2)

    def backward(g):
        g3 = g.reshape(len(t3), h_out * w_out, 2)
        d_theta = np.einsum("npi,pk->nik", g3, base)
        return (d_theta if batched else d_theta[0],)

    return Tensor(out if batched else out[0], parents=(theta,), backward_fn=backward, op="affine_grid")


def _pixel_coords(norm: np.ndarray, n: int) -> np.ndarray:
    pix = ((norm + 1.0) * n - 1.0) / 2.0
    nearest = np.rint(pix)
    return np.where(np.abs(pix - nearest) < SNAP_TOLERANCE, nearest, pix)


def bilinear_sample(image, grid) -> Tensor:
    """Sample ``image`` ``[(N,) C, H, W]`` at ``grid`` ``[(N,) H_out, W_out, 2]``.

    Each output value blends the four neighbouring pixels; neighbours outside
    the image contribute zero.  Gradients flow to both the image and the grid.
    """
    image, grid = lift(image), lift(grid)
    iv, gv = image.values, grid.values
    squeeze = iv.ndim == 3
    if squeeze:
        if gv.ndim != 3:
            raise DimensionError(f"unbatched image needs a [H,W,2] grid, got {gv.shape}")
        iv, gv = iv[None], gv[None]
    if iv.ndim != 4 or gv.ndim != 4 or gv.shape[-1] != 2 or gv.shape[0] != iv.shape[0]:
        raise DimensionError(f"image {image.shape} and grid {grid.shape} do not conform")
    if not np.all(np.isfinite(gv)):
        raise ContractError("sampling grid contains non-finite coordinates")

    n, c, h, w = iv.shape
    ho, wo = gv.shape[1], gv.shape[2]
    p = ho * wo
    ix = _pixel_coords(gv[..., 0].reshape(n, p), w)
    iy = _pixel_coords(gv[..., 1].reshape(n, p), h)
    x0 = np.floor(ix).astype(np.int64)
    y0 = np.floor(iy).astype(np.int64)
    note_branch(lambda: (x0, y0))
    wx1 = ix - x0
    wy1 = iy - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1

    flat = iv.reshape(n, c, h * w)
    corners = []
    for yy, xx in ((y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)):
        valid = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        idx = np.where(valid, yy * w + xx, 0)
        vals = np.take_along_axis(flat, np.broadcast_to(idx[:, None, :], (n, c, p)), axis=2)
        corners.append((idx, valid, vals * valid[:, None, :]))
    (i00, m00, v00), (i01, m01, v01), (i10, m10, v10), (i11, m11, v11) = corners

    w00, w01, w10, w11 = wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1
    out = (
        v00 * w00[:, None]
        + v01 * w01[:, None]
        + v10 * w10[:, None]
        + v11 * w11[:, None]
    ).reshape(n, c, ho, wo)

    def backward(g):
        g = g.reshape(n, c, p)
        d_image = None
        if image.requires_grad:
            base = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
            d_image = np.zeros(n * c * h * w, dtype=g.dtype)
            for idx, valid, wt in ((i00, m00, w00), (i01, m01, w01), (i10, m10, w10), (i11, m11, w11)):
                contrib = g * (wt * valid)[:, None, :]
                d_image += np.bincount(
                    (base + idx[:, None, :]).ravel(), weights=contrib.ravel(), minlength=n * c * h * w
                )
            d_image = d_image.reshape(n, c, h, w)
            if squeeze:
                d_image = d_image[0]
        d_grid = None
        if grid.requires_grad:
            d_ix = (g * ((v01 - v00) * wy0[:, None] + (v11 - v10) * wy1[:, None])).sum(axis=1)
            d_iy = (g * ((v10 - v00) * wx0[:, None] + (v11 - v01) * wx1[:, None])).sum(axis=1)
            d_grid = np.stack([d_ix * (w / 2.0), d_iy * (h / 2.0)], axis=-1).reshape(n, ho, wo, 2)
            if squeeze:
                d_grid = d_grid[0]
        return (d_image, d_grid)

    return Tensor(out[0] if squeeze else out, parents=(image, grid), backward_fn=backward, op="bilinear_sample")


def spatial_transform(image, theta, h_out: int, w_out: int) -> Tensor:
    """``bilinear_sample(image, affine_grid(theta, h_out, w_out))``."""
    return bilinear_sample(image, affine_grid(theta, h_out, w_out))


def extract_scales(theta) -> Tuple[Tensor, Tensor]:
    """Column norms of the linear part of ``theta``: ``(s_x, s_y)``."""
    theta = lift(theta)
    t1, t2 = theta[..., 0, 0], theta[..., 0, 1]
    t3, t4 = theta[..., 1, 0], theta[..., 1, 1]
    s_x = (t1 * t1 + t3 * t3).sqrt()
    s_y = (t2 * t2 + t4 * t4).sqrt()
    return s_x, s_y


def rotation_theta(angle: float, scale: float = 1.0, tx: float = 0.0, ty: float = 0.0) -> np.ndarray:
    """``scale * R(angle)`` with translation; R has ``+sin`` in the lower-left entry."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[scale * c, -scale * s, tx], [scale * s, scale * c, ty]])


def crop(image: np.ndarray, x0: int, y0: int, size: int) -> np.ndarray:
    _, h, w = image.shape
    if x0 < 0 or y0 < 0 or x0 + size > w or y0 + size > h:
        raise ContractError(f"crop window x={x0}, y={y0}, size={size} exceeds image of {w}x{h}")
    return image[:, y0 : y0 + size, x0 : x0 + size]


def offset_range(center: int, extent: int, geom: CropGeometry) -> Tuple[int, int]:
    """Admissible offsets along one axis, clamped so the patch stays inside the source."""
    half = geom.d_i // 2
    lo = max(-geom.max_offset, half - center)
    hi = min(geom.max_offset, extent - geom.d_i - center + half)
    return lo, hi


def random_offset_crop(
    source: np.ndarray,
    cell_center: Tuple[int, int],
    geom: CropGeometry,
    rng: Optional[np.random.Generator] = None,
    offset: Optional[Tuple[int, int]] = None,
):
    """Cut a ``d_i`` patch whose origin is shifted by a random ``(dx, dy)``.

    The cell ends up at ``d_i // 2 - (dx, dy)`` inside the patch.  Offsets are
    drawn uniformly from the integers in ``[-max_offset, max_offset]``, narrowed
    where the source border would otherwise be crossed.

    Returns ``(patch, dx, dy)``.
    """
    source = np.asarray(source)
    cx, cy = int(cell_center[0]), int(cell_center[1])
    _, h, w = source.shape
    (xlo, xhi), (ylo, yhi) = offset_range(cx, w, geom), offset_range(cy, h, geom)
    if xlo > xhi or ylo > yhi:
        raise ContractError(f"no admissible {geom.d_i}px crop around ({cx}, {cy}) in a {w}x{h} source")
    if offset is None:
        if rng is None:
            raise ContractError("either rng or offset is required")
        dx = int(rng.integers(xlo, xhi + 1))
        dy = int(rng.integers(ylo, yhi + 1))
    else:
        dx, dy = int(offset[0]), int(offset[1])
        if not (xlo <= dx <= xhi and ylo <= dy <= yhi):
            raise ContractError(f"offset ({dx}, {dy}) outside admissible range x[{xlo},{xhi}] y[{ylo},{yhi}]")
    half = geom.d_i // 2
    patch = crop(source, cx - half + dx, cy - half + dy, geom.d_i)
    return patch, dx, dy
