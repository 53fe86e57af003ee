"""Differentiable affine grid generation and bilinear sampling.

The six parameters (t1..t6) form the 2x3 matrix ``A = [[t1,t2,t3],[t4,t5,t6]]``
mapping normalized *target* coordinates to normalized *source* coordinates:

    x_s = t1*x_t + t2*y_t + t3
    y_s = t4*x_t + t5*y_t + t6

Normalized coordinates follow the align-corners convention: -1 and +1 sit
exactly on the first and last pixel centers, so the identity parameters
reproduce the input bit-near. Source reads outside the image contribute zero
(zero padding) — a contractive map crops/zooms, an expanding or translating
map pads lost regions with zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _accum, _make, as_tensor
from .errors import DimensionError, NumericError

IDENTITY_THETA = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


@dataclass(frozen=True)
class AffineParams:
    """The six reals defining the target->source coordinate map."""

    theta: tuple[float, float, float, float, float, float]

    def __post_init__(self):
        values = tuple(float(v) for v in self.theta)
        if len(values) != 6:
            raise DimensionError(f"affine parameters need 6 values, got {len(values)}")
        if not np.isfinite(values).all():
            raise NumericError(f"non-finite affine parameters: {values}")
        object.__setattr__(self, "theta", values)

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(IDENTITY_THETA)

    def matrix(self) -> np.ndarray:
        """2x3 matrix [[t1,t2,t3],[t4,t5,t6]]."""
        return np.asarray(self.theta, dtype=np.float64).reshape(2, 3)

    def apply(self, xy: np.ndarray) -> np.ndarray:
        """Map points [..., 2] of (x, y) through the homogeneous 2x3 matrix."""
        m = self.matrix()
        xy = np.asarray(xy, dtype=np.float64)
        return xy @ m[:, :2].T + m[:, 2]


def compose(a: AffineParams, b: AffineParams) -> AffineParams:
    """Homogeneous composition: the map of the result is a's map after b's.

    ``make_grid(compose(a, b))`` equals a's map applied pointwise to b's grid;
    equivalently, sampling once with ``compose(a, b)`` matches warping with
    ``a`` first and then warping that result with ``b`` (interior reads).
    """
    ma, mb = a.matrix(), b.matrix()
    lin = ma[:, :2] @ mb[:, :2]
    off = ma[:, :2] @ mb[:, 2] + ma[:, 2]
    return AffineParams((lin[0, 0], lin[0, 1], off[0], lin[1, 0], lin[1, 1], off[1]))


def _theta_tensor(theta) -> Tensor:
    if isinstance(theta, AffineParams):
        theta = np.asarray(theta.theta)
    t = as_tensor(theta)
    if t.shape == (6,):
        t = t.reshape((1, 6))
    if t.ndim != 2 or t.shape[1] != 6:
        raise DimensionError(f"theta must have 6 parameters per item, got {t.shape}")
    return t


def _target_lattice(h_out: int, w_out: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    # a dimension of size 1 has normalized coordinate 0
    xs = np.linspace(-1.0, 1.0, w_out, dtype=dtype) if w_out > 1 else np.zeros(1, dtype)
    ys = np.linspace(-1.0, 1.0, h_out, dtype=dtype) if h_out > 1 else np.zeros(1, dtype)
    return np.meshgrid(xs, ys)  # each [H_out, W_out]


def make_grid(theta, h_out: int, w_out: int) -> Tensor:
    """Sampling grid [B,H_out,W_out,2] of normalized (x_s, y_s) source coords.

    Differentiable w.r.t. theta; a single parameter vector yields batch 1.
    """
    if h_out < 1 or w_out < 1:
        raise DimensionError("make_grid needs H_out >= 1 and W_out >= 1")
    t = _theta_tensor(theta)
    if not np.isfinite(t.data).all():
        raise NumericError("non-finite theta passed to make_grid")
    tx, ty = _target_lattice(h_out, w_out, t.dtype)
    th = t.data  # [B, 6]
    xs = th[:, 0, None, None] * tx + th[:, 1, None, None] * ty + th[:, 2, None, None]
    ys = th[:, 3, None, None] * tx + th[:, 4, None, None] * ty + th[:, 5, None, None]
    out_data = np.stack([xs, ys], axis=-1)  # [B, H, W, 2]

    def backward(g):
        gx, gy = g[..., 0], g[..., 1]
        gt = np.stack(
            [
                (gx * tx).sum(axis=(1, 2)),
                (gx * ty).sum(axis=(1, 2)),
                gx.sum(axis=(1, 2)),
                (gy * tx).sum(axis=(1, 2)),
                (gy * ty).sum(axis=(1, 2)),
                gy.sum(axis=(1, 2)),
            ],
            axis=1,
        )
        _accum(t, gt)

    return _make(out_data, (t,), backward)


def bilinear_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Sample ``x`` at the grid's source coordinates with zero padding.

    ``x`` is [C,H,W] or [B,C,H,W]; ``grid`` is [H_out,W_out,2] or
    [B,H_out,W_out,2]. Each output pixel interpolates the four lattice
    neighbors of the unnormalized source point; neighbors outside
    [0,H-1]x[0,W-1] contribute exactly zero.
    """
    single = x.ndim == 3
    x4 = x.reshape((1,) + x.shape) if single else x
    if x4.ndim != 4:
        raise DimensionError(f"bilinear_sample input must be 3-D or 4-D, got {x.shape}")
    g4 = grid.reshape((1,) + grid.shape) if grid.ndim == 3 else grid
    if g4.ndim != 4 or g4.shape[-1] != 2:
        raise DimensionError(f"grid must be [...,H,W,2], got {grid.shape}")
    if not np.isfinite(g4.data).all():
        raise NumericError("non-finite sampling grid")
    batch, ch, h, w = x4.shape
    gb, h_out, w_out, _ = g4.shape
    if gb not in (1, batch):
        raise DimensionError(f"grid batch {gb} incompatible with input batch {batch}")

    # unnormalize: [-1,1] -> [0, W-1] / [0, H-1] (align corners)
    xs = (g4.data[..., 0] + 1.0) * (w - 1) / 2.0
    ys = (g4.data[..., 1] + 1.0) * (h - 1) / 2.0
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    wx = (xs - x0)[:, None]  # [GB,1,Ho,Wo], broadcasts over channels
    wy = (ys - y0)[:, None]

    def gather(yi, xi):
        """(masked values [B,C,Ho,Wo], mask [GB,1,Ho,Wo], flat index [GB,Ho,Wo])."""
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        if gb == 1:
            vals = x4.data[:, :, yc[0], xc[0]]
        else:
            bidx = np.arange(batch)[:, None, None, None]
            cidx = np.arange(ch)[None, :, None, None]
            vals = x4.data[bidx, cidx, yc[:, None], xc[:, None]]
        mask = valid[:, None]
        return np.where(mask, vals, 0.0), mask, yc * w + xc

    v00, m00, i00 = gather(y0, x0)
    v01, m01, i01 = gather(y0, x0 + 1)
    v10, m10, i10 = gather(y0 + 1, x0)
    v11, m11, i11 = gather(y0 + 1, x0 + 1)

    out_data = ((1 - wy) * ((1 - wx) * v00 + wx * v01)
                + wy * ((1 - wx) * v10 + wx * v11))

    def backward(g):
        if x4.requires_grad:
            gx_buf = np.zeros((batch, ch, h * w), dtype=x4.dtype)
            span = np.arange(ch)[:, None] * (h * w)
            for mask, idx, wgt in (
                (m00, i00, (1 - wy) * (1 - wx)),
                (m01, i01, (1 - wy) * wx),
                (m10, i10, wy * (1 - wx)),
                (m11, i11, wy * wx),
            ):
                contrib = np.where(mask, g * wgt, 0.0)
                for b in range(batch):
                    rows = idx[b if gb > 1 else 0].reshape(-1)
                    flat_idx = (span + rows[None, :]).reshape(-1)
                    gx_buf[b] += np.bincount(
                        flat_idx, weights=contrib[b].reshape(-1),
                        minlength=ch * h * w,
                    ).reshape(ch, h * w).astype(x4.dtype, copy=False)
            _accum(x4, gx_buf.reshape(x4.shape))
        if g4.requires_grad:
            # d out / d pixel coordinate, summed over channels
            dx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
            dy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
            gxs = (g * dx).sum(axis=1) * ((w - 1) / 2.0)
            gys = (g * dy).sum(axis=1) * ((h - 1) / 2.0)
            gg = np.stack([gxs, gys], axis=-1)
            if gb == 1 and batch > 1:
                gg = gg.sum(axis=0, keepdims=True)
            _accum(g4, gg)

    out = _make(out_data, (x4, g4), backward)
    return out.reshape((ch, h_out, w_out)) if single else out


def warp(x: Tensor, theta, h_out: int | None = None, w_out: int | None = None) -> Tensor:
    """Convenience: ``bilinear_sample(x, make_grid(theta, H_out, W_out))``."""
    h = x.shape[-2] if h_out is None else h_out
    w = x.shape[-1] if w_out is None else w_out
    return bilinear_sample(x, make_grid(theta, h, w))
