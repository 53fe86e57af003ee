"""Neural-network primitives on the autodiff tensor.

Image ops accept either a single image ``[C,H,W]`` or a batch ``[B,C,H,W]``;
single images are lifted to a batch of one and squeezed on return. Convolution
is computed directly from its definition (windowed sum of products) via a
strided view — correctness, not throughput, is the contract.
"""

from __future__ import annotations

import warnings

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autodiff import (  # noqa: F401  (add/concat/maximum are part of the primitive set)
    Tensor,
    _accum,
    _make,
    add,
    as_tensor,
    concat,
    maximum,
)
from .errors import DimensionError


def _lift(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected [C,H,W] or [B,C,H,W], got shape {x.shape}")


def _squeeze(out: Tensor, lifted: bool) -> Tensor:
    return out.reshape(out.shape[1:]) if lifted else out


def relu(x: Tensor) -> Tensor:
    # derivative at exactly 0 is defined as 0
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0)

    def backward(g):
        _accum(x, np.where(mask, g, 0.0))

    return _make(out_data, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x [B,in] @ weight.T [in,out] (+ bias [out])``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: x {x.shape} incompatible with weight {weight.shape}"
        )
    out_data = x.data @ weight.data.T
    if bias is not None:
        out_data = out_data + bias.data

    def backward(g):
        _accum(x, g @ weight.data)
        _accum(weight, g.T @ x.data)
        if bias is not None:
            _accum(bias, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, backward)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation: out[o,i,j] = sum over window of input * kernel."""
    if stride < 1:
        raise DimensionError("conv2d: stride must be >= 1")
    x4, lifted = _lift(x)
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be [C_out,C_in,kH,kW], got {kernel.shape}")
    batch, c_in, h, w = x4.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise DimensionError(
            f"conv2d: input has {c_in} channels, kernel expects {kc}"
        )
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError("conv2d: kernel larger than padded input")
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(x4.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x4.data
    sb, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(batch, c_in, h_out, w_out, kh, kw),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    out_data = np.einsum("bcijuv,ocuv->boij", windows, kernel.data, optimize=True)

    def backward(g):
        if kernel.requires_grad:
            _accum(kernel, np.einsum("boij,bcijuv->ocuv", g, windows, optimize=True))
        if x4.requires_grad:
            spread = np.einsum("boij,ocuv->bcijuv", g, kernel.data, optimize=True)
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + h_out * stride:stride,
                        v:v + w_out * stride:stride] += spread[:, :, :, :, u, v]
            _accum(x4, gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp)

    out = _make(out_data, (x4, kernel), backward)
    return _squeeze(out, lifted)


def _pool_view(x4: Tensor, k: int):
    batch, ch, h, w = x4.shape
    if h % k or w % k:
        raise DimensionError(f"pool: spatial size {h}x{w} not divisible by {k}")
    return x4.data.reshape(batch, ch, h // k, k, w // k, k)


def avg_pool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling (stride k)."""
    x4, lifted = _lift(x)
    view = _pool_view(x4, k)
    out_data = view.mean(axis=(3, 5))

    def backward(g):
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        _accum(x4, up)

    return _squeeze(_make(out_data, (x4,), backward), lifted)


def max_pool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max pooling; ties send the gradient to the first max."""
    x4, lifted = _lift(x)
    view = _pool_view(x4, k)
    batch, ch, ho, _, wo, _ = view.shape
    flat = view.transpose(0, 1, 2, 4, 3, 5).reshape(batch, ch, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        buf = np.zeros_like(flat)
        np.put_along_axis(buf, arg[..., None], g[..., None], axis=-1)
        gx = buf.reshape(batch, ch, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        _accum(x4, gx.reshape(x4.shape))

    return _squeeze(_make(out_data, (x4,), backward), lifted)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [B,C,H,W] -> [B,C] (or [C,H,W] -> [C])."""
    x4, lifted = _lift(x)
    batch, ch, h, w = x4.shape
    out_data = x4.data.mean(axis=(2, 3))

    def backward(g):
        _accum(x4, np.broadcast_to(g[:, :, None, None] / (h * w), x4.shape).copy())

    out = _make(out_data, (x4,), backward)
    return out.reshape((ch,)) if lifted else out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (batch, spatial); affine by gamma/beta.

    In training mode batch statistics are used and the running stats arrays
    are updated in place (momentum 0.1 toward the batch stats); in eval mode
    the running stats are used.
    """
    x4, lifted = _lift(x)
    batch, ch, h, w = x4.shape
    axes = (0, 2, 3)
    n = batch * h * w
    if training:
        mu = x4.data.mean(axis=axes)
        var = x4.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x4.dtype, copy=False)
        var = running_var.astype(x4.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x4.data - mu[:, None, None]) * inv_std[:, None, None]
    out_data = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def backward(g):
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))
        if not x4.requires_grad:
            return
        gxhat = g * gamma.data[:, None, None]
        if training:
            # batch statistics depend on x: full normalization backward
            sum_g = gxhat.sum(axis=axes)
            sum_gx = (gxhat * xhat).sum(axis=axes)
            gx = (gxhat - (sum_g[:, None, None] + xhat * sum_gx[:, None, None]) / n)
            gx *= inv_std[:, None, None]
        else:
            gx = gxhat * inv_std[:, None, None]
        _accum(x4, gx)

    return _squeeze(_make(out_data, (x4, gamma, beta), backward), lifted)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel spatial normalization; constant channels map to 0."""
    x4, lifted = _lift(x)
    n = x4.shape[2] * x4.shape[3]
    axes = (2, 3)
    mu = x4.data.mean(axis=axes, keepdims=True)
    var = x4.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x4.data - mu) * inv_std
    out_data = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def backward(g):
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accum(beta, g.sum(axis=(0, 2, 3)))
        if not x4.requires_grad:
            return
        gxhat = g * gamma.data[:, None, None]
        sum_g = gxhat.sum(axis=axes, keepdims=True)
        sum_gx = (gxhat * xhat).sum(axis=axes, keepdims=True)
        gx = (gxhat - (sum_g + xhat * sum_gx) / n) * inv_std
        _accum(x4, gx)

    return _squeeze(_make(out_data, (x4, gamma, beta), backward), lifted)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    if logits.shape[axis] == 0:
        raise DimensionError("softmax along a zero-length axis")
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * probs).sum(axis=axis, keepdims=True)
        _accum(logits, probs * (g - dot))

    return _make(probs, (logits,), backward)


def l2_normalize(v: Tensor, axis: int = -1, name: str = "l2_normalize") -> Tensor:
    """Scale rows to unit Euclidean norm; zero rows pass through (flagged)."""
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    zero_rows = norm == 0.0
    if zero_rows.any():
        warnings.warn(f"{name}: zero-norm input left as zeros", RuntimeWarning)
    safe = np.where(zero_rows, 1.0, norm)
    out_data = v.data / safe

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        gv = (g - out_data * dot) / safe
        _accum(v, np.where(zero_rows, 0.0, gv))

    return _make(out_data, (v,), backward)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    return maximum(x, as_tensor(np.asarray(lo, dtype=x.dtype)))
