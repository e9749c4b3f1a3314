"""Differentiable layer primitives over :class:`~einet.tensor.Tensor`.

Spatial ops take ``C x H x W`` or ``N x C x H x W`` inputs; the channel
axis is always ``-3``.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, _result, _tracked, concat, mean, note_selection, reshape

BN_EPS = 1e-5

_mac_counters: list[list[int]] = []


@contextlib.contextmanager
def count_macs():
    """Accumulate multiply-accumulates of every conv/FC executed inside."""
    box = [0]
    _mac_counters.append(box)
    try:
        yield box
    finally:
        _mac_counters.remove(box)


def _add_macs(n: int) -> None:
    for box in _mac_counters:
        box[0] += int(n)


def _batched(fn):
    """Lift a 4-D implementation to accept a single C x H x W map."""

    def wrapper(x: Tensor, *args, **kwargs):
        if x.ndim == 3:
            out = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise ShapeError(f"{fn.__name__} expects CxHxW or NxCxHxW, got {x.shape}")
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation; output extent ``(H + 2p - k) // s + 1``."""
    n, c, h, w = x.shape
    if kernel.ndim != 4 or kernel.shape[1] != c or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"kernel {kernel.shape} does not match input channels {c}")
    co, _, k, _ = kernel.shape
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"bias shape {bias.shape} != ({co},)")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} too small for kernel {k}")

    xd, kd = x.data, kernel.data
    wmat = kd.reshape(co, c * k * k)
    pointwise = k == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xd.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
    _add_macs(n * ho * wo * co * c * k * k)

    tx, tk = _tracked(x), _tracked(kernel)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gk = (gm.T @ cols).reshape(kd.shape) if tk else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gx = None
        if tx:
            dcols = gm @ wmat
            if pointwise:
                gx = np.ascontiguousarray(dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2))
            else:
                dcols = dcols.reshape(n, ho, wo, c, k, k)
                gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
                gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, inputs, vjp)


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "infer",
    eps: float = BN_EPS,
    return_stats: bool = False,
):
    """Per-channel normalization over every axis except ``-3``.

    In ``train`` mode batch statistics (biased variance) are used and, with
    ``return_stats``, returned alongside the output as ``(out, mean, var)``
    so the caller can update its running averages.
    """
    c = x.shape[-3]
    for name, p in (("scale", scale), ("shift", shift)):
        if p.shape != (c,):
            raise ShapeError(f"batch_norm {name} shape {p.shape} != ({c},)")
    bshape = (1,) * (x.ndim - 3) + (c, 1, 1)
    axes = tuple(i for i in range(x.ndim) if i != x.ndim - 3)
    xd = x.data
    if mode == "train":
        mu = xd.mean(axis=axes, keepdims=True)
        var = ((xd - mu) ** 2).mean(axis=axes, keepdims=True)
    elif mode == "infer":
        mu = np.asarray(running_mean, dtype=xd.dtype).reshape(bshape)
        var = np.asarray(running_var, dtype=xd.dtype).reshape(bshape)
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    sc, sh = scale.data.reshape(bshape), shift.data.reshape(bshape)
    out = xhat * sc + sh
    m = xd.size // c
    tx = _tracked(x)

    def vjp(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gx = None
        if tx:
            gxhat = g * sc
            if mode == "train":
                gx = inv / m * (
                    m * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv
        return gx, gscale, gshift

    res = _result(out.astype(xd.dtype, copy=False), (x, scale, shift), vjp)
    if return_stats:
        if mode != "train":
            return res, None, None
        return res, mu.reshape(c), var.reshape(c)
    return res


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, ``C x 1 x 1``."""
    if x.ndim < 3 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"global_avg_pool needs ...xCxHxW, got {x.shape}")
    return mean(x, axis=(-2, -1), keepdims=True)


def channel_mean(x: Tensor) -> Tensor:
    """Per-position mean across channels, ``1 x H x W``."""
    return mean(x, axis=-3, keepdims=True)


def channel_max(x: Tensor) -> Tensor:
    """Per-position maximum across channels, ``1 x H x W``.

    The gradient flows to the first maximal channel only.
    """
    if x.ndim < 3 or x.shape[-3] < 1:
        raise ShapeError(f"channel_max needs ...xCxHxW, got {x.shape}")
    xd = x.data
    idx = np.expand_dims(xd.argmax(axis=-3), -3)
    note_selection(idx)
    out = np.take_along_axis(xd, idx, axis=-3)

    def vjp(g):
        full = np.zeros_like(xd)
        np.put_along_axis(full, idx, g, axis=-3)
        return (full,)

    return _result(out, (x,), vjp)


@_batched
def max_pool(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` max pooling (stride == size)."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool: {h}x{w} not divisible by {size}")
    ho, wo = h // size, w // size
    blocks = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = blocks.argmax(axis=-1)[..., None]
    note_selection(idx)
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        return (gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _result(out, (x,), vjp)


def nearest_upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Replicate every pixel into a ``factor x factor`` block."""
    if x.ndim < 2:
        raise ShapeError("nearest_upsample needs at least 2 axes")
    xd = x.data
    out = np.repeat(np.repeat(xd, factor, axis=-2), factor, axis=-1)
    h, w = xd.shape[-2:]

    def vjp(g):
        lead = g.shape[:-2]
        return (g.reshape(lead + (h, factor, w, factor)).sum(axis=(-3, -1)),)

    return _result(out, (x,), vjp)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``(..., in)``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"fully_connected: bias {bias.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    _add_macs(int(np.prod(xd.shape[:-1])) * wd.shape[0] * wd.shape[1])
    lead = tuple(range(xd.ndim - 1))

    def vjp(g):
        gx = g @ wd
        gw = g.reshape(-1, wd.shape[0]).T @ xd.reshape(-1, wd.shape[1])
        gb = g.sum(axis=lead) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, vjp)


__all__ = [
    "BN_EPS",
    "batch_norm",
    "channel_max",
    "channel_mean",
    "concat",
    "conv2d",
    "count_macs",
    "fully_connected",
    "global_avg_pool",
    "max_pool",
    "nearest_upsample",
]
