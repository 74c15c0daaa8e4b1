"""Differentiable primitives on float64 arrays.

Every forward function accepts arbitrary leading batch axes in front of the
documented per-sample layout (``C x H x W`` for 2D, ``C x T x H x W`` for 3D).
Backward functions take the upstream gradient plus whatever the forward
returned as context and produce one gradient per differentiable input.
"""
from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .tensor import DTYPE


def _tuple(v, d: int, name: str) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * d
    v = tuple(int(a) for a in v)
    if len(v) != d:
        raise ShapeError(f"{name} must have {d} entries, got {len(v)}")
    return v


def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


# --------------------------------------------------------------------------
# convolution (cross-correlation, zero padding)
# --------------------------------------------------------------------------

def conv_nd(x: np.ndarray, kernels: np.ndarray, stride=1, padding=0, return_cols=False):
    """N-d cross-correlation of ``x (..., C, *S)`` with ``kernels (O, C, *K)``."""
    d = kernels.ndim - 2
    if d < 1:
        raise ShapeError(f"kernel must have at least 3 dims, got {kernels.shape}")
    if x.ndim < d + 1:
        raise ShapeError(f"input of rank {x.ndim} too small for {d}d convolution")
    stride = _tuple(stride, d, "stride")
    padding = _tuple(padding, d, "padding")
    if any(s < 1 for s in stride):
        raise ShapeError("stride must be >= 1")
    if any(p < 0 for p in padding):
        raise ShapeError("padding must be >= 0")
    out_ch, in_ch, ksize = kernels.shape[0], kernels.shape[1], kernels.shape[2:]
    c_axis = x.ndim - d - 1
    if x.shape[c_axis] != in_ch:
        raise ShapeError(
            f"input has {x.shape[c_axis]} channels but kernels expect {in_ch}"
        )
    spatial = x.shape[c_axis + 1:]
    for n, k, p in zip(spatial, ksize, padding):
        if k > n + 2 * p:
            raise ShapeError(f"kernel {tuple(ksize)} does not fit padded input {tuple(spatial)}")
    if any(padding):
        pad = [(0, 0)] * (c_axis + 1) + [(p, p) for p in padding]
        x = np.pad(x, pad)
    batch = x.shape[:c_axis]
    out_sp = tuple(_out_size(n, k, s, p) for n, k, s, p in zip(spatial, ksize, stride, padding))
    # im2col laid out as (..., *out, C, *K) so the reshape below is free
    cols = np.empty(batch + out_sp + (in_ch,) + tuple(ksize), dtype=DTYPE)
    for offs in itertools.product(*(range(k) for k in ksize)):
        sl = tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offs, stride, out_sp))
        cols[(Ellipsis,) + offs] = np.moveaxis(x[(Ellipsis,) + sl], c_axis, -1)
    cols = cols.reshape(-1, in_ch * int(np.prod(ksize)))
    out = cols @ kernels.reshape(out_ch, -1).T
    out = out.reshape(batch + out_sp + (out_ch,))
    out = np.ascontiguousarray(np.moveaxis(out, -1, c_axis))
    if return_cols:
        return out, cols
    return out


def conv_nd_backward(g, x_shape, kernels, cols, stride=1, padding=0):
    """Gradients of :func:`conv_nd` w.r.t. input and kernels."""
    d = kernels.ndim - 2
    stride = _tuple(stride, d, "stride")
    padding = _tuple(padding, d, "padding")
    out_ch, in_ch, ksize = kernels.shape[0], kernels.shape[1], kernels.shape[2:]
    c_axis = len(x_shape) - d - 1
    out_sp = g.shape[c_axis + 1:]
    gm = np.moveaxis(g, c_axis, -1).reshape(-1, out_ch)
    g_kernels = (gm.T @ cols).reshape(kernels.shape)

    gcols = (gm @ kernels.reshape(out_ch, -1)).reshape(
        x_shape[:c_axis] + tuple(out_sp) + (in_ch,) + tuple(ksize)
    )
    # (..., *out, C, *K) -> (..., C, *out, *K)
    gcols = np.moveaxis(gcols, c_axis + d, c_axis)
    padded = x_shape[:c_axis + 1] + tuple(n + 2 * p for n, p in zip(x_shape[c_axis + 1:], padding))
    gx = np.zeros(padded, dtype=DTYPE)
    for offs in itertools.product(*(range(k) for k in ksize)):
        sl = tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offs, stride, out_sp))
        gx[(Ellipsis,) + sl] += gcols[(Ellipsis,) + offs]
    if any(padding):
        sl = tuple(slice(p, p + n) for p, n in zip(padding, x_shape[c_axis + 1:]))
        gx = gx[(Ellipsis,) + sl]
    return np.ascontiguousarray(gx), g_kernels


def conv2d(x, kernels, stride=1, padding=0):
    """2D cross-correlation: ``C x H x W`` with ``O x C x N x N`` -> ``O x H' x W'``."""
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d expects O x C x N x N kernels, got {kernels.shape}")
    return conv_nd(x, kernels, stride, padding)


def conv3d(x, kernels, stride=1, padding=0):
    """3D cross-correlation: ``C x T x H x W`` with ``O x C x Nt x N x N``."""
    if kernels.ndim != 5:
        raise ShapeError(f"conv3d expects O x C x Nt x N x N kernels, got {kernels.shape}")
    return conv_nd(x, kernels, stride, padding)


# --------------------------------------------------------------------------
# pooling and pointwise
# --------------------------------------------------------------------------

def max_pool_nd(x, window: Sequence[int], stride: Sequence[int] | None = None, return_index=False):
    """Max pooling over the trailing ``len(window)`` axes, no padding."""
    d = len(window)
    window = tuple(int(w) for w in window)
    stride = window if stride is None else _tuple(stride, d, "stride")
    if x.ndim < d:
        raise ShapeError(f"input of rank {x.ndim} too small for {d}d pooling")
    lead = x.ndim - d
    for n, w in zip(x.shape[lead:], window):
        if w > n:
            raise ShapeError(f"pool window {window} larger than input {x.shape[lead:]}")
    out_sp = tuple(_out_size(n, w, s, 0) for n, w, s in zip(x.shape[lead:], window, stride))
    flat = np.empty(x.shape[:lead] + out_sp + (int(np.prod(window)),), dtype=x.dtype)
    for f, offs in enumerate(itertools.product(*(range(w) for w in window))):
        sl = tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offs, stride, out_sp))
        flat[..., f] = x[(Ellipsis,) + sl]
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if return_index:
        return np.ascontiguousarray(out), idx
    return np.ascontiguousarray(out)


def max_pool_nd_backward(g, x_shape, idx, window, stride=None):
    d = len(window)
    stride = tuple(window) if stride is None else _tuple(stride, d, "stride")
    lead = len(x_shape) - d
    out_sp = g.shape[lead:]
    gx = np.zeros(x_shape, dtype=DTYPE)
    for flat, offs in enumerate(itertools.product(*(range(w) for w in window))):
        sl = tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offs, stride, out_sp))
        gx[(Ellipsis,) + sl] += np.where(idx == flat, g, 0.0)
    return gx


def max_pool2d(x, window, stride=None):
    return max_pool_nd(x, _tuple(window, 2, "window"), stride)


def max_pool3d(x, window, stride=None):
    return max_pool_nd(x, _tuple(window, 3, "window"), stride)


def relu(x):
    return np.maximum(x, 0.0)


def global_avg_pool(x, ndim: int = 2):
    """Mean over the trailing ``ndim`` axes: ``(..., C, *S) -> (..., C)``."""
    return x.mean(axis=tuple(range(x.ndim - ndim, x.ndim)))


def affine(x, weight, bias):
    """``x (..., D) @ weight.T + bias`` with ``weight`` of shape ``O x D``."""
    if x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"affine shape mismatch: x {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return x @ weight.T + bias


def logsumexp(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def softmax(scores, axis=-1):
    """Numerically stable softmax (max subtracted before exponentiation)."""
    scores = np.asarray(scores, dtype=DTYPE)
    if scores.size == 0 or scores.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    e = np.exp(scores - np.max(scores, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(scores, axis=-1):
    scores = np.asarray(scores, dtype=DTYPE)
    if scores.size == 0 or scores.shape[axis] == 0:
        raise ShapeError("log_softmax of an empty vector")
    return scores - np.expand_dims(logsumexp(scores, axis=axis), axis)
