"""Differentiable operations.  Images are batched NCHW; vectors are (N, D)."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import GraphError, Tensor, as_tensor, needs_grad, result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise ------------------------------------------------------------

def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap operands; a plain constant takes the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return result(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return result(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return result(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(a) -> Tensor:
    a = as_tensor(a)
    return result(a.data * a.data, (a,), lambda g: (2 * a.data * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise GraphError("sqrt of non-positive value")
    out = np.sqrt(a.data)
    return result(out, (a,), lambda g: (g / (2 * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return result(out, (a,), lambda g: (g * (out > 0),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient inside [lo, hi]."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return result(a.data * a.dtype.type(c), (a,), lambda g: (g * c,))


# --- reductions & shape -------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return result(out, (a,), back)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return result(np.concatenate([t.data for t in ts], axis=axis), ts,
                  lambda g: tuple(np.split(g, sizes, axis=axis)))


def channel_stack(images: Sequence) -> Tensor:
    """K tensors of shape (N, C, H, W) -> (N, K*C, H, W), first image first."""
    return concat(images, axis=1)


def take(a, index: np.ndarray) -> Tensor:
    """Row-wise pick: out[n] = a[n, index[n]] for a of shape (N, D)."""
    a = as_tensor(a)
    idx = np.asarray(index)
    rows = np.arange(a.shape[0])

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, idx), g)
        return (out,)

    return result(a.data[rows, idx], (a,), back)


# --- dense layers ---------------------------------------------------------------

def fully_connected(x, w, b=None) -> Tensor:
    """x (N, D) @ w.T (O, D) + b (O)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"fully_connected shape mismatch: x {x.shape}, w {w.shape}")
    out = x.data @ w.data.T
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data
        parents.append(b)

    def back(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return result(out, parents, back)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return result(p, (a,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return result(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# --- convolution & pooling ----------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    """xp (C, N, Hp, Wp) -> columns (C*kh*kw, N*ho*wo), rows ordered (c, i, j)."""
    c, n = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + ho, j:j + wo]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    c, n, hp, wp = shape
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + ho, j:j + wo] += cols[:, i, j]
    return out


def conv2d(x, w, b=None, padding: int | tuple[int, int] = 0) -> Tensor:
    """Stride-1 2-D cross-correlation with zero padding.

    x (N, C, H, W), w (O, C, kh, kw), b (O) -> (N, O, H + 2ph - kh + 1, W + 2pw - kw + 1).
    """
    x, w = as_tensor(x), as_tensor(w)
    ph, pw = (padding, padding) if np.isscalar(padding) else padding
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    xp = np.zeros((c, n, h + 2 * ph, wd + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + wd] = x.data.transpose(1, 0, 2, 3)
    cols = _im2col(xp, kh, kw, ho, wo)
    wmat = w.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ValueError(f"conv2d bias shape {b.shape} != ({o},)")
        out = out + b.data[:, None, None, None]
        parents.append(b)
    out = out.transpose(1, 0, 2, 3)

    def back(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (gmat @ cols.T).reshape(w.shape)
        gx = None
        if needs_grad(x):
            gxp = _col2im(wmat.T @ gmat, xp.shape, kh, kw, ho, wo)
            gx = np.ascontiguousarray(gxp[:, :, ph:ph + h, pw:pw + wd].transpose(1, 0, 2, 3))
        grads = [gx, gw]
        if b is not None:
            grads.append(gmat.sum(axis=1))
        return tuple(grads)

    return result(np.ascontiguousarray(out), parents, back)


def conv1d(x, w, b=None, padding: int = 0) -> Tensor:
    """x (N, C, L), w (O, C, k): a 2-D convolution with unit height."""
    x, w = as_tensor(x), as_tensor(w)
    y = conv2d(reshape(x, (x.shape[0], x.shape[1], 1, x.shape[2])),
               reshape(w, (w.shape[0], w.shape[1], 1, w.shape[2])), b, padding=(0, padding))
    return reshape(y, (y.shape[0], y.shape[1], y.shape[3]))


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; H and W must be multiples of ``size``.

    The gradient goes to the first maximal element of each window in row-major order.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"maxpool2d: {h}x{w} not divisible by {size}")
    views = [x.data[:, :, i::size, j::size] for i in range(size) for j in range(size)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def back(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for k, v in enumerate(views):
            hit = (v == out) & ~taken
            taken |= hit
            gx[:, :, k // size::size, k % size::size] = g * hit
        return (gx,)

    return result(out, (x,), back)


def avgpool2d(x, size: int) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"avgpool2d: {h}x{w} not divisible by {size}")
    out = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))

    def back(g):
        gg = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
        return (gg / (size * size),)

    return result(out, (x,), back)


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    """(n_out, n_in) half-pixel-centred linear interpolation weights."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m.astype(dtype)


def upsample_bilinear(x, h: int, w: int) -> Tensor:
    x = as_tensor(x)
    mh = bilinear_matrix(x.shape[2], h, x.dtype)
    mw = bilinear_matrix(x.shape[3], w, x.dtype)
    out = np.einsum("hi,ncij,wj->nchw", mh, x.data, mw, optimize=True)
    return result(out, (x,), lambda g: (np.einsum("hi,nchw,wj->ncij", mh, g, mw, optimize=True),))
