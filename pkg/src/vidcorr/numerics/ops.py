"""Differentiable primitives over float32 tensors.

Layout conventions: images and feature maps are HWC, conv kernels are
(kh, kw, cin, cout), matmul operands are 2-D. Reductions accumulate in
float64 and cast the result back to float32. Every primitive is pure;
parallelism, if any, lives inside a primitive, never across the tape.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, emit


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.astype(np.float32, copy=False)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    r = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return emit(r, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    r = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return emit(r, (a, b), bwd)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return emit(a.data * np.float32(s), (a,), lambda g: (g * np.float32(s),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    r = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return emit(r, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    r = np.exp(a.data)

    def bwd(g):
        return (g * r,)

    return emit(r, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return emit(r, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    r = np.empty_like(x)
    pos = x >= 0
    r[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    r[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * r * (1.0 - r),)

    return emit(r, (a,), bwd)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    r = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g):
        return (g * inside,)

    return emit(r, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    r = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * r).sum(axis=axis, keepdims=True)
        return (r * (g - dot),)

    return emit(r, (a,), bwd)


def masked_softmax(a, valid: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to `valid` positions.

    Invalid positions get probability exactly 0 and receive no gradient.
    Each row must contain at least one valid position.
    """
    a = as_tensor(a)
    if valid.shape != a.shape:
        raise ValueError("validity mask shape mismatch")
    if not valid.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no valid positions")
    neg = np.float32(-np.inf)
    logits = np.where(valid, a.data, neg)
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    r = (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)

    def bwd(g):
        dot = (g * r).sum(axis=-1, keepdims=True)
        return (r * (g - dot),)

    return emit(r, (a,), bwd)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    r = a.data.sum(axis=axis, dtype=np.float64, keepdims=keepdims).astype(np.float32)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(np.float32),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(np.float32),)

    return emit(r, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    r = a.data.mean(axis=axis, dtype=np.float64, keepdims=keepdims).astype(np.float32)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).astype(np.float32),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).astype(np.float32),)

    return emit(r, (a,), bwd)


def l1(a, b) -> Tensor:
    """Sum of absolute differences, reduced to a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError("l1 operands must share a shape")
    diff = a.data - b.data
    r = np.abs(diff).sum(dtype=np.float64).astype(np.float32)

    def bwd(g):
        s = np.sign(diff) * g
        return s.astype(np.float32), (-s).astype(np.float32)

    return emit(r, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    r = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return emit(r, (a, b), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    r = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return emit(r, (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    r = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return emit(r, (a,), bwd)


def slice_(a, begin, size) -> Tensor:
    a = as_tensor(a)
    if len(begin) != a.ndim or len(size) != a.ndim:
        raise ValueError("slice spec rank mismatch")
    sl = tuple(slice(b, b + s) for b, s in zip(begin, size))
    r = a.data[sl].copy()

    def bwd(g):
        full = np.zeros(a.shape, dtype=np.float32)
        full[sl] = g
        return (full,)

    return emit(r, (a,), bwd)


def pad(a, pads) -> Tensor:
    """Zero padding; `pads` is ((before, after), ...) per axis."""
    a = as_tensor(a)
    if len(pads) != a.ndim:
        raise ValueError("pad spec rank mismatch")
    r = np.pad(a.data, pads)
    crop = tuple(slice(b, b + s) for (b, _), s in zip(pads, a.shape))

    def bwd(g):
        return (g[crop].copy(),)

    return emit(r, (a,), bwd)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, HWC input, (kh, kw, cin, cout) kernel, zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError("conv2d expects HWC input and (kh,kw,cin,cout) kernel")
    kh, kw, cin, cout = w.shape
    if x.shape[2] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[2]}, kernel {cin}")
    hp = x.shape[0] + 2 * padding
    wp = x.shape[1] + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError("conv2d kernel larger than padded input")
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    ho, wo = win.shape[0], win.shape[1]
    # (ho, wo, cin, kh, kw) -> (ho*wo, kh*kw*cin), matching kernel layout
    patches = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = patches @ wmat
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ValueError("conv2d bias must have shape (cout,)")
        out = out + b.data
    r = out.reshape(ho, wo, cout)

    def bwd(g):
        gm = g.reshape(ho * wo, cout)
        dw = (patches.T @ gm).reshape(w.shape)
        dpatches = gm @ wmat.T
        dp = dpatches.reshape(ho, wo, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                dxp[ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += dp[:, :, ki, kj]
        if padding:
            dx = dxp[padding:-padding, padding:-padding].copy()
        else:
            dx = dxp
        if b is None:
            return dx, dw
        return dx, dw, gm.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return emit(r, inputs, bwd)


def pixel_shuffle(x, factor: int) -> Tensor:
    """(H, W, u*u*K) -> (u*H, u*W, K); channel index is (sy*u + sx)*K + k."""
    x = as_tensor(x)
    h, w, c = x.shape
    u = int(factor)
    if c % (u * u) != 0:
        raise ValueError("pixel_shuffle channel count not divisible by factor^2")
    k = c // (u * u)
    r = np.ascontiguousarray(
        x.data.reshape(h, w, u, u, k).transpose(0, 2, 1, 3, 4)
    ).reshape(h * u, w * u, k)

    def bwd(g):
        back = g.reshape(h, u, w, u, k).transpose(0, 2, 1, 3, 4)
        return (np.ascontiguousarray(back).reshape(h, w, c),)

    return emit(r, (x,), bwd)


def _resize_coeffs(n_in: int, n_out: int):
    # Half-pixel centers; edge-clamped.
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(src).astype(np.int64)
    frac = (src - lo).astype(np.float32)
    lo = np.clip(lo, 0, n_in - 1)
    hi = np.clip(lo + 1, 0, n_in - 1)
    return lo, hi, frac


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError("bilinear_resize expects an HWC tensor")
    h, w, _ = x.shape
    y0, y1, fy = _resize_coeffs(h, out_h)
    x0, x1, fx = _resize_coeffs(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    rows = x.data[y0] * (1 - fy) + x.data[y1] * fy
    r = rows[:, x0] * (1 - fx) + rows[:, x1] * fx

    def bwd(g):
        drows = np.zeros((out_h, w, x.shape[2]), dtype=np.float32)
        np.add.at(drows, (slice(None), x0), g * (1 - fx))
        np.add.at(drows, (slice(None), x1), g * fx)
        dx = np.zeros(x.shape, dtype=np.float32)
        np.add.at(dx, y0, drows * (1 - fy))
        np.add.at(dx, y1, drows * fy)
        return (dx,)

    return emit(r.astype(np.float32), (x,), bwd)


def grad_reverse(x, lam: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the gradient by -lam."""
    x = as_tensor(x)
    lam = float(lam)

    def bwd(g):
        return ((-lam) * g,)

    return emit(x.data, (x,), bwd)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale vectors along `axis` to unit norm (eps keeps zeros finite)."""
    x = as_tensor(x)
    n = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=True) + eps).astype(
        np.float32
    )
    r = x.data / n

    def bwd(g):
        dot = (g * r).sum(axis=axis, keepdims=True)
        return ((g - r * dot) / n,)

    return emit(r, (x,), bwd)


_KINDS = {
    "conv2d": lambda inputs, attrs: conv2d(*inputs, **attrs),
    "add": lambda inputs, attrs: add(*inputs),
    "mul": lambda inputs, attrs: mul(*inputs),
    "relu": lambda inputs, attrs: relu(*inputs),
    "exp": lambda inputs, attrs: exp(*inputs),
    "log": lambda inputs, attrs: log(*inputs),
    "softmax-over-axis": lambda inputs, attrs: softmax(inputs[0], axis=attrs["axis"]),
    "sum": lambda inputs, attrs: tsum(inputs[0], **attrs),
    "mean": lambda inputs, attrs: tmean(inputs[0], **attrs),
    "l1": lambda inputs, attrs: l1(*inputs),
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "slice": lambda inputs, attrs: slice_(inputs[0], attrs["begin"], attrs["size"]),
    "pad": lambda inputs, attrs: pad(inputs[0], attrs["pads"]),
    "pixel-shuffle": lambda inputs, attrs: pixel_shuffle(inputs[0], attrs["factor"]),
    "bilinear-resize": lambda inputs, attrs: bilinear_resize(
        inputs[0], attrs["height"], attrs["width"]
    ),
    "grad-reverse": lambda inputs, attrs: grad_reverse(inputs[0], attrs.get("lam", 1.0)),
}


def primitive_forward(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Dispatch a primitive by kind name (the stable op vocabulary)."""
    if kind not in _KINDS:
        raise ValueError(f"unknown op-kind {kind!r}")
    return _KINDS[kind](tuple(inputs), dict(attrs or {}))
