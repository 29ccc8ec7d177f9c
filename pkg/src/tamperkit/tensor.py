"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ndarray. Operations on tensors record nodes on a
global tape while gradient tracking is enabled; ``backward`` replays the
tape in reverse and accumulates gradients additively into every tensor
that requires them. The tape is explicit and is consumed by ``backward``,
so each forward/backward cycle starts clean.

float32 is the working precision; float64 can be selected globally (used
by the finite-difference gradient checker).
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

SIGMOID_EPS = 1e-7


class NumericError(ArithmeticError):
    """A numeric invariant broke (non-finite loss, failed gradient check)."""


_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_TAPE: list["_TapeNode"] = []


def set_default_dtype(dtype) -> None:
    """Switch the working precision (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def using_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        """The underlying array (no copy); treat as read-only."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped untracked
    def __add__(self, other):
        return add(self, as_tensor(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other, like=self))

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other, like=self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other, like=self))

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else (axes or None))

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False, dtype=dtype)


class _TapeNode:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, oracles)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def reset_tape() -> None:
    _TAPE.clear()


def tape_size() -> int:
    return len(_TAPE)


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tracked = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=tracked, dtype=out_data.dtype)
    if tracked:
        _TAPE.append(_TapeNode(out, parents, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every tracked tensor.

    The loss must be scalar. Consumes and clears the active tape.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss is not connected to any gradient-tracked tensor")
    try:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(_TAPE):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
    finally:
        _TAPE.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * np.asarray(c, dtype=a.data.dtype)

    def bw(g):
        return (g * np.asarray(c, dtype=g.dtype),)

    return _record(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bw(g):
        return (g * (a.data > 0),)

    return _record(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic, output clamped to [eps, 1-eps].

    The clamp keeps downstream logs finite; the gradient uses the clamped
    output, s*(1-s), so saturated units still pass a tiny signal instead
    of an exact zero.
    """
    x = a.data
    z = np.exp(-np.abs(x))  # one exp; z = e^{-x} for x>=0, e^{x} otherwise
    out = np.asarray(np.where(x >= 0, x.dtype.type(1.0), z) / (1.0 + z))
    eps = np.asarray(SIGMOID_EPS, dtype=x.dtype)
    np.clip(out, eps, 1 - eps, out=out)

    def bw(g):
        d = np.asarray(1.0 - out)
        d *= out
        d *= g
        return (d,)

    return _record(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive input")
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _record(out, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt requires non-negative input")
    out = np.sqrt(a.data)

    def bw(g):
        return (g * (0.5 / out),)

    return _record(out, (a,), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the interior."""
    out = np.clip(a.data, lo, hi)

    def bw(g):
        return (g * ((a.data > lo) & (a.data < hi)),)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = a.data.transpose(axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _record(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tensors, bw)


# ---------------------------------------------------------------- reductions


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)
        if not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)

    return _record(np.asarray(out, dtype=a.data.dtype), (a,), bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for i in ax:
            count *= a.shape[i]
    s = reduce_sum(a, axis=axis, keepdims=keepdims)
    return scale(s, 1.0 / count)


def reduce_max(a: Tensor, axis, keepdims: bool = False) -> Tensor:
    """Max over the given axes; gradient flows to the first argmax only,
    so ties are broken deterministically."""
    ax = axis if isinstance(axis, tuple) else (axis,)
    ax = tuple(i % a.ndim for i in ax)
    kept = tuple(i for i in range(a.ndim) if i not in ax)
    perm = kept + ax
    moved = a.data.transpose(perm)
    kept_shape = moved.shape[: len(kept)]
    red = int(np.prod(moved.shape[len(kept):], dtype=np.int64)) if ax else 1
    flat = moved.reshape(kept_shape + (red,))
    idx = np.argmax(flat, axis=-1)
    out_kept = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        if not keepdims:
            gk = g
        else:
            gk = g.reshape(out_kept.shape)
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], gk[..., None].astype(flat.dtype), axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (gmoved.transpose(tuple(np.argsort(perm))),)

    if keepdims:
        shp = list(a.shape)
        for i in ax:
            shp[i] = 1
        out = out_kept.reshape(shp)
    else:
        out = out_kept
    return _record(np.asarray(out, dtype=a.data.dtype), (a,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched 3-D matrix product (numpy matmul semantics)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul expects ndim >= 2 operands, got {a.ndim} and {b.ndim}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bw)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with (Cout, Cin, k, k) kernel.

    Implemented as im2col + one GEMM; the backward pass is a GEMM for the
    kernel gradient plus k*k strided slice-adds for the input gradient.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be 4-D (N,C,H,W), got shape {x.shape}")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d kernel must be 4-D (Cout,Cin,k,k), got shape {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kh != kw:
        raise ValueError(f"conv2d kernel must be square, got {kh}x{kw}")
    if kcin != cin:
        raise ValueError(
            f"conv2d channel mismatch: input has Cin={cin} (dim 1) but kernel expects Cin={kcin} (dim 1)"
        )
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d input {h}x{w} with padding {padding} is smaller than kernel {kh}x{kw}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, Cin, OH, OW, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, cin * kh * kw)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
        gk = None
        if kernel.requires_grad:
            gk = (gm.T @ cols).reshape(cout, cin, kh, kw)
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, :, di : di + stride * (oh - 1) + 1 : stride,
                        dj : dj + stride * (ow - 1) + 1 : stride] += dcols[:, :, :, :, di, dj]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk

    return _record(np.ascontiguousarray(out), (x, kernel), bw)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 on NCHW input."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        gexp = np.broadcast_to(
            g[:, :, :, None, :, None] * np.asarray(0.25, dtype=g.dtype),
            (n, c, h // 2, 2, w // 2, 2),
        )
        return (gexp.reshape(n, c, h, w).copy(),)

    return _record(out, (x,), bw)


_UPSAMPLE_CACHE: dict[tuple, np.ndarray] = {}


def _bilinear_matrix(h: int, w: int, out_h: int, out_w: int, dtype) -> np.ndarray:
    """Dense (out_h*out_w, h*w) interpolation matrix, align_corners=False."""
    key = (h, w, out_h, out_w, np.dtype(dtype).str)
    hit = _UPSAMPLE_CACHE.get(key)
    if hit is not None:
        return hit

    def axis_weights(src: int, dst: int):
        pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
        pos = np.clip(pos, 0.0, src - 1.0)
        i0 = np.floor(pos).astype(np.int64)
        i1 = np.minimum(i0 + 1, src - 1)
        frac = pos - i0
        return i0, i1, frac

    y0, y1, fy = axis_weights(h, out_h)
    x0, x1, fx = axis_weights(w, out_w)
    mat = np.zeros((out_h * out_w, h * w), dtype=np.float64)
    rows = np.arange(out_h * out_w).reshape(out_h, out_w)
    for (yi, wy) in ((y0, 1.0 - fy), (y1, fy)):
        for (xi, wx) in ((x0, 1.0 - fx), (x1, fx)):
            np.add.at(
                mat,
                (rows, (yi[:, None] * w + xi[None, :])),
                wy[:, None] * wx[None, :],
            )
    mat = mat.astype(dtype)
    _UPSAMPLE_CACHE[key] = mat
    return mat


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of NCHW input (align_corners=False convention).

    Uses a cached dense interpolation matrix per (in, out) size pair so the
    whole resize is one GEMM; the backward pass is the transposed GEMM.
    """
    if x.ndim != 4:
        raise ValueError(f"upsample_bilinear input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    mat = _bilinear_matrix(h, w, out_h, out_w, x.data.dtype)
    out = (x.data.reshape(n * c, h * w) @ mat.T).reshape(n, c, out_h, out_w)

    def bw(g):
        gx = (g.reshape(n * c, out_h * out_w) @ mat).reshape(n, c, h, w)
        return (gx,)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------- losses


def bce(target, prediction: Tensor) -> Tensor:
    """Mean binary cross-entropy with clamped predictions.

    ``target`` is treated as a constant (values in [0, 1]; soft targets
    allowed) so gradients flow only into ``prediction``. Predictions are
    clamped to [eps, 1-eps] before the logs. NaN anywhere is rejected.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=prediction.data.dtype)
    if np.isnan(t).any():
        raise ValueError("bce: target contains NaN")
    if np.isnan(prediction.data).any():
        raise ValueError("bce: prediction contains NaN")
    if t.min() < 0 or t.max() > 1:
        raise ValueError("bce: target values must lie in [0, 1]")
    x = prediction.data
    dt = x.dtype
    t = np.broadcast_to(np.asarray(t, dtype=dt), x.shape)
    eps = dt.type(SIGMOID_EPS)
    hi = dt.type(1.0) - eps
    p = np.clip(x, eps, hi)
    n = dt.type(p.size)

    if ((t == 0) | (t == 1)).all():
        # hard targets: t*log(p) + (1-t)*log(1-p) collapses to log(q) with
        # q = p where t=1 else 1-p; identical floats, half the passes
        ones = t != 0
        q = np.where(ones, p, 1.0 - p)
        out = np.asarray(-np.mean(np.log(q)), dtype=dt)

        def bw(g):
            d = np.asarray(np.where(ones, dt.type(-1.0), dt.type(1.0)) / q)
            d /= n
            d *= (x > eps) & (x < hi)
            d *= g
            return (d,)

        return _record(out, (prediction,), bw)

    out = np.asarray(-np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)), dtype=dt)

    def bw(g):
        # gradient passes only through the clip interior, matching clip()
        d = np.asarray((1.0 - t) / (1.0 - p) - t / p)
        d /= n
        d *= (x > eps) & (x < hi)
        d *= g
        return (d,)

    return _record(out, (prediction,), bw)


# ---------------------------------------------------------------- grad check


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float | None = None) -> float:
    """Compare analytic and central-difference gradients of ``f`` at ``x``.

    Returns max over coordinates of |a - n| / max(1, |a|, |n|). ``f`` must
    be deterministic and scalar-valued; probe points should sit away from
    kinks (relu corners, argmax ties, threshold boundaries) by more than
    ``eps``, which defaults to 1e-5 in float64 and 1e-2 in float32.
    """
    dt = x.data.dtype
    if eps is None:
        eps = 1e-5 if dt == np.dtype(np.float64) else 1e-2

    probe = Tensor(x.data.copy(), requires_grad=True, dtype=dt)
    out = f(probe)
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    backward(out)
    if probe.grad is None:
        raise RuntimeError("grad_check: function did not propagate gradient to the probe input")
    analytic = probe.grad.reshape(-1).astype(np.float64)

    base = np.ascontiguousarray(x.data.copy())
    flat = base.reshape(-1)
    numeric = np.empty(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(Tensor(base.copy(), dtype=dt)).data)
            flat[i] = orig - eps
            lo = float(f(Tensor(base.copy(), dtype=dt)).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
