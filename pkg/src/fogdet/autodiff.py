"""Tiny reverse-mode automatic differentiation engine over float64 numpy arrays.

The computation graph doubles as the tape: each tensor produced by an
operation remembers its parents and a closure that pushes the incoming
gradient back to them. ``backward`` walks that tape once in reverse
topological order. Everything is float64 and single-threaded, so repeated
runs with the same inputs are bit-identical.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """Raised when a call breaks a documented precondition."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (e.g. teacher forward)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out broadcast dimensions so grad matches the original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``data`` is always a float64 ndarray; ``grad`` is populated (same shape)
    by ``backward`` for tensors with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: Sequence["Tensor"] = (),
                 _backward: Callable[[np.ndarray], None] | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# -- elementwise / broadcast ops ------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def bw(g):
        _accum(a, g * s)

    return _make(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return _make(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return _make(out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bw(g):
        _accum(a, g * (a.data > 0.0))

    return _make(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def bw(g):
        _accum(a, g * np.sign(a.data))

    return _make(out, (a,), bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first operand."""
    out = np.maximum(a.data, b.data)

    def bw(g):
        take_a = a.data >= b.data
        _accum(a, _unbroadcast(g * take_a, a.data.shape))
        _accum(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _make(out, (a, b), bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    out = np.minimum(a.data, b.data)

    def bw(g):
        take_a = a.data <= b.data
        _accum(a, _unbroadcast(g * take_a, a.data.shape))
        _accum(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _make(out, (a, b), bw)


# -- reductions ------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    out = a.data.sum()

    def bw(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _make(out, (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = a.data.mean()

    def bw(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    return _make(out, (a,), bw)


def sum_sq(a: Tensor) -> Tensor:
    """Sum of squared entries."""
    out = np.sum(a.data * a.data)

    def bw(g):
        _accum(a, 2.0 * float(g) * a.data)

    return _make(out, (a,), bw)


def sum_axis(a: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(out, (a,), bw)


# -- shape ops -------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out, (a,), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    out = a.data.T.copy()

    def bw(g):
        _accum(a, g.T)

    return _make(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(out, tensors, bw)


def take_rows(a: Tensor, idx) -> Tensor:
    """Row gather; backward scatter-adds (duplicate indices accumulate)."""
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def bw(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        _accum(a, acc)

    return _make(out, (a,), bw)


def select(a: Tensor, rows, cols) -> Tensor:
    """Pick entries a[rows[i], cols[i]] as a vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = a.data[rows, cols]

    def bw(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, (rows, cols), g)
        _accum(a, acc)

    return _make(out, (a,), bw)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    out = a.data[:, lo:hi].copy()

    def bw(g):
        acc = np.zeros_like(a.data)
        acc[:, lo:hi] = g
        _accum(a, acc)

    return _make(out, (a,), bw)


# -- matrix / structured ops ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects matrices, got shapes {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out, (a, b), bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for overflow safety."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        _accum(a, out * (g - dot))

    return _make(out, (a,), bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse

    def bw(g):
        sm = np.exp(out)
        _accum(a, g - sm * g.sum(axis=1, keepdims=True))

    return _make(out, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization followed by affine gain/bias.

    Zero-variance rows map to the bias (the eps guard keeps them finite).
    """
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gg = g * gain.data
        dxhat_sum = gg.sum(axis=-1, keepdims=True)
        dxhat_dot = (gg * xhat).sum(axis=-1, keepdims=True)
        _accum(x, inv * (gg - dxhat_sum / d - xhat * dxhat_dot / d))
        axes = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=axes))
        _accum(bias, g.sum(axis=axes))

    return _make(out, (x, gain, bias), bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2) -> Tensor:
    """3x3 convolution, padding 1, over a (C_in, H, W) input.

    w is (C_out, C_in, 3, 3); b is (C_out,). Output spatial dims are
    ceil-divided by the stride, so stride 2 on even dims exactly halves them.
    """
    cin, h, wdt = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]          # (C_in, H', W', kh, kw)
    out = np.einsum("chwij,ocij->ohw", win, w.data, optimize=True)
    out += b.data[:, None, None]

    def bw(g):
        _accum(w, np.einsum("chwij,ohw->ocij", win, g, optimize=True))
        _accum(b, g.sum(axis=(1, 2)))
        gxp = np.zeros_like(xp)
        hh, ww = g.shape[1], g.shape[2]
        rows = np.arange(hh) * stride
        cols = np.arange(ww) * stride
        for i in range(kh):
            for j in range(kw):
                contrib = np.einsum("ohw,oc->chw", g, w.data[:, :, i, j])
                gxp[:, rows[0] + i: rows[-1] + i + 1: stride,
                    cols[0] + j: cols[-1] + j + 1: stride] += contrib
        _accum(x, gxp[:, 1:-1, 1:-1])

    return _make(out, (x, w, b), bw)


# -- backward pass ---------------------------------------------------------

def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every reachable tensor.

    Visits each recorded node exactly once, in reverse topological order.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- verification ----------------------------------------------------------

def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                   h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` re-evaluates the scalar loss from the current parameter values.
    Error metric per entry: |analytic - numeric| / max(1, |analytic|).
    """
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise ContractError("gradient_check probe produced a non-finite loss")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gnum = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(f().data)
            flat[i] = orig - h
            lo = float(f().data)
            flat[i] = orig
            gnum[i] = (hi - lo) / (2.0 * h)
        err = np.abs(ga.reshape(-1) - gnum) / np.maximum(1.0, np.abs(ga.reshape(-1)))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


# -- serialization ---------------------------------------------------------

def save_tensor(path, t: Tensor):
    """Flat binary layout: little-endian u32 rank, u32 dims, f64 data."""
    data = t.data
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", data.ndim))
        for dim in data.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(data.astype("<f8").tobytes(order="C"))


def load_tensor(path, requires_grad: bool = False) -> Tensor:
    with open(path, "rb") as fh:
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
    return Tensor(data.copy(), requires_grad=requires_grad)
