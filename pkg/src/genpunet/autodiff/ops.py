"""Differentiable elementwise, linear-algebra, reduction and shape operations."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, record


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype), dtype=a.dtype)
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype), dtype=b.dtype), b
    raise TypeError("at least one operand must be a Tensor")


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from exc


# -- binary elementwise -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return record(a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return record(a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return record(a.data * b.data, (a, b),
                  lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    out = a.data / b.data

    def _backward(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return record(out, (a, b), _backward)


# -- unary elementwise ------------------------------------------------------

def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive inputs")
    return record(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return record(out, (a,), lambda g: (g * out * (1 - out),))


def square(a: Tensor) -> Tensor:
    return record(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name, e.g. ``elementwise("relu", x)``."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"exp": exp, "log": log, "neg": neg, "relu": relu, "sigmoid": sigmoid}
    if kind in binary:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return binary[kind](a, b)
    if kind in unary:
        return unary[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Per-element binary cross-entropy of ``sigmoid(logits)`` against ``targets``."""
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    y = y.astype(logits.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"shape mismatch: {logits.shape} vs {y.shape}")
    x = logits.data
    out = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1 / (1 + e), e / (1 + e))
    return record(out.astype(logits.dtype), (logits,),
                  lambda g: ((g * (sig - y)).astype(logits.dtype),))


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy ``matmul`` semantics (leading batch dims broadcast)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return record(out, (a, b), _backward)


def solve_triangular(lower: Tensor, rhs: Tensor) -> Tensor:
    """Solve ``lower @ x = rhs`` for lower-triangular ``lower`` (batched).

    ``lower`` has shape ``[..., d, d]`` and ``rhs`` ``[..., d, k]``.
    """
    if lower.shape[-1] != lower.shape[-2] or lower.shape[-1] != rhs.shape[-2]:
        raise ValueError(f"dimension mismatch: {lower.shape} vs {rhs.shape}")
    batch = np.broadcast_shapes(lower.shape[:-2], rhs.shape[:-2])
    L = np.broadcast_to(lower.data, batch + lower.shape[-2:])
    B = np.broadcast_to(rhs.data, batch + rhs.shape[-2:])
    x = _forward_substitution(L, B)

    def _backward(g):
        # x = L^-1 B  =>  dB = L^-T g,  dL = -tril(dB x^T)
        gb = _back_substitution_transposed(L, g)
        gl = -np.tril(np.matmul(gb, np.swapaxes(x, -1, -2)))
        return unbroadcast(gl, lower.shape), unbroadcast(gb, rhs.shape)

    return record(x.astype(rhs.dtype), (lower, rhs), _backward)


def _forward_substitution(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = L.shape[-1]
    x = np.empty(np.broadcast_shapes(L.shape[:-1] + (1,), B.shape), dtype=np.result_type(L, B))
    for i in range(d):
        acc = B[..., i, :] - np.einsum("...j,...jk->...k", L[..., i, :i], x[..., :i, :])
        x[..., i, :] = acc / L[..., i, i][..., None]
    return x


def _back_substitution_transposed(L: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Solve ``L^T y = G`` for lower-triangular ``L``."""
    d = L.shape[-1]
    y = np.empty(np.broadcast_shapes(L.shape[:-1] + (1,), G.shape), dtype=np.result_type(L, G))
    for i in reversed(range(d)):
        acc = G[..., i, :] - np.einsum("...j,...jk->...k", L[..., i + 1:, i], y[..., i + 1:, :])
        y[..., i, :] = acc / L[..., i, i][..., None]
    return y


# -- reductions ---------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return record(out, (a,), _backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = (np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64) / count).astype(a.dtype)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return record(out, (a,), _backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), _backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def _backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), _backward)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    result = out if keepdims else np.squeeze(out, axis=axis)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return record(result, (a,), _backward)


# -- shape manipulation -------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return record(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def expand_dims(a: Tensor, axis) -> Tensor:
    return reshape(a, np.expand_dims(a.data, axis).shape)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return record(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (unbroadcast(g, a.shape),))


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def _backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return record(np.array(out, dtype=a.dtype), (a,), _backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(out, tuple(tensors), _backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    expanded = [expand_dims(t, axis) for t in tensors]
    return concat(expanded, axis=axis)


def diagonal(a: Tensor) -> Tensor:
    """Diagonal of the trailing two axes."""
    d = a.shape[-1]
    out = np.diagonal(a.data, axis1=-2, axis2=-1).copy()

    def _backward(g):
        full = np.zeros_like(a.data)
        full[..., np.arange(d), np.arange(d)] = g
        return (full,)

    return record(out, (a,), _backward)


def stop_gradient(a: Tensor) -> Tensor:
    return a.detach()


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    out = np.where(mask, a.data, b.data)
    return record(out, (a, b), lambda g: (unbroadcast(np.where(mask, g, 0), a.shape),
                                          unbroadcast(np.where(mask, 0, g), b.shape)))

