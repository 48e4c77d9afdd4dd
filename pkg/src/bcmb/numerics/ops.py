"""Differentiable primitives.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient back to its inputs.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, record

# Reserved target id meaning "no loss at this position".
IGNORE_INDEX = np.iinfo(np.int32).max

_GELU_C = np.sqrt(2.0 / np.pi)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bwd(g):
        return g @ B.T, A.T @ g

    return record(A @ B, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over the last axis."""
    if a.shape == b.shape:
        return record(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.shape[-1:] == b.shape:
        lead = tuple(range(a.data.ndim - 1))
        return record(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    A, B = a.data, b.data
    return record(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def softmax_rows(x: Tensor) -> Tensor:
    X = x.data
    e = np.exp(X - X.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gamma.data
    lead = tuple(range(X.ndim - 1))

    def bwd(g):
        gx = g * G
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(xhat * G + beta.data, (x, gamma, beta), bwd)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    X = x.data
    c = X.dtype.type(_GELU_C)
    t = np.tanh(c * (X + 0.044715 * (X * X * X)))

    def bwd(g):
        dt = c * (1.0 + 3 * 0.044715 * X * X)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * dt),)

    return record(0.5 * X * (1.0 + t), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return record(y, (x,), lambda g: (g * y * (1.0 - y),))


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: ids outside [0, {table.shape[0]})")
    T = table.data

    def bwd(g):
        gt = np.zeros_like(T)
        np.add.at(gt, ids, g)
        return (gt,)

    return record(T[ids], (table,), bwd)


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, rows, g)
        return (gx,)

    return record(x.data[rows], (x,), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``p`` is 0."""
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return record(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy_with_ignore(logits: Tensor, targets: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean softmax cross-entropy over rows whose target is not ``ignore_index``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != logits.shape[:1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    valid = targets != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise ValueError("cross_entropy: every target is ignored; mean is undefined")
    rows = np.nonzero(valid)[0]
    cls = targets[rows]
    if cls.min() < 0 or cls.max() >= logits.shape[1]:
        raise IndexError(f"cross_entropy: target ids outside [0, {logits.shape[1]})")
    Z = logits.data[rows]
    m = Z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(Z - m).sum(axis=1))
    loss = (lse - Z[np.arange(n), cls]).mean()
    L = logits.data

    def bwd(g):
        p = np.exp(Z - lse[:, None])
        p[np.arange(n), cls] -= 1.0
        gl = np.zeros_like(L)
        gl[rows] = p * (g / n)
        return (gl,)

    return record(np.asarray(loss, dtype=L.dtype), (logits,), bwd)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over all entries."""
    Y = np.asarray(targets, dtype=logits.dtype)
    _check_same(logits, Tensor(Y), "bce_with_logits")
    X = logits.data
    loss = (np.maximum(X, 0) - X * Y + np.log1p(np.exp(-np.abs(X)))).mean()
    n = X.size

    def bwd(g):
        return ((1.0 / (1.0 + np.exp(-X)) - Y) * (g / n),)

    return record(np.asarray(loss, dtype=X.dtype), (logits,), bwd)
