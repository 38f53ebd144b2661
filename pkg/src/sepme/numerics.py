"""Numeric substrate: deterministic RNG streams, a small reverse-mode tape,
SVD null-space extraction, and a central-difference gradient checker.

Everything runs in float64. All randomness flows through generators built by
:func:`make_rng` / :func:`child_rng`, so a fixed seed reproduces every matrix
bitwise on a given platform.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Mapping

import numpy as np

Array = np.ndarray

_ETA_FLOOR = 1e-12


class NumericalError(RuntimeError):
    """A computation produced non-finite values."""


class NullSpaceEmpty(ValueError):
    """The constraint matrix has full column rank: no free directions remain."""


# ---------------------------------------------------------------------------
# deterministic RNG

def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.Generator(np.random.PCG64(seed))


def child_rng(seed: int, *tags: str) -> np.random.Generator:
    """Independent substream keyed by (seed, *tags).

    The tags are hashed so that streams for different purposes ("concept
    tokens", "erase/A", ...) never collide or depend on call order.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    digest = hashlib.sha256("\x1f".join(tags).encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 8], "little") for i in (0, 8, 16, 24)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *words])))


# ---------------------------------------------------------------------------
# reverse-mode tape
#
# Var wraps a float64 ndarray and remembers how it was produced. backward()
# walks the recorded graph once in reverse topological order. The operator
# set is exactly what the toy denoiser and the erasure losses need; this is
# not a general autodiff.


class Var:
    """Node in a reverse-mode computation graph."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward_fn


def const(value) -> Var:
    return Var(value)


def _accum(node: Var, g: Array) -> None:
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: Array, shape: tuple) -> Array:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a: Var, b: Var) -> Var:
    out = Var(a.value @ b.value, (a, b))

    def bw(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    out._backward = bw
    return out


def transpose(a: Var) -> Var:
    out = Var(a.value.T, (a,))
    out._backward = lambda g: _accum(a, g.T)
    return out


def add(a: Var, b: Var) -> Var:
    out = Var(a.value + b.value, (a, b))

    def bw(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    out._backward = bw
    return out


def sub(a: Var, b: Var) -> Var:
    out = Var(a.value - b.value, (a, b))

    def bw(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    out._backward = bw
    return out


def mul(a: Var, b: Var) -> Var:
    out = Var(a.value * b.value, (a, b))

    def bw(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    out._backward = bw
    return out


def scale(a: Var, s: float) -> Var:
    s = float(s)
    out = Var(a.value * s, (a,))
    out._backward = lambda g: _accum(a, g * s)
    return out


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    out = Var(y, (a,))
    out._backward = lambda g: _accum(a, g * (1.0 - y * y))
    return out


def softmax_rows_raw(x: Array) -> Array:
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(a: Var) -> Var:
    y = softmax_rows_raw(a.value)
    out = Var(y, (a,))

    def bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(a, y * (g - dot))

    out._backward = bw
    return out


def take_rows(table: Var, idx: Array) -> Var:
    idx = np.asarray(idx, dtype=np.int64)
    out = Var(table.value[idx], (table,))

    def bw(g):
        acc = np.zeros_like(table.value)
        np.add.at(acc, idx, g)
        _accum(table, acc)

    out._backward = bw
    return out


def take_cols(a: Var, idx) -> Var:
    idx = np.asarray(idx, dtype=np.int64)
    out = Var(a.value[:, idx], (a,))

    def bw(g):
        acc = np.zeros_like(a.value)
        np.add.at(acc, (slice(None), idx), g)
        _accum(a, acc)

    out._backward = bw
    return out


def sum_all(a: Var) -> Var:
    out = Var(a.value.sum(), (a,))
    out._backward = lambda g: _accum(a, np.broadcast_to(g, a.value.shape).copy())
    return out


def mean_all(a: Var) -> Var:
    n = a.value.size
    out = Var(a.value.mean(), (a,))
    out._backward = lambda g: _accum(a, np.broadcast_to(g / n, a.value.shape).copy())
    return out


def square(a: Var) -> Var:
    out = Var(a.value * a.value, (a,))
    out._backward = lambda g: _accum(a, 2.0 * a.value * g)
    return out


def abs_val(a: Var) -> Var:
    out = Var(np.abs(a.value), (a,))
    out._backward = lambda g: _accum(a, np.sign(a.value) * g)
    return out


def sqrt_val(a: Var) -> Var:
    y = np.sqrt(a.value)
    out = Var(y, (a,))
    out._backward = lambda g: _accum(a, g / (2.0 * y))
    return out


def div(a: Var, b: Var) -> Var:
    out = Var(a.value / b.value, (a, b))

    def bw(g):
        _accum(a, _unbroadcast(g / b.value, a.value.shape))
        _accum(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    out._backward = bw
    return out


def backward(root: Var) -> None:
    """Accumulate d(root)/d(node) into .grad for every node reachable from root."""
    if root.value.shape != ():
        raise ValueError("backward expects a scalar root")
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    root.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grads(root: Var, leaves: Mapping[str, Var]) -> dict[str, Array]:
    """Run backward and collect leaf gradients (zeros for untouched leaves)."""
    backward(root)
    out = {}
    for name, leaf in leaves.items():
        out[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return out


# ---------------------------------------------------------------------------
# gradient checking

def check_gradient(
    loss_fn: Callable[[dict[str, Var]], Var],
    params: Mapping[str, Array],
    step: float = 1e-5,
) -> float:
    """Compare tape gradients against central differences.

    loss_fn maps a dict of leaf Vars to a scalar Var. Returns the max over
    all parameter entries of |analytic - central| / max(|analytic|,
    |central|, 1e-12).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Var(v) for k, v in arrays.items()}
    root = loss_fn(leaves)
    if not np.isfinite(root.value):
        raise NumericalError("loss is non-finite at the base point")
    analytic = grads(root, leaves)

    def value_at(current: dict[str, Array]) -> float:
        v = float(loss_fn({k: Var(a) for k, a in current.items()}).value)
        if not np.isfinite(v):
            raise NumericalError("loss became non-finite during finite differencing")
        return v

    worst = 0.0
    for name, base in arrays.items():
        flat = base.ravel()
        for i in range(flat.size):
            saved = flat[i]
            work = {k: (a.copy() if k == name else a) for k, a in arrays.items()}
            wf = work[name].ravel()
            wf[i] = saved + step
            up = value_at(work)
            wf[i] = saved - step
            down = value_at(work)
            central = (up - down) / (2.0 * step)
            a = float(analytic[name].ravel()[i])
            rel = abs(a - central) / max(abs(a), abs(central), _ETA_FLOOR)
            if rel > worst:
                worst = rel
    return worst


# ---------------------------------------------------------------------------
# null spaces

def nullspace(a: Array, rank_tol: float = 1e-10) -> tuple[Array, int]:
    """Orthonormal basis for the null space of ``a`` via full SVD.

    Returns (basis, rank) where basis has shape (n, n - rank) with unit
    columns and ``rank`` counts singular values above rank_tol * sigma_max.
    Raises NullSpaceEmpty when the matrix has full column rank.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("constraint matrix must be 2-D")
    n = a.shape[1]
    if n == 0:
        raise ValueError("constraint matrix has zero columns")
    if rank_tol <= 0:
        raise ValueError("rank_tol must be positive")
    _, s, vh = np.linalg.svd(a, full_matrices=True)
    smax = float(s[0]) if s.size else 0.0
    rank = int(np.count_nonzero(s > rank_tol * smax))
    if rank == n:
        raise NullSpaceEmpty(
            f"constraints span all {n} input dimensions; nothing can be decoupled"
        )
    basis = vh[rank:].T.copy()
    # SVD rows are already orthonormal; renormalize anyway so each basis
    # column is a unit vector by construction, not by accident.
    basis /= np.linalg.norm(basis, axis=0, keepdims=True)
    return basis, rank
