"""Reverse-mode autodiff over dense float64 numpy arrays.

Design: every op builds a node in an implicit tape (a DAG of Tensors with
recorded backward closures). ``backward(loss)`` walks the tape in reverse
topological order and accumulates gradients into ``.grad``. Repeated calls
without ``zero_grad`` accumulate, matching the usual convention.

Everything is float64 and row-major. There is no broadcasting beyond what
``add``/``mul`` need for bias terms (numpy broadcast on the forward pass,
summed back out on the backward pass).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .common import NumericDomainError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(g, self.data.shape).copy()
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar for the handful of compositions the model uses.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


_grad_enabled = True


class no_grad:
    """Context manager disabling tape recording (evaluation fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _node(data, parents, backward) -> Tensor:
    if not _grad_enabled:
        return Tensor(data)
    out = Tensor(data, _parents=parents, _backward=backward)
    if not out.requires_grad:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _node(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _node(a.data * c, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _node(out_data, (a, b), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _node(a.data * mask, (a,), bwd)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU; smooth, which keeps finite-difference checks clean."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    if a.requires_grad and _grad_enabled:
        # derivative cdf + x*pdf, cached at forward time
        deriv = cdf + x * (_INV_SQRT2PI * np.exp(-0.5 * x * x))
    else:
        deriv = None

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * deriv)

    return _node(x * cdf, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), bwd)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, ax1, ax2))

    return _node(np.swapaxes(a.data, ax1, ax2), (a,), bwd)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]

    def bwd(g):
        if a.requires_grad:
            gg = np.asarray(g) / n
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``; rejects non-finite input."""
    a = _as_tensor(a)
    if not np.isfinite(a.data).all():
        raise NumericDomainError("softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(y * (g - dot))

    return _node(y, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if not np.isfinite(a.data).all():
        raise NumericDomainError("log_softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    y = np.exp(out_data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g - y * g.sum(axis=axis, keepdims=True))

    return _node(out_data, (a,), bwd)


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under ``logits``.

    ``logits`` is (classes,) with a scalar target, or (batch, classes) with a
    length-batch target vector; returns a scalar Tensor.
    """
    logits = _as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.int64)
    if logits.ndim == 1:
        if tgt.ndim != 0:
            raise ValueError("scalar target expected for 1-d logits")
        if not (0 <= int(tgt) < logits.shape[0]):
            raise IndexError(f"target class {int(tgt)} out of range")
        ls = log_softmax(logits, axis=-1)
        picked = gather_nd(ls, (tgt.reshape(1),))
        return scale(tsum(picked), -1.0)
    if logits.ndim != 2 or tgt.shape != (logits.shape[0],):
        raise ValueError("expected (batch, classes) logits and (batch,) targets")
    if (tgt < 0).any() or (tgt >= logits.shape[1]).any():
        raise IndexError("target class out of range")
    ls = log_softmax(logits, axis=-1)
    rows = np.arange(logits.shape[0])
    picked = gather_nd(ls, (rows, tgt))
    return scale(tmean(picked), -1.0)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if a.requires_grad:
            gh = g * gain.data
            term = gh - gh.mean(axis=-1, keepdims=True) \
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(term * inv)

    return _node(out_data, (a, gain, bias), bwd)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatter-adds into the table."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if (idx < 0).any() or (idx >= table.shape[0]).any():
        raise IndexError("embedding id out of range")

    def bwd(g):
        if table.requires_grad:
            # scatter-add via one-hot matmul; much faster than np.add.at for
            # the small vocabularies used here
            flat_idx = idx.ravel()
            g2 = g.reshape(flat_idx.size, -1)
            onehot = (flat_idx[:, None]
                      == np.arange(table.shape[0])[None, :]).astype(np.float64)
            table._accumulate(onehot.T @ g2)

    return _node(table.data[idx], (table,), bwd)


def gather_nd(a, index_arrays, unique: bool = False) -> Tensor:
    """Fancy-index gather ``a[index_arrays]`` with scatter-add backward.

    ``unique=True`` promises no duplicate destinations, enabling a direct
    assignment instead of the much slower np.add.at.
    """
    a = _as_tensor(a)
    idx = tuple(np.asarray(i, dtype=np.int64) for i in index_arrays)

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            if unique:
                acc[idx] = g
            else:
                np.add.at(acc, idx, g)
            a._accumulate(acc)

    return _node(a.data[idx], (a,), bwd)


def gather_rows(a, rows, unique: bool = False) -> Tensor:
    """Select rows of a 2-d tensor."""
    return gather_nd(a, (np.asarray(rows, dtype=np.int64),), unique=unique)


def scatter_rows(values, rows, num_rows: int) -> Tensor:
    """Place 2-d ``values`` at ``rows`` of an all-zero (num_rows, D) tensor,
    accumulating duplicates; the adjoint is a row gather."""
    values = _as_tensor(values)
    idx = np.asarray(rows, dtype=np.int64)
    out_data = np.zeros((num_rows, values.shape[1]), dtype=np.float64)
    np.add.at(out_data, idx, values.data)

    def bwd(g):
        if values.requires_grad:
            values._accumulate(g[idx])

    return _node(out_data, (values,), bwd)


def take_along(a, idx, axis: int = -1, unique: bool = False) -> Tensor:
    """np.take_along_axis with scatter-add backward.

    ``unique=True`` promises the indices are distinct along ``axis`` within
    each slice (true for top-k selections), allowing put_along_axis.
    """
    a = _as_tensor(a)
    ind = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            if unique:
                np.put_along_axis(acc, ind, g, axis=axis)
            else:
                # np.put_along_axis overwrites on duplicate indices; build
                # the full fancy index and scatter-add instead.
                grid = np.meshgrid(
                    *[np.arange(s) for s in ind.shape], indexing="ij"
                )
                full_idx = list(grid)
                full_idx[axis % a.data.ndim] = ind
                np.add.at(acc, tuple(full_idx), g)
            a._accumulate(acc)

    return _node(np.take_along_axis(a.data, ind, axis=axis), (a,), bwd)


def where_mask(a, mask) -> Tensor:
    """Elementwise multiply by a constant 0/1 (or additive-constant) mask."""
    a = _as_tensor(a)
    m = np.asarray(mask, dtype=np.float64)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * m, a.shape))

    return _node(a.data * m, (a,), bwd)


def add_const(a, c) -> Tensor:
    """Add a constant array (no gradient through the constant)."""
    a = _as_tensor(a)
    c = np.asarray(c, dtype=np.float64)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))

    return _node(a.data + c, (a,), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]

    def bwd(g):
        parts = np.split(g, len(tensors), axis=axis)
        for t, gp in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(np.squeeze(gp, axis=axis))

    return _node(np.stack([t.data for t in tensors], axis=axis),
                 tuple(tensors), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        parts = np.split(g, splits, axis=axis)
        for t, gp in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(gp)

    return _node(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd
    )


# ---------------------------------------------------------------------------
# selection helpers (no gradient; selection is a discrete decision)


def top_k_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, ties broken by
    lowest index, output sorted by descending value (stable)."""
    v = np.asarray(values)
    if not (1 <= k <= v.shape[-1]):
        raise ValueError(f"k={k} out of range [1, {v.shape[-1]}]")
    order = np.argsort(-v, axis=-1, kind="stable")
    return order[..., :k]


# ---------------------------------------------------------------------------
# the backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every tensor on the tape.

    ``loss`` must be scalar. Gradients accumulate across calls until cleared.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._backward is None:
            # leaf: accumulate into the persistent grad slot
            node._accumulate(g)
            continue
        if node._backward is not None:
            _dispatch(node, g, grads)


def _dispatch(node: Tensor, g: np.ndarray, grads: dict) -> None:
    # Run the recorded closure. Closures call parent._accumulate directly,
    # but interior (non-leaf) parents should route through the grads dict so
    # their closures fire exactly once with the full accumulated gradient.
    saved = {}
    for p in node._parents:
        if p._backward is not None:
            saved[id(p)] = (p, p.grad)
            p.grad = None
    node._backward(g)
    for pid, (p, old) in saved.items():
        contributed = p.grad
        p.grad = old
        if contributed is not None:
            if pid in grads:
                grads[pid] += contributed
            else:
                grads[pid] = contributed
