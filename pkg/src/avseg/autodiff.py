"""Reverse-mode automatic differentiation on float64 numpy arrays.

The engine is a small define-by-run tape: every operation returns a new
:class:`DiffArray` holding the forward values and a closure that knows how to
push a cotangent back into the operands. ``backward()`` walks the graph once in
reverse topological order. Nothing here is clever; the point is that every
gradient can be checked against central differences, and is (see
``tests/test_autodiff.py`` and the ``gradcheck`` CLI subcommand).

Conventions:

* all values are ``np.float64``; integer/bool inputs are converted on entry
* operands may be plain numbers or numpy arrays; they are wrapped as constants
* gradients accumulate into ``.grad`` (leaves keep accumulating across separate
  ``backward()`` calls until reset, which is what batched training wants)
* a graph is meant to be backpropagated once and thrown away
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "DiffArray",
    "as_diff",
    "constant",
    "parameter",
    "no_grad",
    "matmul",
    "transpose",
    "reshape",
    "reduce_sum",
    "mean_all",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "relu",
    "gelu",
    "powc",
    "softmax_rows",
    "logsumexp_rows",
    "layer_norm",
    "take_flat",
    "concat_rows",
    "concat_cols",
    "scaled_dot_attention",
    "grad_check",
]

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


class DiffArray:
    """A float64 ndarray plus the bookkeeping needed for reverse mode."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        _parents: tuple["DiffArray", ...] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element array, got shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "DiffArray":
        """A constant copy sharing no graph state with this node."""
        return DiffArray(self.values.copy())

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        ``seed`` defaults to ones and must match ``self.shape``; for the usual
        scalar loss that is just 1.0.
        """
        if not self.requires_grad:
            return
        if seed is None:
            if self.values.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.values)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.values.shape:
                raise ShapeError(f"seed shape {seed.shape} != output shape {self.shape}")

        order = _toposort(self)
        self.grad = seed.copy() if self.grad is None else self.grad + seed
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        tag = ", grad" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}{tag})"

    # arithmetic sugar; the real work is in the module-level functions

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return powc(self, p)


def _toposort(root: DiffArray) -> list[DiffArray]:
    # iterative DFS post-order; graphs get deep enough to upset the recursion
    # limit on long audio pipelines
    order: list[DiffArray] = []
    seen: set[int] = set()
    stack: list[tuple[DiffArray, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_diff(x) -> DiffArray:
    """Wrap ``x`` as a constant node unless it already is a DiffArray."""
    if isinstance(x, DiffArray):
        return x
    return DiffArray(np.asarray(x, dtype=np.float64))


def constant(x) -> DiffArray:
    return DiffArray(np.asarray(x, dtype=np.float64))


def parameter(x) -> DiffArray:
    return DiffArray(np.asarray(x, dtype=np.float64), requires_grad=True)


def _accum(node: DiffArray, g: np.ndarray) -> None:
    if node.requires_grad:
        if node.grad is None:
            node.grad = g.copy()  # copy: g may be a view of another grad
        else:
            node.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` back down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Build no tape inside the block; forward values are unchanged."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _node(values, parents: tuple[DiffArray, ...], backward) -> DiffArray:
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not req:
        return DiffArray(values)
    return DiffArray(values, requires_grad=True, _parents=parents, _backward=backward)


def add(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    out_values = a.values + b.values

    def backward(g: np.ndarray) -> None:
        _accum(a, _unbroadcast(g, a.values.shape))
        _accum(b, _unbroadcast(g, b.values.shape))

    return _node(out_values, (a, b), backward)


def mul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    out_values = a.values * b.values

    def backward(g: np.ndarray) -> None:
        _accum(a, _unbroadcast(g * b.values, a.values.shape))
        _accum(b, _unbroadcast(g * a.values, b.values.shape))

    return _node(out_values, (a, b), backward)


def div(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    out_values = a.values / b.values

    def backward(g: np.ndarray) -> None:
        _accum(a, _unbroadcast(g / b.values, a.values.shape))
        _accum(b, _unbroadcast(-g * a.values / (b.values * b.values), b.values.shape))

    return _node(out_values, (a, b), backward)


def matmul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out_values = a.values @ b.values

    def backward(g: np.ndarray) -> None:
        _accum(a, g @ b.values.T)
        _accum(b, a.values.T @ g)

    return _node(out_values, (a, b), backward)


def transpose(a) -> DiffArray:
    a = as_diff(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D array, got shape {a.shape}")

    def backward(g: np.ndarray) -> None:
        _accum(a, g.T)

    return _node(a.values.T, (a,), backward)


def reshape(a, shape: Sequence[int]) -> DiffArray:
    a = as_diff(a)
    shape = tuple(shape)
    out_values = a.values.reshape(shape)

    def backward(g: np.ndarray) -> None:
        _accum(a, g.reshape(a.values.shape))

    return _node(out_values, (a,), backward)


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> DiffArray:
    a = as_diff(a)
    out_values = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> None:
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.values.shape))

    return _node(np.asarray(out_values, dtype=np.float64), (a,), backward)


def mean_all(a) -> DiffArray:
    a = as_diff(a)
    return mul(reduce_sum(a), 1.0 / a.size)


def exp(a) -> DiffArray:
    a = as_diff(a)
    out_values = np.exp(a.values)

    def backward(g: np.ndarray) -> None:
        _accum(a, g * out_values)

    return _node(out_values, (a,), backward)


def log(a) -> DiffArray:
    a = as_diff(a)
    out_values = np.log(a.values)

    def backward(g: np.ndarray) -> None:
        _accum(a, g / a.values)

    return _node(out_values, (a,), backward)


def sqrt(a) -> DiffArray:
    a = as_diff(a)
    out_values = np.sqrt(a.values)

    def backward(g: np.ndarray) -> None:
        _accum(a, g * 0.5 / out_values)

    return _node(out_values, (a,), backward)


def tanh(a) -> DiffArray:
    a = as_diff(a)
    out_values = np.tanh(a.values)

    def backward(g: np.ndarray) -> None:
        _accum(a, g * (1.0 - out_values * out_values))

    return _node(out_values, (a,), backward)


def sigmoid(a) -> DiffArray:
    a = as_diff(a)
    # stable two-sided form
    v = a.values
    out_values = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def backward(g: np.ndarray) -> None:
        _accum(a, g * out_values * (1.0 - out_values))

    return _node(out_values, (a,), backward)


def relu(a) -> DiffArray:
    a = as_diff(a)
    out_values = np.maximum(a.values, 0.0)

    def backward(g: np.ndarray) -> None:
        _accum(a, g * (a.values > 0.0))

    return _node(out_values, (a,), backward)


def gelu(a) -> DiffArray:
    """tanh-approximation GELU: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    a = as_diff(a)
    x = a.values
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(inner)
    out_values = 0.5 * x * (1.0 + t)

    def backward(g: np.ndarray) -> None:
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        _accum(a, g * d)

    return _node(out_values, (a,), backward)


def powc(a, p: float) -> DiffArray:
    """Elementwise power with a constant (non-differentiated) exponent."""
    a = as_diff(a)
    p = float(p)
    out_values = a.values**p

    def backward(g: np.ndarray) -> None:
        if p == 0.0:  # constant 1; avoids 0 * x**-1 = nan at x = 0
            _accum(a, np.zeros_like(a.values))
        else:
            _accum(a, g * p * a.values ** (p - 1.0))

    return _node(out_values, (a,), backward)


def softmax_rows(a) -> DiffArray:
    """Row-wise softmax of a 2-D array, max-shifted for stability."""
    a = as_diff(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D array, got shape {a.shape}")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_values = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        dot = (g * out_values).sum(axis=1, keepdims=True)
        _accum(a, out_values * (g - dot))

    return _node(out_values, (a,), backward)


def logsumexp_rows(a) -> DiffArray:
    """Row-wise log-sum-exp of a 2-D array; output has shape (rows, 1)."""
    a = as_diff(a)
    if a.ndim != 2:
        raise ShapeError(f"logsumexp_rows expects a 2-D array, got shape {a.shape}")
    m = a.values.max(axis=1, keepdims=True)
    e = np.exp(a.values - m)
    s = e.sum(axis=1, keepdims=True)
    out_values = m + np.log(s)

    def backward(g: np.ndarray) -> None:
        _accum(a, (e / s) * g)

    return _node(out_values, (a,), backward)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> DiffArray:
    """Row-wise layer normalization with learned per-column gain and bias.

    Uses the population variance (divide by d). ``a`` is (rows, d) with d >= 2;
    ``gain`` and ``bias`` are length-d vectors.
    """
    a, gain, bias = as_diff(a), as_diff(gain), as_diff(bias)
    if a.ndim != 2 or a.shape[1] < 2:
        raise ShapeError(f"layer_norm needs a 2-D input with at least 2 columns, got shape {a.shape}")
    d = a.shape[1]
    if gain.values.reshape(-1).shape != (d,) or bias.values.reshape(-1).shape != (d,):
        raise ShapeError("layer_norm gain/bias must have one entry per column")
    gv = gain.values.reshape(-1)
    bv = bias.values.reshape(-1)
    mu = a.values.mean(axis=1, keepdims=True)
    var = ((a.values - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.values - mu) * inv
    out_values = xhat * gv + bv

    def backward(g: np.ndarray) -> None:
        _accum(gain, (g * xhat).sum(axis=0).reshape(gain.values.shape))
        _accum(bias, g.sum(axis=0).reshape(bias.values.shape))
        gx = g * gv
        term = gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True)
        _accum(a, term * inv)

    return _node(out_values, (a, gain, bias), backward)


def take_flat(a, indices) -> DiffArray:
    """Gather from the flattened array; output takes the shape of ``indices``."""
    a = as_diff(a)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("take_flat indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= a.size):
        raise ShapeError(f"take_flat index out of range for size {a.size}")
    flat = a.values.reshape(-1)
    out_values = flat[idx]

    def backward(g: np.ndarray) -> None:
        da = np.zeros_like(flat)
        np.add.at(da, idx.reshape(-1), g.reshape(-1))
        _accum(a, da.reshape(a.values.shape))

    return _node(out_values, (a,), backward)


def _concat(parts: Iterable, axis: int) -> DiffArray:
    nodes = [as_diff(p) for p in parts]
    if not nodes:
        raise ShapeError("concat of zero arrays")
    out_values = np.concatenate([n.values for n in nodes], axis=axis)
    sizes = [n.values.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> None:
        for node, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(node, g[tuple(sl)])

    return _node(out_values, tuple(nodes), backward)


def concat_rows(parts: Iterable) -> DiffArray:
    return _concat(parts, axis=0)


def concat_cols(parts: Iterable) -> DiffArray:
    return _concat(parts, axis=1)


def scaled_dot_attention(q, k, v) -> DiffArray:
    """softmax(q k^T / sqrt(d)) v, composed from primitives.

    ``q`` is (m, d), ``k`` and ``v`` are (n, d) and (n, dv).
    """
    q, k, v = as_diff(q), as_diff(k), as_diff(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention operands must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query/key widths disagree: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key/value counts disagree: {k.shape} vs {v.shape}")
    # scale q before the big matmul: same math, one (m, n) temporary fewer
    scores = matmul(mul(q, 1.0 / np.sqrt(q.shape[1])), transpose(k))
    return matmul(softmax_rows(scores), v)


def grad_check(f: Callable[[], DiffArray], params: Sequence[DiffArray], step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` rebuilds the scalar loss from scratch on every call, closing over
    ``params``. Error per coordinate is |analytic - central| / max(1, |central|);
    the max over every coordinate of every parameter is returned.
    """
    for p in params:
        p.grad = None
    out = f()
    if out.size != 1:
        raise ShapeError("grad_check needs a scalar objective")
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.values) for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.values.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            f_plus = f().item()
            flat[i] = saved - step
            f_minus = f().item()
            flat[i] = saved
            central = (f_plus - f_minus) / (2.0 * step)
            err = abs(gflat[i] - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    return worst
