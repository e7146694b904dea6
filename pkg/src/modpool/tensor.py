"""A small define-by-run reverse-mode differentiation engine over numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its operands and
a local backward rule. :func:`backward` walks the resulting graph once in
reverse topological order. Values are float32 unless a :func:`precision`
block requests otherwise (the gradient checker runs in float64).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels as K


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class DeterminismError(RuntimeError):
    """Two evaluations of a supposedly deterministic function disagreed."""


_DTYPE = [np.float32]


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are cast to."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        arr = np.asarray(data, dtype=default_dtype())
        if requires_grad and not _parents and not np.all(np.isfinite(arr)):
            raise ValueError("non-finite value in parameter tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, rule, op) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=rule, op=op)


@dataclass
class Graph:
    """Operations reachable from a root, in topological order (operands first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
        return cls(order)


def backward(loss: Tensor, inputs: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves listed in ``inputs`` that do not influence ``loss`` get a zero
    gradient rather than ``None``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        graph = Graph.trace(loss)
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(graph.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    for t in inputs:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    backward(loss, params)
    return [p.grad for p in params]


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D @ 2-D or 1-D @ 2-D operands."""
    if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def rule(g):
        if A.ndim == 1:
            return g @ B.T, np.outer(A, g)
        return g @ B.T, A.T @ g

    return _result(A @ B, (a, b), rule, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector added to every row of ``a``."""
    A, B = a.data, b.data
    if A.shape == B.shape:
        return _result(A + B, (a, b), lambda g: (g, g), "add")
    if A.ndim == 2 and B.ndim == 1 and B.shape[0] == A.shape[1]:
        return _result(A + B, (a, b), lambda g: (g, g.sum(axis=0)), "add")
    if B.ndim == 0:
        return _result(A + B, (a, b), lambda g: (g, np.asarray(g.sum(), dtype=g.dtype)), "add")
    raise DimensionError(f"add: incompatible shapes {A.shape} and {B.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.shape == B.shape:
        return _result(A * B, (a, b), lambda g: (g * B, g * A), "mul")
    if A.ndim == 2 and B.ndim == 1 and B.shape[0] == A.shape[1]:
        return _result(A * B, (a, b), lambda g: (g * B, (g * A).sum(axis=0)), "mul")
    if B.ndim == 0:
        return _result(A * B, (a, b), lambda g: (g * B, np.asarray((g * A).sum(), dtype=g.dtype)), "mul")
    raise DimensionError(f"mul: incompatible shapes {A.shape} and {B.shape}")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar."""
    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                   lambda g: (np.full_like(x.data, g),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(total(x), 1.0 / n)


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise mean of an (n, d) tensor."""
    if x.ndim != 2:
        raise DimensionError(f"mean_rows expects a 2-D tensor, got {x.shape}")
    n = x.shape[0]
    if n == 0:
        raise ContractError("mean_rows of an empty tensor")
    inv = x.data.dtype.type(1.0 / n)
    return _result(x.data.mean(axis=0).astype(x.data.dtype), (x,),
                   lambda g: (np.broadcast_to(g * inv, x.data.shape).copy(),), "mean_rows")


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[start:stop]`` along the first axis."""
    shape = x.data.shape

    def rule(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[start:stop] = g
        return (out,)

    return _result(x.data[start:stop], (x,), rule, "rows")


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization (zero mean, unit variance) without affine terms."""
    y, inv = K.layernorm(np.ascontiguousarray(x.data), eps)
    return _result(y, (x,), lambda g: (K.layernorm_grad(np.ascontiguousarray(g), y, inv),), "layer_norm")


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis of a 1-D or 2-D tensor."""
    if x.ndim == 1:
        y = K.log_softmax(np.ascontiguousarray(x.data[None, :]))[0]
        return _result(y, (x,), lambda g: (K.log_softmax_grad(np.ascontiguousarray(g[None, :]), y[None, :])[0],), "log_softmax")
    if x.ndim != 2:
        raise DimensionError(f"log_softmax expects 1-D or 2-D input, got {x.shape}")
    y = K.log_softmax(np.ascontiguousarray(x.data))
    return _result(y, (x,), lambda g: (K.log_softmax_grad(np.ascontiguousarray(g), y),), "log_softmax")


def cross_entropy(logits: Tensor, label) -> Tensor:
    """Negative log-likelihood of ``label`` under softmax(``logits``).

    For 1-D logits ``label`` is a single class index; for 2-D logits it is
    one index per row and the mean over rows is returned.
    """
    n = logits.shape[-1]
    labels = np.atleast_1d(np.asarray(label))
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= n):
        raise IndexError(f"label {label!r} out of range for {n} classes")
    logp = log_softmax(logits)
    if logits.ndim == 1:
        idx = int(labels[0])
        out = -logp.data[idx]

        def rule(g):
            gl = np.zeros_like(logp.data)
            gl[idx] = -g
            return (gl,)

        return _result(np.asarray(out, dtype=logp.data.dtype), (logp,), rule, "nll")
    m = logits.shape[0]
    if labels.shape != (m,):
        raise DimensionError(f"cross_entropy: {m} rows but {labels.shape[0]} labels")
    picked = logp.data[np.arange(m), labels]
    inv = logp.data.dtype.type(1.0 / m)

    def rule(g):
        gl = np.zeros_like(logp.data)
        gl[np.arange(m), labels] = -g * inv
        return (gl,)

    return _result(np.asarray(-picked.mean(), dtype=logp.data.dtype), (logp,), rule, "nll")


def pairwise_sq_dist(queries: Tensor, prototypes: Tensor) -> Tensor:
    """Squared euclidean distances between every query row and every prototype row."""
    if queries.ndim != 2 or prototypes.ndim != 2 or queries.shape[1] != prototypes.shape[1]:
        raise DimensionError(
            f"pairwise_sq_dist: feature dims differ, {queries.shape} vs {prototypes.shape}")
    Q = np.ascontiguousarray(queries.data)
    P = np.ascontiguousarray(prototypes.data)
    return _result(K.sqdist(Q, P), (queries, prototypes),
                   lambda g: K.sqdist_grad(np.ascontiguousarray(g), Q, P), "sqdist")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One Adam update, applied in place to ``params`` and ``state``."""
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} accumulators")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"adam_step: param {p.shape}, grad {g.shape}, state {m.shape}")
    state.t += 1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        K.adam_update(p, np.ascontiguousarray(g, dtype=p.dtype), m, v,
                      state.lr, state.beta1, state.beta2, state.eps, state.t)
    return params, state


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(f: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-3) -> float:
    """Max relative error between backprop and central differences.

    ``f`` takes one Tensor per entry of ``inputs`` and returns a scalar.
    Both routes run in float64 so the comparison measures the backward
    rules, not float32 rounding.
    """
    with precision(np.float64):
        base = [np.array(getattr(x, "data", x), dtype=np.float64) for x in inputs]

        def value(arrays):
            return float(f(*[Tensor(a) for a in arrays]).data)

        first, second = value(base), value(base)
        if first != second:
            raise DeterminismError(f"f is not deterministic: {first!r} != {second!r}")

        leaves = [Tensor(a, requires_grad=True) for a in base]
        out = f(*leaves)
        if out.data.size != 1:
            raise ContractError("grad_check needs a scalar-valued function")
        analytic = gradients(out, leaves)

        worst = 0.0
        for k, arr in enumerate(base):
            flat = arr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = value(base)
                flat[i] = orig - eps
                lo = value(base)
                flat[i] = orig
                numeric = (hi - lo) / (2 * eps)
                a = float(analytic[k].reshape(-1)[i])
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, err)
        return worst
