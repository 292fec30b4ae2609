"""Reverse-mode value-and-gradient engine over dense 2-D float64 matrices.

Every value is a (rows, cols) float64 array; scalars are 1x1. Ops build a
computation graph and ``Tensor.backward()`` runs reverse accumulation,
filling ``.grad`` on every tensor that participated. The op set is small on
purpose: exactly what the losses in this package need. Limited broadcasting
is supported for elementwise ops (one operand may be 1x1, 1xC or Rx1).

log-sigmoid is never formed directly: use ``-softplus(-x)``, which stays
finite for large |x|.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """A value or gradient stopped being finite."""


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ShapeMismatchError(
            f"tensors are 2-D matrices, got array of shape {arr.shape}"
        )
    return arr


class Tensor:
    """Node in the computation graph: a dense matrix plus a gradient slot."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents",
                 "_backward", "_needs", "_grad_owned")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = _as_matrix(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._needs = self.requires_grad
        self._grad_owned = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeMismatchError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def accumulate(self, g: np.ndarray) -> None:
        # adopt the first incoming buffer without copying; later arrivals
        # promote to an owned array (incoming buffers may be views or shared
        # between siblings, so they are never mutated in place)
        if not self._needs:
            return
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self) -> None:
        """Reverse accumulation from this (scalar) tensor."""
        if self.value.size != 1:
            raise ShapeMismatchError(
                f"backward() starts from a scalar loss, got shape {self.shape}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        if not self._needs:
            return  # no parameter participates in this graph
        self.accumulate(np.ones_like(self.value))
        for node in reversed(order):
            if node._backward is not None and node._needs and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all semantics live in the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=False, name=name)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _make(value, parents, backward_fn) -> Tensor:
    out = Tensor(value)
    out._parents = tuple(parents)
    out._backward = backward_fn
    out._needs = any(p._needs for p in out._parents)
    return out


def _broadcast_check(sa, sb, op: str) -> tuple[int, int]:
    out = []
    for da, db in zip(sa, sb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeMismatchError(f"{op}: incompatible shapes {sa} and {sb}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a.shape, b.shape, "add")

    def backward(g):
        if a._needs:
            a.accumulate(_unbroadcast(g, a.shape))
        if b._needs:
            b.accumulate(_unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a.shape, b.shape, "sub")

    def backward(g):
        if a._needs:
            a.accumulate(_unbroadcast(g, a.shape))
        if b._needs:
            b.accumulate(_unbroadcast(-g, b.shape))

    return _make(a.value - b.value, (a, b), backward)


def neg(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        a.accumulate(-g)

    return _make(-a.value, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a.shape, b.shape, "mul")

    def backward(g):
        if a._needs:
            a.accumulate(_unbroadcast(g * b.value, a.shape))
        if b._needs:
            b.accumulate(_unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check(a.shape, b.shape, "div")

    def backward(g):
        if a._needs:
            a.accumulate(_unbroadcast(g / b.value, a.shape))
        if b._needs:
            b.accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.shape))

    return _make(a.value / b.value, (a, b), backward)


def scale(a, factor: float) -> Tensor:
    a = _lift(a)
    factor = float(factor)

    def backward(g):
        a.accumulate(factor * g)

    return _make(factor * a.value, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a._needs:
            a.accumulate(g @ b.value.T)
        if b._needs:
            b.accumulate(a.value.T @ g)

    return _make(a.value @ b.value, (a, b), backward)


def transpose(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        a.accumulate(g.T)

    return _make(a.value.T.copy(), (a,), backward)


def gather_rows(a, indices) -> Tensor:
    """Select rows of ``a``; duplicates accumulate in the backward pass."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeMismatchError(
            f"gather_rows: index out of range for {a.shape[0]} rows"
        )

    def backward(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        a.accumulate(out)

    return _make(a.value[idx], (a,), backward)


def gather_cells(a, rows, cols) -> Tensor:
    """Select entries a[rows[i], cols[i]] as an (m, 1) column; duplicate
    cells accumulate in the backward pass."""
    a = _lift(a)
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    if rows.shape != cols.shape:
        raise ShapeMismatchError(
            f"gather_cells: index shapes differ, {rows.shape} vs {cols.shape}"
        )
    nr, nc = a.shape
    if rows.size and (
        rows.min() < 0 or rows.max() >= nr or cols.min() < 0 or cols.max() >= nc
    ):
        raise ShapeMismatchError(f"gather_cells: index out of range for shape {a.shape}")

    def backward(g):
        out = np.zeros_like(a.value)
        np.add.at(out, (rows, cols), g[:, 0])
        a.accumulate(out)

    return _make(a.value[rows, cols].reshape(-1, 1), (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp never overflows on the clipped range and saturation is exact there
    ex = np.exp(np.clip(x, -709.0, 709.0))
    return ex / (1.0 + ex)


def _softplus_decayed(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(softplus(x), exp(-|x|)); the decay term is reused by the backward."""
    decay = np.exp(-np.abs(x))
    return np.maximum(x, 0.0) + np.log1p(decay), decay


def _softplus(x: np.ndarray) -> np.ndarray:
    return _softplus_decayed(x)[0]


def sigmoid(a) -> Tensor:
    a = _lift(a)
    s = _sigmoid(a.value)

    def backward(g):
        a.accumulate(g * s * (1.0 - s))

    return _make(s, (a,), backward)


def softplus(a) -> Tensor:
    a = _lift(a)
    value, decay = _softplus_decayed(a.value)
    nonneg = a.value >= 0

    def backward(g):
        # sigmoid(x) from the cached decay: 1/(1+e) for x>=0, e/(1+e) below
        sig = np.where(nonneg, 1.0 / (1.0 + decay), decay / (1.0 + decay))
        a.accumulate(g * sig)

    return _make(value, (a,), backward)


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.value <= 0):
        raise ValueError("log: nonpositive input")

    def backward(g):
        a.accumulate(g / a.value)

    return _make(np.log(a.value), (a,), backward)


def sqrt(a) -> Tensor:
    a = _lift(a)
    if np.any(a.value < 0):
        raise ValueError("sqrt: negative input")
    r = np.sqrt(a.value)

    def backward(g):
        a.accumulate(g / (2.0 * r))

    return _make(r, (a,), backward)


def square(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        a.accumulate(2.0 * g * a.value)

    return _make(a.value * a.value, (a,), backward)


def powc(a, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent; input must be positive."""
    a = _lift(a)
    exponent = float(exponent)
    if np.any(a.value <= 0):
        raise ValueError("powc: nonpositive base")
    v = a.value ** exponent

    def backward(g):
        a.accumulate(g * exponent * a.value ** (exponent - 1.0))

    return _make(v, (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        a.accumulate(np.full_like(a.value, g[0, 0]))

    return _make(a.value.sum(), (a,), backward)


def reduce_mean(a) -> Tensor:
    a = _lift(a)
    n = a.value.size

    def backward(g):
        a.accumulate(np.full_like(a.value, g[0, 0] / n))

    return _make(a.value.mean(), (a,), backward)


def row_sum(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        a.accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(a.value.sum(axis=1, keepdims=True), (a,), backward)


def rowwise_inner(a, b) -> Tensor:
    """Per-row inner product of two equal-shape matrices, as an (n, 1) column."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(
            f"rowwise_inner: incompatible shapes {a.shape} and {b.shape}"
        )
    return row_sum(mul(a, b))


def frobenius_sq(a) -> Tensor:
    """Sum of squared entries, as a 1x1 tensor."""
    return sum_all(square(a))


def solve_psd(a, b) -> Tensor:
    """Differentiable X = A^{-1} B for symmetric positive-definite A.

    The Cholesky factor from the forward pass is reused in the backward
    pass, so gradients cost one extra triangular solve.
    """
    a, b = _lift(a), _lift(b)
    if a.shape[0] != a.shape[1] or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"solve_psd: incompatible shapes {a.shape} and {b.shape}")
    factor = scipy.linalg.cho_factor(a.value)
    x = scipy.linalg.cho_solve(factor, b.value)

    def backward(g):
        gb = scipy.linalg.cho_solve(factor, g)
        if b._needs:
            b.accumulate(gb)
        if a._needs:
            a.accumulate(-gb @ x.T)

    return _make(x, (a, b), backward)


# ---------------------------------------------------------------------------
# optimization and checking

DEFAULT_LEARNING_RATE_GRID = (0.1, 0.01, 0.001)


@dataclass
class OptimizerState:
    """Plain SGD state. Learning-rate sweeps use DEFAULT_LEARNING_RATE_GRID."""

    learning_rate: float
    step_count: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def sgd_step(params, state: OptimizerState) -> None:
    """p <- p - lr * grad for each param; gradients are cleared afterwards."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter {p.name or i} has no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {p.name or i}")
        p.value -= state.learning_rate * p.grad
    for p in params:
        p.grad = None
    state.step_count += 1


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    n_entries: int
    passed: bool
    per_param: dict = field(default_factory=dict)


# Entries whose analytic+numeric magnitude falls below this floor are held to
# absolute error <= tolerance * floor instead of a pure relative test.
_REL_FLOOR = 1e-4


def grad_check(loss_fn, params, epsilon: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Central finite differences vs. reverse-mode gradients.

    ``loss_fn`` must rebuild the computation graph from the current values of
    ``params`` on every call and be deterministic (freeze any random draws
    before checking). Parameter values are restored on exit.
    """
    params = list(params)
    zero_grads(params)
    loss = loss_fn()
    if not np.isfinite(loss.value).all():
        raise NonFiniteError("loss is not finite at the checked point")
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.value) for p in params]
    zero_grads(params)

    worst = 0.0
    worst_name = ""
    per_param = {}
    n_entries = 0
    for p, ana in zip(params, analytic):
        name = p.name or f"param{params.index(p)}"
        p_worst = 0.0
        flat = p.value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            up = loss_fn().item()
            flat[j] = orig - epsilon
            down = loss_fn().item()
            flat[j] = orig
            numeric = (up - down) / (2.0 * epsilon)
            a = ana.reshape(-1)[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), _REL_FLOOR)
            p_worst = max(p_worst, rel)
            n_entries += 1
        per_param[name] = p_worst
        if p_worst > worst:
            worst, worst_name = p_worst, name
    return GradCheckReport(
        max_rel_error=worst,
        worst_param=worst_name,
        n_entries=n_entries,
        passed=worst <= tolerance,
        per_param=per_param,
    )
