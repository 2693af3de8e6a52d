"""Reverse-mode differentiation over dense float64 matrices.

Design notes:

* Every value is a 2-D matrix; scalars are 1x1. There is no broadcasting
  beyond explicit scalar-times-matrix (`smul`) and row-vector addition
  (`add_rowvec`), so shape bugs fail loudly.
* Backward rules are themselves built from primitives recorded on the same
  tape. Gradients are therefore ordinary tape tensors and can be
  differentiated again, which is what makes unrolled inner-loop training
  differentiable end to end without any special casing.
* A tape is append-only, so node ids are already topologically ordered.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NotScalarLoss, ShapeMismatch

Array = np.ndarray


def _as_matrix(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeMismatch("tensor", f"expected at most 2 dimensions, got {a.ndim}")
    return np.ascontiguousarray(a)


class Tensor:
    """Dense matrix, optionally attached to a tape node."""

    __slots__ = ("value", "tape", "node")

    def __init__(self, value, tape: "Tape | None" = None, node: int | None = None):
        self.value = _as_matrix(value)
        self.tape = tape
        self.node = node

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def data(self) -> Array:
        """Row-major flat view of the values."""
        return self.value.reshape(-1)

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeMismatch("item", f"expected 1x1, got {self.shape}")
        return float(self.value[0, 0])

    def detach(self) -> "Tensor":
        """Value-only copy with no tape attachment."""
        return Tensor(self.value.copy())

    def __repr__(self):
        tag = f" node={self.node}" if self.node is not None else ""
        return f"Tensor({self.rows}x{self.cols}{tag})"

    # A few operators for readability; all route through the primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("inputs", "vjp", "is_param")

    def __init__(self, inputs: tuple[int, ...], vjp, is_param: bool):
        self.inputs = inputs
        self.vjp = vjp
        self.is_param = is_param


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: list[Tensor] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, value: Array, inputs: tuple[int, ...], vjp, is_param=False) -> Tensor:
        nid = len(self.nodes)
        self.nodes.append(_Node(inputs, vjp, is_param))
        t = Tensor(value, self, nid)
        if is_param:
            self.params.append(t)
        return t

    def param(self, value) -> Tensor:
        """Leaf marked as a differentiation target."""
        return self._append(_as_matrix(value).copy(), (), None, is_param=True)

    def const(self, value) -> Tensor:
        """Leaf excluded from differentiation."""
        return self._append(_as_matrix(value), (), None, is_param=False)

    def grad(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
        return _sweep(loss, wrt)


def _lift(tape: Tape, x) -> Tensor:
    """Coerce x onto tape: pass through attached tensors, wrap the rest as consts."""
    if isinstance(x, Tensor):
        if x.tape is tape:
            return x
        if x.tape is None:
            return tape.const(x.value)
        raise ShapeMismatch("lift", "tensor belongs to a different live tape")
    return tape.const(x)


def _pair(a, b, primitive: str) -> tuple[Tensor, Tensor, Tape]:
    if isinstance(a, Tensor) and a.tape is not None:
        tape = a.tape
    elif isinstance(b, Tensor) and b.tape is not None:
        tape = b.tape
    else:
        raise ShapeMismatch(primitive, "at least one operand must live on a tape")
    return _lift(tape, a), _lift(tape, b), tape


# --- primitives ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b, tape = _pair(a, b, "matmul")
    if a.cols != b.rows:
        raise ShapeMismatch("matmul", f"{a.rows}x{a.cols} @ {b.rows}x{b.cols}")

    def vjp(g):
        return (matmul(g, transpose(b)), matmul(transpose(a), g))

    return tape._append(a.value @ b.value, (a.node, b.node), vjp)


def transpose(a: Tensor) -> Tensor:
    tape = a.tape

    def vjp(g):
        return (transpose(g),)

    return tape._append(np.ascontiguousarray(a.value.T), (a.node,), vjp)


def add(a, b) -> Tensor:
    a, b, tape = _pair(a, b, "add")
    if a.shape != b.shape:
        raise ShapeMismatch("add", f"{a.shape} vs {b.shape}")

    def vjp(g):
        return (g, g)

    return tape._append(a.value + b.value, (a.node, b.node), vjp)


def sub(a, b) -> Tensor:
    a, b, tape = _pair(a, b, "sub")
    if a.shape != b.shape:
        raise ShapeMismatch("sub", f"{a.shape} vs {b.shape}")

    def vjp(g):
        return (g, scale(g, -1.0))

    return tape._append(a.value - b.value, (a.node, b.node), vjp)


def mul(a, b) -> Tensor:
    """Elementwise product of same-shape matrices."""
    a, b, tape = _pair(a, b, "mul")
    if a.shape != b.shape:
        raise ShapeMismatch("mul", f"{a.shape} vs {b.shape}")

    def vjp(g):
        return (mul(g, b), mul(g, a))

    return tape._append(a.value * b.value, (a.node, b.node), vjp)


def div(a, b) -> Tensor:
    """Elementwise quotient of same-shape matrices."""
    a, b, tape = _pair(a, b, "div")
    if a.shape != b.shape:
        raise ShapeMismatch("div", f"{a.shape} vs {b.shape}")

    def vjp(g):
        return (div(g, b), scale(mul(g, div(a, mul(b, b))), -1.0))

    return tape._append(a.value / b.value, (a.node, b.node), vjp)


def smul(s, a) -> Tensor:
    """Scalar (1x1 tensor) times matrix."""
    s, a, tape = _pair(s, a, "smul")
    if s.shape != (1, 1):
        raise ShapeMismatch("smul", f"scalar operand must be 1x1, got {s.shape}")

    def vjp(g):
        return (tsum(mul(g, a)), smul(s, g))

    return tape._append(s.value[0, 0] * a.value, (s.node, a.node), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    tape = a.tape
    c = float(c)

    def vjp(g):
        return (scale(g, c),)

    return tape._append(c * a.value, (a.node,), vjp)


def add_rowvec(a, r) -> Tensor:
    """Add a 1xC row vector to every row of an NxC matrix."""
    a, r, tape = _pair(a, r, "add_rowvec")
    if r.rows != 1 or r.cols != a.cols:
        raise ShapeMismatch("add_rowvec", f"{a.shape} + {r.shape}")

    def vjp(g):
        ones_row = tape.const(np.ones((1, a.rows)))
        return (g, matmul(ones_row, g))

    return tape._append(a.value + r.value, (a.node, r.node), vjp)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a 1x1 tensor."""
    tape = a.tape

    def vjp(g):
        return (smul(g, tape.const(np.ones(a.shape))),)

    return tape._append(np.array([[a.value.sum()]]), (a.node,), vjp)


def trace(a: Tensor) -> Tensor:
    tape = a.tape
    if a.rows != a.cols:
        raise ShapeMismatch("trace", f"matrix must be square, got {a.shape}")

    def vjp(g):
        return (smul(g, tape.const(np.eye(a.rows))),)

    return tape._append(np.array([[np.trace(a.value)]]), (a.node,), vjp)


def frobenius_norm_sq(a: Tensor) -> Tensor:
    tape = a.tape

    def vjp(g):
        return (smul(g, scale(a, 2.0)),)

    return tape._append(np.array([[float(np.sum(a.value * a.value))]]), (a.node,), vjp)


def _sigmoid_vjp_rule(out: Tensor, g: Tensor) -> Tensor:
    ones = out.tape.const(np.ones(out.shape))
    return mul(mul(out, sub(ones, out)), g)


def sigmoid(a: Tensor) -> Tensor:
    tape = a.tape
    # 1/(1+exp(-x)) evaluated stably on both tails
    x = a.value
    val = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (_sigmoid_vjp_rule(out, g),)

    out = tape._append(val, (a.node,), vjp)
    return out


def relu(a: Tensor) -> Tensor:
    tape = a.tape
    mask = (a.value > 0).astype(np.float64)

    def vjp(g):
        return (mul(g, tape.const(mask)),)

    return tape._append(np.maximum(a.value, 0.0), (a.node,), vjp)


def texp(a: Tensor) -> Tensor:
    tape = a.tape

    def vjp(g):
        return (mul(g, out),)

    out = tape._append(np.exp(a.value), (a.node,), vjp)
    return out


def powf(a: Tensor, p: float) -> Tensor:
    """Elementwise power with a fixed float exponent; entries must stay positive
    when p is not a nonnegative integer."""
    tape = a.tape
    p = float(p)

    def vjp(g):
        return (scale(mul(powf(a, p - 1.0), g), p),)

    return tape._append(np.power(a.value, p), (a.node,), vjp)


def clamp_min(a: Tensor, c: float) -> Tensor:
    tape = a.tape
    c = float(c)
    mask = (a.value > c).astype(np.float64)

    def vjp(g):
        return (mul(g, tape.const(mask)),)

    return tape._append(np.maximum(a.value, c), (a.node,), vjp)


def log_softmax_rows(a: Tensor) -> Tensor:
    """Row-wise log-softmax, stabilized by max subtraction."""
    tape = a.tape
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    val = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def vjp(g):
        sm = texp(out)
        ones_col = tape.const(np.ones((a.cols, 1)))
        ones_row = tape.const(np.ones((1, a.cols)))
        row_sums = matmul(matmul(g, ones_col), ones_row)
        return (sub(g, mul(sm, row_sums)),)

    out = tape._append(val, (a.node,), vjp)
    return out


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    tape = a.tape
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or (len(idx) and (idx.min() < 0 or idx.max() >= a.rows)):
        raise ShapeMismatch("gather_rows", f"indices out of range for {a.rows} rows")

    def vjp(g):
        return (scatter_rows(g, idx, a.rows),)

    return tape._append(a.value[idx, :], (a.node,), vjp)


def scatter_rows(a: Tensor, indices: Sequence[int], n_rows: int) -> Tensor:
    """Scatter-add rows of a into an n_rows-tall zero matrix."""
    tape = a.tape
    idx = np.asarray(indices, dtype=np.int64)
    if len(idx) != a.rows:
        raise ShapeMismatch("scatter_rows", f"{len(idx)} indices for {a.rows} rows")
    val = np.zeros((n_rows, a.cols))
    np.add.at(val, idx, a.value)

    def vjp(g):
        return (gather_rows(g, idx),)

    return tape._append(val, (a.node,), vjp)


def segment_sum_rows(a: Tensor, segment_ids: Sequence[int], n_segments: int) -> Tensor:
    """Row-sum pooling keyed by segment membership (graph ids)."""
    return scatter_rows(a, segment_ids, n_segments)


def mean_rows(a: Tensor) -> Tensor:
    tape = a.tape

    def vjp(g):
        col = tape.const(np.full((a.rows, 1), 1.0 / a.rows))
        return (matmul(col, g),)

    return tape._append(a.value.mean(axis=0, keepdims=True), (a.node,), vjp)


# --- backward sweep -----------------------------------------------------------

def _sweep(loss: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    tape = loss.tape
    if tape is None or loss.node is None:
        raise NotScalarLoss("loss is not attached to a tape")
    if loss.shape != (1, 1):
        raise NotScalarLoss(f"loss must be 1x1, got {loss.shape}")
    for t in wrt:
        if t.tape is not tape:
            raise ShapeMismatch("grad", "target tensor lives on a different tape")

    target_ids = {t.node for t in wrt}

    # Mark nodes through which a target can reach the loss; the sweep only
    # propagates adjoints through marked nodes, which keeps per-step inner
    # gradients from re-walking the entire unrolled history.
    needed: dict[int, bool] = {}
    stack = [loss.node]
    order = []
    while stack:
        nid = stack.pop()
        if nid in needed:
            continue
        needed[nid] = False
        order.append(nid)
        stack.extend(tape.nodes[nid].inputs)
    for nid in sorted(order):
        node = tape.nodes[nid]
        needed[nid] = nid in target_ids or any(needed.get(i, False) for i in node.inputs)

    pending: dict[int, list[Tensor]] = {loss.node: [tape.const(np.ones((1, 1)))]}
    grads: dict[int, Tensor] = {}
    lowest = min(target_ids) if target_ids else loss.node
    for nid in range(loss.node, lowest - 1, -1):
        parts = pending.pop(nid, None)
        if parts is None or not needed.get(nid, False):
            continue
        g = parts[0]
        for extra in parts[1:]:
            g = add(g, extra)
        if nid in target_ids:
            grads[nid] = g
        node = tape.nodes[nid]
        if node.vjp is None:
            continue
        for iid, gin in zip(node.inputs, node.vjp(g)):
            if gin is not None and needed.get(iid, False):
                pending.setdefault(iid, []).append(gin)

    out = []
    for t in wrt:
        if t.node in grads:
            out.append(grads[t.node])
        else:
            out.append(tape.const(np.zeros(t.shape)))
    return out


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of a scalar loss w.r.t. the given tape tensors.

    The returned tensors live on the same tape, so they can be fed back into
    further primitives (unrolled optimization) or differentiated again.
    """
    return _sweep(loss, wrt)


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Gradient map {node_id: Tensor} for every leaf marked as a parameter."""
    if not tape.params:
        return {}
    grads = _sweep(loss, tape.params)
    return {t.node: g for t, g in zip(tape.params, grads)}


# --- finite-difference oracle ---------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x0, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must build a scalar tape expression from the parameter tensor it is
    given; it is re-evaluated at perturbed inputs on throwaway tapes.
    """
    x0 = _as_matrix(x0)

    def value_at(x: Array) -> float:
        tape = Tape()
        return f(tape.param(x)).item()

    tape = Tape()
    p = tape.param(x0)
    loss = f(p)
    analytic = grad(loss, [p])[0].value

    worst = 0.0
    numeric = np.zeros_like(x0)
    for i in range(x0.shape[0]):
        for j in range(x0.shape[1]):
            e = np.zeros_like(x0)
            e[i, j] = h
            numeric[i, j] = (value_at(x0 + e) - value_at(x0 - e)) / (2 * h)
            err = abs(analytic[i, j] - numeric[i, j]) / max(1.0, abs(numeric[i, j]))
            worst = max(worst, err)
    return worst
