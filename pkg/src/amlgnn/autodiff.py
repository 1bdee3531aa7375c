"""Dense tensors with reverse-mode automatic differentiation.

Define-by-run: a :class:`Tape` is opened for each forward pass (``with
Tape():``) and every differentiable op appends its output together with a
backward rule. ``backward(loss)`` replays the records in reverse order,
accumulating gradients into the ``grad`` buffer of every parameter that the
loss depends on. Repeated backward calls accumulate; the trainer zeroes
parameter gradients at the start of each step.

All values are float64, 1-D or 2-D. Dense kernels are numpy; the sparse
aggregation used by message passing (:func:`spmm`, :func:`neighbor_max`,
:func:`segment_softmax`) runs over CSR structure, with scipy.sparse doing the
actual sparse-times-dense products.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidProbability, NotScalar, ShapeMismatch
from .rng import RngStream

_LOCAL = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = _LOCAL.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of one forward pass; replayed in reverse by backward."""

    __slots__ = ("_records",)

    def __init__(self):
        # list of (output tensor, rule); rule(upstream) -> [(input, grad), ...]
        self._records: list[tuple["Tensor", object]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise NotScalar(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, rule in reversed(self._records):
            upstream = pending.pop(id(out), None)
            if upstream is None:
                continue
            for tensor, grad in rule(upstream):
                if grad is None:
                    continue
                if tensor.requires_grad:
                    tensor.grad += grad
                elif tensor._traced:
                    key = id(tensor)
                    if key in pending:
                        pending[key] = pending[key] + grad
                    else:
                        pending[key] = grad


class Tensor:
    """Float64 array (1-D or 2-D) participating in autodiff.

    Parameters (``requires_grad=True``) always own a gradient buffer.
    """

    __slots__ = ("data", "grad", "requires_grad", "_traced", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim > 2:
            raise ShapeMismatch(f"tensors are 1-D or 2-D, got ndim={arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._traced = False
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = ", param" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def backward(loss: Tensor) -> None:
    """Populate gradient buffers of everything the scalar loss depends on."""
    if loss._tape is None:
        raise ValueError("loss does not lie on a tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad or t._traced for t in inputs):
        out._traced = True
        out._tape = tape
        tape._records.append((out, rule))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data + b.data

    def rule(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _emit(data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data - b.data

    def rule(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _emit(data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data * b.data

    def rule(g):
        return [(a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))]

    return _emit(data, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data / b.data

    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return [(a, ga), (b, gb)]

    return _emit(data, (a, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: [(x, g * c)])


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)
    return _emit(data, (x,), lambda g: [(x, g * (0.5 / data))])


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: [(x, g * mask)])


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)
    return _emit(x.data * factor, (x,), lambda g: [(x, g * factor)])


def concat_rows(*tensors: Tensor) -> Tensor:
    parts = [_lift(t) for t in tensors]
    widths = {p.data.shape[-1] if p.data.ndim == 2 else 1 for p in parts}
    if len(widths) != 1:
        raise ShapeMismatch("concat_rows needs equal column counts")
    data = np.concatenate([p.data for p in parts], axis=0)
    edges = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def rule(g):
        return [(p, g[edges[i] : edges[i + 1]]) for i, p in enumerate(parts)]

    return _emit(data, tuple(parts), rule)


def concat_cols(*tensors: Tensor) -> Tensor:
    parts = [_lift(t) for t in tensors]
    if any(p.data.ndim != 2 for p in parts):
        raise ShapeMismatch("concat_cols needs 2-D tensors")
    if len({p.data.shape[0] for p in parts}) != 1:
        raise ShapeMismatch("concat_cols needs equal row counts")
    data = np.concatenate([p.data for p in parts], axis=1)
    edges = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def rule(g):
        return [(p, g[:, edges[i] : edges[i + 1]]) for i, p in enumerate(parts)]

    return _emit(data, tuple(parts), rule)


def row_select(x: Tensor, index) -> Tensor:
    """Gather rows by integer index array or boolean mask."""
    idx = np.asarray(index)
    if idx.dtype == bool:
        if idx.shape[0] != x.data.shape[0]:
            raise ShapeMismatch("mask length must match row count")
        idx = np.flatnonzero(idx)
    data = x.data[idx]

    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return [(x, full)]

    return _emit(data, (x,), rule)


def flatten(x: Tensor) -> Tensor:
    shape = x.data.shape
    return _emit(x.data.reshape(-1), (x,), lambda g: [(x, g.reshape(shape))])


def reduce_sum(x: Tensor) -> Tensor:
    data = np.array([[x.data.sum()]])
    return _emit(data, (x,), lambda g: [(x, np.full_like(x.data, g[0, 0]))])


def reduce_mean(x: Tensor) -> Tensor:
    """Per-column mean of a 2-D tensor, shape (1, d)."""
    if x.data.ndim != 2:
        raise ShapeMismatch("reduce_mean expects a 2-D tensor")
    n = x.data.shape[0]
    data = x.data.mean(axis=0, keepdims=True)
    return _emit(data, (x,), lambda g: [(x, np.broadcast_to(g / n, x.data.shape).copy())])


def reduce_var(x: Tensor) -> Tensor:
    """Per-column population variance of a 2-D tensor, shape (1, d)."""
    if x.data.ndim != 2:
        raise ShapeMismatch("reduce_var expects a 2-D tensor")
    n = x.data.shape[0]
    centered = x.data - x.data.mean(axis=0, keepdims=True)
    data = (centered * centered).mean(axis=0, keepdims=True)
    return _emit(data, (x,), lambda g: [(x, g * (2.0 / n) * centered)])


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor."""
    if x.data.ndim != 2:
        raise ShapeMismatch("log_softmax expects a 2-D tensor")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def rule(g):
        return [(x, g - np.exp(data) * g.sum(axis=1, keepdims=True))]

    return _emit(data, (x,), rule)


def dropout(x: Tensor, p: float, rng: RngStream, training: bool) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity when not training or p == 0. The mask comes from `rng`, so the
    same stream reproduces the same mask.
    """
    if not 0.0 <= p < 1.0:
        raise InvalidProbability(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = rng.generator().random(x.data.shape) >= p
    factor = keep / (1.0 - p)
    return _emit(x.data * factor, (x,), lambda g: [(x, g * factor)])


# ---------------------------------------------------------------------------
# dense matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul shapes {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def rule(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _emit(data, (a, b), rule)


# ---------------------------------------------------------------------------
# sparse / segment ops over CSR structure


@dataclass
class SparseAdj:
    """CSR adjacency over N nodes, with an optional per-edge-slot coefficient.

    Coefficients may be a plain array (fixed aggregation weights) or a Tensor
    (differentiable, e.g. attention weights).
    """

    offsets: np.ndarray
    indices: np.ndarray
    num_nodes: int
    coeffs: np.ndarray | Tensor | None = None
    _rows: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.coeffs is not None:
            vals = self.coeffs.data if isinstance(self.coeffs, Tensor) else self.coeffs
            if vals.reshape(-1).shape[0] != self.indices.shape[0]:
                raise ShapeMismatch("coefficient array length must match stored edge slots")

    @property
    def rows(self) -> np.ndarray:
        """Slot -> row map (the i of each stored (i, j) slot)."""
        if self._rows is None:
            degrees = np.diff(self.offsets)
            self._rows = np.repeat(np.arange(self.num_nodes, dtype=np.int64), degrees)
        return self._rows

    def with_coeffs(self, coeffs) -> "SparseAdj":
        return SparseAdj(self.offsets, self.indices, self.num_nodes, coeffs, self._rows)


def _csr_matrix(adj: SparseAdj, values: np.ndarray) -> sp.csr_matrix:
    n = adj.num_nodes
    return sp.csr_matrix((values, adj.indices, adj.offsets), shape=(n, n))


def spmm(adj: SparseAdj, h: Tensor) -> Tensor:
    """Sparse aggregation: out[i] = sum_j c_ij * h[j] over stored slots.

    Backward flows into h through the transpose structure, and into the
    coefficients as well when they are a Tensor.
    """
    if adj.coeffs is None:
        raise ShapeMismatch("spmm needs a coefficient array (use 1.0 for unweighted)")
    if h.data.ndim != 2 or h.data.shape[0] != adj.num_nodes:
        raise ShapeMismatch(f"spmm expects h of shape ({adj.num_nodes}, d), got {h.data.shape}")
    coeff_tensor = adj.coeffs if isinstance(adj.coeffs, Tensor) else None
    values = coeff_tensor.data.reshape(-1) if coeff_tensor is not None else adj.coeffs
    mat = _csr_matrix(adj, np.asarray(values, dtype=np.float64))
    data = mat @ h.data

    inputs = (h,) if coeff_tensor is None else (h, coeff_tensor)

    def rule(g):
        out = [(h, np.asarray(mat.T @ g))]
        if coeff_tensor is not None:
            grad_c = (g[adj.rows] * h.data[adj.indices]).sum(axis=1)
            out.append((coeff_tensor, grad_c.reshape(coeff_tensor.data.shape)))
        return out

    return _emit(data, inputs, rule)


def _segment_reduce(values: np.ndarray, offsets: np.ndarray, ufunc, fill: float) -> np.ndarray:
    n = offsets.shape[0] - 1
    out = np.full((n,) + values.shape[1:], fill, dtype=np.float64)
    starts, ends = offsets[:-1], offsets[1:]
    nonempty = starts < ends
    if values.shape[0] and nonempty.any():
        out[nonempty] = ufunc.reduceat(values, starts[nonempty], axis=0)
    return out


def segment_softmax(logits: Tensor, offsets: np.ndarray) -> Tensor:
    """Softmax within each CSR segment of per-slot logits (max-subtracted)."""
    flat = logits.data.reshape(-1)
    if flat.shape[0] != int(offsets[-1]):
        raise ShapeMismatch("logit count must equal total slot count")
    degrees = np.diff(offsets)
    rows = np.repeat(np.arange(offsets.shape[0] - 1, dtype=np.int64), degrees)
    seg_max = _segment_reduce(flat, offsets, np.maximum, 0.0)
    exp = np.exp(flat - seg_max[rows])
    denom = _segment_reduce(exp, offsets, np.add, 1.0)
    alpha = exp / denom[rows]
    data = alpha.reshape(logits.data.shape)

    def rule(g):
        g_flat = g.reshape(-1)
        seg_dot = _segment_reduce(alpha * g_flat, offsets, np.add, 0.0)
        grad = alpha * (g_flat - seg_dot[rows])
        return [(logits, grad.reshape(logits.data.shape))]

    return _emit(data, (logits,), rule)


def neighbor_max(adj: SparseAdj, h: Tensor) -> Tensor:
    """Per-node elementwise max over neighbor rows; zero vector if no neighbors.

    Gradient routes to the first slot attaining the max in each (node, column).
    """
    if h.data.ndim != 2 or h.data.shape[0] != adj.num_nodes:
        raise ShapeMismatch(f"neighbor_max expects h of shape ({adj.num_nodes}, d)")
    offsets, cols = adj.offsets, adj.indices
    n, d = adj.num_nodes, h.data.shape[1]
    gathered = h.data[cols]
    data = _segment_reduce(gathered, offsets, np.maximum, 0.0)
    empty = np.diff(offsets) == 0
    data[empty] = 0.0

    def rule(g):
        total = cols.shape[0]
        if total == 0:
            return [(h, np.zeros_like(h.data))]
        slot_ids = np.arange(total, dtype=np.int64)[:, None]
        is_max = gathered == data[adj.rows]
        candidates = np.where(is_max, slot_ids, total)
        first = np.full((n, d), total, dtype=np.int64)
        starts = offsets[:-1]
        nonempty = starts < offsets[1:]
        first[nonempty] = np.minimum.reduceat(candidates, starts[nonempty], axis=0)
        grad = np.zeros_like(h.data)
        node_idx, col_idx = np.nonzero(first < total)
        slots = first[node_idx, col_idx]
        np.add.at(grad, (cols[slots], col_idx), g[node_idx, col_idx])
        return [(h, grad)]

    return _emit(data, (h,), rule)
