"""Small reverse-mode differentiation tape over dense float64 arrays.

Every primitive computes its forward value with numpy and registers a
closure that pushes the output cotangent back to its parents.  Only the
operations the model needs are provided; broadcasting is limited to what
``numpy`` does for elementwise ``add``/``sub``/``mul``.

Gradients of leaves accumulate across calls to :func:`backward`; call
:meth:`Tensor.zero_grad` (or :func:`zero_grads`) between steps.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when primitive inputs have incompatible shapes."""


class NumericError(FloatingPointError):
    """Raised when a NaN or infinity shows up in debug mode."""


_DEBUG = False
_GRAD = threading.local()  # per-thread recording switch, see no_grad


def set_debug(enabled: bool) -> None:
    """Check every forward value for non-finite entries."""
    global _DEBUG
    _DEBUG = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording backward closures (this thread only)."""
    prev = getattr(_GRAD, "enabled", True)
    _GRAD.enabled = False
    try:
        yield
    finally:
        _GRAD.enabled = prev


class Tensor:
    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def param(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def constant(value) -> Tensor:
    return Tensor(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    """Add ``g`` into ``t.grad``; ``owned`` means ``g`` is a fresh array safe to keep."""
    if not t.requires_grad:
        return
    if t.grad is None:
        if owned and g.shape == t.value.shape and g.dtype == np.float64 and g.flags.writeable:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.value.shape)
    else:
        t.grad += g


def _make(value: np.ndarray, parents: Sequence[Tensor], backward_fn=None) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced (shape {value.shape})")
    out = Tensor(value)
    if getattr(_GRAD, "enabled", True) and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _make(a.value - b.value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.shape), owned=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.shape), owned=True)

    return _make(a.value * b.value, (a, b), bw)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # tanh form never overflows for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))

    def bw(g):
        _accumulate(x, g * out * (1.0 - out), owned=True)

    return _make(out, (x,), bw)


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    factor = np.where(x.value > 0, 1.0, slope)

    def bw(g):
        _accumulate(x, g * factor, owned=True)

    return _make(x.value * factor, (x,), bw)


# reductions and linear algebra ----------------------------------------------


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    """Sum all entries (scalar result) or along ``axis`` keeping dims."""
    x = _as_tensor(x)
    if axis is None:
        value = np.asarray(x.value.sum())
    else:
        value = x.value.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(value, (x,), bw)


def matmul(a, b, trans_b: bool = False) -> Tensor:
    """``a @ b`` or ``a @ b.T`` for 2-D operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    inner_b = b.shape[1] if trans_b else b.shape[0]
    if a.shape[1] != inner_b:
        tag = " (b transposed)" if trans_b else ""
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}{tag}")
    bv = b.value.T if trans_b else b.value

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ bv.T, owned=True)
        if b.requires_grad:
            _accumulate(b, g.T @ a.value if trans_b else a.value.T @ g, owned=True)

    return _make(a.value @ bv, (a, b), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    """Concatenate along rows (axis 0) or columns (axis 1)."""
    ts = [_as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in ts)
        raise ShapeError(f"concat(axis={axis}): incompatible shapes {shapes}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _accumulate(t, g[lo:hi] if axis == 0 else g[:, lo:hi])

    return _make(value, ts, bw)


def concat_rows(tensors: Sequence) -> Tensor:
    return concat(tensors, axis=0)


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if not 0 <= start <= stop <= x.shape[0]:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for shape {x.shape}")

    def bw(g):
        full = np.zeros_like(x.value)
        full[start:stop] = g
        _accumulate(x, full)

    return _make(x.value[start:stop], (x,), bw)


# sparse row access -----------------------------------------------------------


def _index_array(indices) -> np.ndarray:
    return np.ascontiguousarray(indices, dtype=np.int64)


def gather_rows(table, indices) -> Tensor:
    """Rows ``table[indices]``; the backward pass scatters into table rows only."""
    table = _as_tensor(table)
    idx = _index_array(indices)
    if table.value.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table of shape {table.shape}")

    def bw(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.value)
        elif not table.grad.flags.c_contiguous:
            table.grad = np.ascontiguousarray(table.grad)
        kernels.scatter_add_rows_into(table.grad, np.ascontiguousarray(g), idx)

    return _make(table.value[idx], (table,), bw)


def scatter_add_rows(src, indices, n_rows: int) -> Tensor:
    """``out[indices[i]] += src[i]`` into an ``(n_rows, d)`` zero matrix."""
    src = _as_tensor(src)
    idx = _index_array(indices)
    if src.value.ndim != 2 or idx.shape[0] != src.shape[0]:
        raise ShapeError(f"scatter_add_rows: src {src.shape} vs {idx.shape[0]} indices")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeError(f"scatter_add_rows: index out of range for {n_rows} rows")
    value = kernels.scatter_add_rows(np.ascontiguousarray(src.value), idx, n_rows)

    def bw(g):
        _accumulate(src, g[idx], owned=True)

    return _make(value, (src,), bw)


def segment_softmax(values, segment_ids, n_segments: int) -> Tensor:
    """Softmax of ``values`` (shape ``(E,)`` or ``(E, 1)``) within each segment.

    Every segment in ``range(n_segments)`` must be non-empty.
    """
    values = _as_tensor(values)
    seg = _index_array(segment_ids)
    flat = np.ascontiguousarray(values.value.reshape(-1))
    if flat.shape[0] != seg.shape[0]:
        raise ShapeError(f"segment_softmax: {flat.shape[0]} values vs {seg.shape[0]} segment ids")
    counts = np.bincount(seg, minlength=n_segments) if seg.size else np.zeros(n_segments, int)
    if counts.shape[0] != n_segments:
        raise ShapeError("segment_softmax: segment id out of range")
    if n_segments and counts.min() == 0:
        empty = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"segment_softmax: segment {empty} is empty")
    prob = kernels.segment_softmax(flat, seg, n_segments)

    def bw(g):
        gflat = np.ascontiguousarray(g.reshape(-1))
        gv = kernels.segment_softmax_backward(prob, gflat, seg, n_segments).reshape(values.shape)
        _accumulate(values, gv, owned=True)

    return _make(prob.reshape(values.shape), (values,), bw)


def log_softmax_over_index_set(scores, mask=None) -> Tensor:
    """Row-wise log-softmax restricted to ``mask``; entries outside are 0.

    ``scores`` is ``(B, V)`` and ``mask`` a boolean ``(B, V)`` array with at
    least one True per row.  ``mask=None`` means every column of a row is in
    its index set.
    """
    scores = _as_tensor(scores)
    if mask is None:
        if scores.value.ndim != 2 or scores.shape[1] == 0:
            raise ShapeError(f"log_softmax_over_index_set: bad scores shape {scores.shape}")
        s = scores.value
        mx = s.max(axis=1, keepdims=True)
        shifted = s - mx
        ex = np.exp(shifted)
        tot = ex.sum(axis=1, keepdims=True)
        prob = ex / tot

        def bw_full(g):
            _accumulate(scores, g - prob * g.sum(axis=1, keepdims=True), owned=True)

        return _make(shifted - np.log(tot), (scores,), bw_full)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ShapeError(f"log_softmax_over_index_set: scores {scores.shape} vs mask {mask.shape}")
    if not mask.any(axis=1).all():
        raise ValueError("log_softmax_over_index_set: empty index set in some row")
    masked = np.where(mask, scores.value, -np.inf)
    mx = masked.max(axis=1, keepdims=True)
    ex = np.where(mask, np.exp(masked - mx), 0.0)
    tot = ex.sum(axis=1, keepdims=True)
    prob = ex / tot
    out = np.where(mask, masked - mx - np.log(tot), 0.0)

    def bw(g):
        g = np.where(mask, g, 0.0)
        _accumulate(scores, g - prob * g.sum(axis=1, keepdims=True), owned=True)

    return _make(out, (scores,), bw)


def bce_over_index_set(scores, mask, targets) -> Tensor:
    """Binary cross-entropy of ``sigmoid(scores)`` summed over masked entries per row.

    Returns a ``(B, 1)`` tensor.
    """
    scores = _as_tensor(scores)
    mask = np.asarray(mask, dtype=bool)
    y = np.asarray(targets, dtype=np.float64)
    s = scores.value
    # softplus(s) - y*s, written to stay finite for large |s|
    terms = np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s))) - y * s
    value = np.where(mask, terms, 0.0).sum(axis=1, keepdims=True)
    sig = np.where(s >= 0, 1.0 / (1.0 + np.exp(-np.abs(s))), np.exp(-np.abs(s)) / (1.0 + np.exp(-np.abs(s))))

    def bw(g):
        _accumulate(scores, np.where(mask, g * (sig - y), 0.0))

    return _make(value, (scores,), bw)


# backward --------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            mark = state.get(id(node))
            if mark == 2:
                continue
            if mark == 1:
                raise RuntimeError("cycle detected in computation tape")
            state[id(node)] = 1
        if i < len(node.parents):
            stack.append((node, i + 1))
            parent = node.parents[i]
            if parent.requires_grad:
                if state.get(id(parent)) == 1:
                    raise RuntimeError("cycle detected in computation tape")
                if state.get(id(parent)) != 2:
                    stack.append((parent, 0))
        else:
            state[id(node)] = 2
            order.append(node)
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.parents:
        _accumulate(root, np.ones_like(root.value))
        return
    order = _topological(root)
    for node in order:
        if node.parents:
            node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node.parents:
            node.grad = None


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# gradient verification --------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    n_checked: dict[str, int] = field(default_factory=dict)
    failures: list[tuple[str, tuple[int, ...], float, float, float]] = field(default_factory=list)
    tol_rel: float = 1e-4

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = []
        for name, err in self.max_rel_error.items():
            flag = "ok" if err <= self.tol_rel else "FAIL"
            lines.append(f"{name:32s} n={self.n_checked[name]:4d} max_rel_err={err:.3e} {flag}")
        for name, idx, a, n, err in self.failures[:20]:
            lines.append(f"  mismatch {name}{list(idx)}: analytic={a:.6e} numeric={n:.6e} rel={err:.3e}")
        return "\n".join(lines)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol_rel: float = 1e-4,
    n_coords: int = 64,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    For each tensor, up to ``n_coords`` coordinates are sampled (all of them
    when the tensor is smaller), half drawn from coordinates with a nonzero
    analytic gradient so sparse embedding tables are exercised.
    """
    rng = np.random.default_rng(seed)
    zero_grads(params.values())
    backward(loss_fn())
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
        for name, p in params.items()
    }
    report = GradCheckReport(tol_rel=tol_rel)
    for name, p in params.items():
        flat = p.value.reshape(-1)
        grad = analytic[name].reshape(-1)
        if flat.size <= n_coords:
            coords = np.arange(flat.size)
        else:
            nonzero = np.flatnonzero(grad)
            take = min(len(nonzero), n_coords // 2)
            picked = rng.choice(nonzero, size=take, replace=False) if take else np.empty(0, int)
            rest = rng.choice(flat.size, size=n_coords - take, replace=False)
            coords = np.unique(np.concatenate([picked, rest]))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with no_grad():
                fp = float(loss_fn().value)
            flat[c] = orig - h
            with no_grad():
                fm = float(loss_fn().value)
            flat[c] = orig
            num = (fp - fm) / (2 * h)
            err = relative_error(float(grad[c]), num, floor)
            worst = max(worst, err)
            if err > tol_rel:
                idx = tuple(int(i) for i in np.unravel_index(c, p.shape))
                report.failures.append((name, idx, float(grad[c]), num, err))
        report.max_rel_error[name] = worst
        report.n_checked[name] = len(coords)
    zero_grads(params.values())
    return report
