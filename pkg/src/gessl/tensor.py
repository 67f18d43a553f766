"""Dense float64 tensors with tape-based reverse-mode differentiation.

The op set is deliberately small: enough for MLP encoders, the pairwise
SSL losses, probability heads, and KL distillation. Forward results are
recorded on an explicit :class:`DiffRecord`; :func:`backward` replays the
record once in reverse. A central-difference checker (:func:`grad_check`)
validates every rule against an independent numeric oracle.

Supported broadcasting is the minimum the op set needs: equal shapes, a
scalar against anything, and a row ``(c,)``/``(1, c)`` or column ``(r, 1)``
against a matrix ``(r, c)``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

MAX_RANK = 4

# Rows with a smaller Euclidean norm pass through l2_normalize_rows
# unchanged (gradient treated as identity there).
NORM_EPS = 1e-12


class TensorError(Exception):
    """Base class for tensor-core failures."""


class ShapeMismatchError(TensorError):
    """Operand shapes incompatible for the requested op."""


class DomainError(TensorError):
    """Input outside an op's mathematical domain (e.g. log of x <= 0)."""


class Tensor:
    """A dense float64 array, optionally tracked on a DiffRecord.

    ``data`` is always C-contiguous (row-major) float64. ``node`` is the
    tensor's index into ``record`` when ``grad_tracked`` is true.
    """

    __slots__ = ("data", "grad_tracked", "node", "record")

    def __init__(self, data, grad_tracked: bool = False, node: int | None = None,
                 record: "DiffRecord | None" = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeMismatchError(f"rank {arr.ndim} exceeds the supported maximum {MAX_RANK}")
        self.data = arr
        self.grad_tracked = grad_tracked
        self.node = node
        self.record = record

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detached(self) -> "Tensor":
        """A constant copy of this tensor's current value."""
        return Tensor(self.data.copy())

    # -- operator sugar; everything routes through apply() --------------

    def __add__(self, other):
        return apply("add", [self, as_tensor(other)])

    def __radd__(self, other):
        return apply("add", [as_tensor(other), self])

    def __sub__(self, other):
        return apply("sub", [self, as_tensor(other)])

    def __rsub__(self, other):
        return apply("sub", [as_tensor(other), self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply("scale", [self], factor=float(other))
        return apply("mul", [self, as_tensor(other)])

    __rmul__ = __mul__

    def __neg__(self):
        return apply("scale", [self], factor=-1.0)

    def __matmul__(self, other):
        return apply("matmul", [self, as_tensor(other)])

    def transposed(self):
        return apply("transpose", [self])

    def relu(self):
        return apply("relu", [self])

    def exp(self):
        return apply("exp", [self])

    def log(self, floor: float | None = None):
        return apply("log", [self], floor=floor)

    def sum(self, axis: int | None = None, keepdims: bool = False):
        return apply("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False):
        return apply("mean", [self], axis=axis, keepdims=keepdims)

    def __repr__(self):
        tag = "tracked" if self.grad_tracked else "const"
        return f"Tensor(shape={self.shape}, {tag})"


def as_tensor(value) -> Tensor:
    """Wrap an array or number as an untracked constant tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(value) -> Tensor:
    return as_tensor(value)


class _Node:
    __slots__ = ("op", "parents", "ctx", "shape")

    def __init__(self, op: str, parents: tuple[int, ...], ctx, shape):
        self.op = op
        self.parents = parents
        self.ctx = ctx
        self.shape = shape


class DiffRecord:
    """Append-only record of operations for one reverse-mode sweep.

    Leaf parameters are created with :meth:`parameter`; every op whose
    inputs include a tracked tensor appends a node. Parents always precede
    children, so one reverse pass over the list visits each node once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def parameter(self, data) -> Tensor:
        """Register a leaf parameter and return its tracked tensor."""
        value = np.ascontiguousarray(data, dtype=np.float64)
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, value.shape))
        return Tensor(value, grad_tracked=True, node=node_id, record=self)

    def _append(self, op: str, parents: tuple[int, ...], ctx, shape) -> int:
        node_id = len(self.nodes)
        self.nodes.append(_Node(op, parents, ctx, shape))
        return node_id

    def __len__(self):
        return len(self.nodes)


# -- broadcasting helpers ------------------------------------------------

def _broadcast_shape(sa: tuple, sb: tuple, op: str) -> tuple:
    if sa == sb:
        return sa
    if sa == ():
        return sb
    if sb == ():
        return sa
    if len(sa) == 2:
        r, c = sa
        if sb in ((c,), (1, c), (r, 1)):
            return sa
    if len(sb) == 2:
        r, c = sb
        if sa in ((c,), (1, c), (r, 1)):
            return sb
    raise ShapeMismatchError(f"{op}: incompatible shapes {sa} and {sb}")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    if len(shape) == 1:
        return grad.sum(axis=0)
    if shape[0] == 1:
        return grad.sum(axis=0, keepdims=True)
    return grad.sum(axis=1, keepdims=True)


def _expand_reduced(adj: np.ndarray, in_shape: tuple, axis: int | None,
                    keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.full(in_shape, float(adj.reshape(())))
    a = adj if keepdims else np.expand_dims(adj, axis)
    return np.broadcast_to(a, in_shape).copy()


def _require_2d(arr: np.ndarray, op: str) -> None:
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{op}: expected a 2-D operand, got shape {arr.shape}")


# -- op table ------------------------------------------------------------
# Each entry: forward(arrays, attrs) -> (out, ctx)
#             backward(ctx, adjoint) -> per-input gradient list

def _fw_add(vals, attrs):
    a, b = vals
    _broadcast_shape(a.shape, b.shape, "add")
    return a + b, (a.shape, b.shape)


def _bw_add(ctx, adj):
    sa, sb = ctx
    return [_reduce_to(adj, sa), _reduce_to(adj, sb)]


def _fw_sub(vals, attrs):
    a, b = vals
    _broadcast_shape(a.shape, b.shape, "sub")
    return a - b, (a.shape, b.shape)


def _bw_sub(ctx, adj):
    sa, sb = ctx
    return [_reduce_to(adj, sa), _reduce_to(-adj, sb)]


def _fw_mul(vals, attrs):
    a, b = vals
    _broadcast_shape(a.shape, b.shape, "mul")
    return a * b, (a, b)


def _bw_mul(ctx, adj):
    a, b = ctx
    return [_reduce_to(adj * b, a.shape), _reduce_to(adj * a, b.shape)]


def _fw_scale(vals, attrs):
    (a,) = vals
    factor = float(attrs["factor"])
    return a * factor, factor


def _bw_scale(ctx, adj):
    return [adj * ctx]


def _fw_matmul(vals, attrs):
    a, b = vals
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: inner dims differ for {a.shape} @ {b.shape}")
    return a @ b, (a, b)


def _bw_matmul(ctx, adj):
    a, b = ctx
    return [adj @ b.T, a.T @ adj]


def _fw_transpose(vals, attrs):
    (a,) = vals
    _require_2d(a, "transpose")
    return a.T.copy(), None


def _bw_transpose(ctx, adj):
    return [adj.T.copy()]


def _fw_relu(vals, attrs):
    (a,) = vals
    return np.maximum(a, 0.0), a


def _bw_relu(ctx, adj):
    return [adj * (ctx > 0.0)]


def _fw_exp(vals, attrs):
    (a,) = vals
    out = np.exp(a)
    return out, out


def _bw_exp(ctx, adj):
    return [adj * ctx]


def _fw_log(vals, attrs):
    (a,) = vals
    floor = attrs.get("floor")
    if floor is None:
        if np.any(a <= 0.0):
            raise DomainError("log: non-positive input (no floor given)")
        return np.log(a), (a, None)
    clipped = np.maximum(a, float(floor))
    return np.log(clipped), (a, float(floor))


def _bw_log(ctx, adj):
    a, floor = ctx
    if floor is None:
        return [adj / a]
    # clamp subgradient: zero where the floor is active
    return [np.where(a >= floor, adj / np.maximum(a, floor), 0.0)]


def _fw_sum(vals, attrs):
    (a,) = vals
    axis = attrs.get("axis")
    keepdims = bool(attrs.get("keepdims", False))
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeMismatchError(f"sum: axis {axis} out of range for shape {a.shape}")
    return a.sum(axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)


def _bw_sum(ctx, adj):
    in_shape, axis, keepdims = ctx
    return [_expand_reduced(adj, in_shape, axis, keepdims)]


def _fw_mean(vals, attrs):
    (a,) = vals
    axis = attrs.get("axis")
    keepdims = bool(attrs.get("keepdims", False))
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeMismatchError(f"mean: axis {axis} out of range for shape {a.shape}")
    count = a.size if axis is None else a.shape[axis]
    return a.mean(axis=axis, keepdims=keepdims), (a.shape, axis, keepdims, count)


def _bw_mean(ctx, adj):
    in_shape, axis, keepdims, count = ctx
    return [_expand_reduced(adj, in_shape, axis, keepdims) / count]


def _fw_concat_rows(vals, attrs):
    if not vals:
        raise ShapeMismatchError("concat_rows: needs at least one input")
    for v in vals:
        _require_2d(v, "concat_rows")
    cols = {v.shape[1] for v in vals}
    if len(cols) != 1:
        raise ShapeMismatchError(f"concat_rows: column counts differ: {sorted(cols)}")
    return np.vstack(vals), [v.shape[0] for v in vals]


def _bw_concat_rows(ctx, adj):
    grads = []
    start = 0
    for rows in ctx:
        grads.append(adj[start:start + rows].copy())
        start += rows
    return grads


def _fw_l2_normalize_rows(vals, attrs):
    (a,) = vals
    _require_2d(a, "l2_normalize_rows")
    norms = np.sqrt((a * a).sum(axis=1, keepdims=True))
    degenerate = norms < NORM_EPS
    safe = np.where(degenerate, 1.0, norms)
    out = np.where(degenerate, a, a / safe)
    return out, (out, safe, degenerate)


def _bw_l2_normalize_rows(ctx, adj):
    out, safe, degenerate = ctx
    inner = (adj * out).sum(axis=1, keepdims=True)
    grad = (adj - inner * out) / safe
    return [np.where(degenerate, adj, grad)]


def _fw_softmax_rows(vals, attrs):
    (a,) = vals
    _require_2d(a, "softmax_rows")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    return out, out


def _bw_softmax_rows(ctx, adj):
    y = ctx
    inner = (adj * y).sum(axis=1, keepdims=True)
    return [y * (adj - inner)]


_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (_fw_add, _bw_add),
    "sub": (_fw_sub, _bw_sub),
    "mul": (_fw_mul, _bw_mul),
    "scale": (_fw_scale, _bw_scale),
    "matmul": (_fw_matmul, _bw_matmul),
    "transpose": (_fw_transpose, _bw_transpose),
    "relu": (_fw_relu, _bw_relu),
    "exp": (_fw_exp, _bw_exp),
    "log": (_fw_log, _bw_log),
    "sum": (_fw_sum, _bw_sum),
    "mean": (_fw_mean, _bw_mean),
    "concat_rows": (_fw_concat_rows, _bw_concat_rows),
    "l2_normalize_rows": (_fw_l2_normalize_rows, _bw_l2_normalize_rows),
    "softmax_rows": (_fw_softmax_rows, _bw_softmax_rows),
}

OP_KINDS = tuple(_OPS)


def apply(op_kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run one op, recording it if any input is grad-tracked.

    Raises :class:`ShapeMismatchError` on incompatible shapes,
    :class:`DomainError` on domain violations (also when finite inputs
    produce a non-finite result, e.g. exp overflow).
    """
    if op_kind not in _OPS:
        raise TensorError(f"unknown op kind: {op_kind!r}")
    tensors = [as_tensor(x) for x in inputs]

    record = None
    for t in tensors:
        if t.grad_tracked:
            if record is None:
                record = t.record
            elif record is not t.record:
                raise TensorError(f"{op_kind}: inputs belong to different DiffRecords")

    forward, _ = _OPS[op_kind]
    out, ctx = forward([t.data for t in tensors], attrs)
    out = np.ascontiguousarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise DomainError(f"{op_kind}: produced non-finite values")

    if record is None:
        return Tensor(out)

    parents = tuple(t.node if t.grad_tracked else -1 for t in tensors)
    node_id = record._append(op_kind, parents, ctx, out.shape)
    return Tensor(out, grad_tracked=True, node=node_id, record=record)


def concat_rows(tensors: Iterable[Tensor]) -> Tensor:
    return apply("concat_rows", list(tensors))


def backward(record: DiffRecord, output: Tensor) -> dict[int, Tensor]:
    """Reverse-sweep the record from ``output``; return leaf gradients.

    The result maps every leaf node id to its gradient tensor; leaves the
    output does not depend on map to zeros of matching shape. Runs in one
    pass over the recorded nodes.
    """
    if not output.grad_tracked or output.record is not record or output.node is None:
        raise TensorError("backward: output is not part of this record")
    if output.node >= len(record.nodes):
        raise TensorError("backward: output node is out of range for this record")
    if output.size != 1:
        raise ShapeMismatchError(f"backward: output must be scalar, got shape {output.shape}")

    adjoints: list[np.ndarray | None] = [None] * len(record.nodes)
    adjoints[output.node] = np.ones(output.shape, dtype=np.float64)

    for node_id in range(output.node, -1, -1):
        adj = adjoints[node_id]
        node = record.nodes[node_id]
        if adj is None or node.op == "leaf":
            continue
        _, bw = _OPS[node.op]
        grads = bw(node.ctx, adj)
        for parent, grad in zip(node.parents, grads):
            if parent < 0:
                continue
            if adjoints[parent] is None:
                adjoints[parent] = grad
            else:
                adjoints[parent] = adjoints[parent] + grad
        adjoints[node_id] = None  # free memory as we go

    result: dict[int, Tensor] = {}
    for node_id, node in enumerate(record.nodes):
        if node.op != "leaf":
            continue
        adj = adjoints[node_id]
        if adj is None:
            adj = np.zeros(node.shape, dtype=np.float64)
        result[node_id] = Tensor(adj)
    return result


def grad_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must map a tensor to a scalar tensor and be smooth at ``point``
    (relu kinks are the caller's responsibility). The relative error uses
    a 1e-8 floor on the numeric magnitude, so a constant fn scores 0.
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    base = np.ascontiguousarray(point.data if isinstance(point, Tensor) else point,
                                dtype=np.float64)

    record = DiffRecord()
    x = record.parameter(base)
    out = fn(x)
    if not isinstance(out, Tensor) or out.size != 1:
        raise TensorError("grad_check: fn must return a scalar tensor")
    if out.grad_tracked and out.record is record:
        analytic = backward(record, out)[x.node].data.ravel()
    else:
        analytic = np.zeros(base.size)  # fn ignored its input

    numeric = np.empty(base.size)
    flat = base.ravel()
    for i in range(base.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        f_plus = fn(Tensor(bumped.reshape(base.shape))).item()
        bumped[i] = flat[i] - h
        f_minus = fn(Tensor(bumped.reshape(base.shape))).item()
        numeric[i] = (f_plus - f_minus) / (2.0 * h)

    denom = np.maximum(1e-8, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


# -- seeded sweep over the whole op set (used by tests and the CLI) ------

def _sample_smooth(rng, shape, low, high, keep_away=0.0):
    x = rng.uniform(low, high, size=shape)
    if keep_away > 0.0:
        x = np.where(np.abs(x) < keep_away, keep_away * np.sign(x) + (x == 0) * keep_away, x)
    return x


def gradcheck_suite(trials_per_op: int = 100, seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Run grad_check on every op at seeded smooth points.

    Returns the max relative error seen per op kind. Each trial wraps the
    op output in a fixed random weighted sum so the full Jacobian action
    is exercised, and checks the gradient with respect to each tracked
    input in turn.
    """
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}

    def run(op, point, fn):
        err = grad_check(fn, point, h=h)
        worst[op] = max(worst.get(op, 0.0), err)

    for _ in range(trials_per_op):
        r, c = 2, 3
        a = rng.normal(size=(r, c))
        b = rng.normal(size=(r, c))
        row = rng.normal(size=(c,))
        col = rng.normal(size=(r, 1))
        w = constant(rng.normal(size=(r, c)))

        def weighted(out, weights=w):
            return apply("sum", [apply("mul", [out, weights])])

        for other in (constant(b), constant(row), constant(col)):
            run("add", a, lambda x, o=other: weighted(apply("add", [x, o])))
            run("sub", a, lambda x, o=other: weighted(apply("sub", [x, o])))
            run("mul", a, lambda x, o=other: weighted(apply("mul", [x, o])))
        # gradient w.r.t. the broadcast operand
        wa = constant(a)
        run("add", row, lambda x: weighted(apply("add", [wa, x])))
        run("mul", col, lambda x: weighted(apply("mul", [wa, x])))

        factor = float(rng.normal())
        run("scale", a, lambda x: weighted(apply("scale", [x], factor=factor)))

        m = rng.normal(size=(c, r))
        wm = constant(rng.normal(size=(r, r)))
        run("matmul", a, lambda x: apply("sum", [apply("mul", [apply("matmul", [x, constant(m)]), wm])]))
        run("matmul", m, lambda x: apply("sum", [apply("mul", [apply("matmul", [constant(a), x]), wm])]))

        wt = constant(rng.normal(size=(c, r)))
        run("transpose", a, lambda x: apply("sum", [apply("mul", [apply("transpose", [x]), wt])]))

        run("relu", _sample_smooth(rng, (r, c), -2.0, 2.0, keep_away=0.1),
            lambda x: weighted(apply("relu", [x])))
        run("exp", rng.uniform(-2.0, 2.0, size=(r, c)), lambda x: weighted(apply("exp", [x])))
        run("log", rng.uniform(0.2, 3.0, size=(r, c)), lambda x: weighted(apply("log", [x])))

        for axis, keepdims in ((None, False), (0, False), (1, True)):
            wr = constant(rng.normal(size=np.sum(a, axis=axis, keepdims=keepdims).shape))
            run("sum", a, lambda x, ax=axis, kd=keepdims, ww=wr:
                apply("sum", [apply("mul", [apply("sum", [x], axis=ax, keepdims=kd), ww])]))
            run("mean", a, lambda x, ax=axis, kd=keepdims, ww=wr:
                apply("sum", [apply("mul", [apply("mean", [x], axis=ax, keepdims=kd), ww])]))

        other_block = constant(rng.normal(size=(r, c)))
        wcat = constant(rng.normal(size=(2 * r, c)))
        run("concat_rows", a, lambda x: apply("sum", [apply("mul", [
            apply("concat_rows", [x, other_block]), wcat])]))
        run("concat_rows", b, lambda x: apply("sum", [apply("mul", [
            apply("concat_rows", [other_block, x]), wcat])]))

        safe_rows = rng.normal(size=(r, c))
        safe_rows += np.sign(safe_rows.sum(axis=1, keepdims=True) + 1e-3)  # keep norms >= O(1)
        run("l2_normalize_rows", safe_rows, lambda x: weighted(apply("l2_normalize_rows", [x])))

        run("softmax_rows", rng.normal(size=(r, c)), lambda x: weighted(apply("softmax_rows", [x])))

    return worst
