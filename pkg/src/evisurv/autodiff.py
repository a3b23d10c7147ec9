"""Dense 2-D reverse-mode automatic differentiation.

Every value is a ``Tensor`` wrapping a C-ordered float64 matrix. Operations on
tensors that belong to a :class:`Tape` are recorded in execution order, so the
tape is topologically sorted by construction and ``Tape.backward`` is a single
reverse sweep.

Broadcasting is limited to what the model needs: a ``1 x c`` row, an ``r x 1``
column or a ``1 x 1`` scalar may be combined with an ``r x c`` matrix in
``add`` and ``mul``.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Tape",
    "as_tensor",
    "matmul",
    "matmul_t",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "reciprocal",
    "power",
    "log",
    "clip",
    "concat",
    "slice_cols",
    "row_softmax",
    "sigmoid",
    "tanh",
    "relu",
    "softplus",
    "apply_activation",
    "sum",
    "mean",
    "row_weighted_sum",
    "layer_norm",
    "numeric_gradient",
    "relative_error",
]


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _as_matrix(data) -> np.ndarray:
    if type(data) is np.ndarray and data.ndim == 2 and data.dtype == np.float64 and data.flags.c_contiguous:
        return data
    arr = np.array(data, dtype=np.float64, order="C", copy=None)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got array with shape {arr.shape}")
    return np.ascontiguousarray(arr)


class Tensor:
    """A float64 matrix with an optional gradient slot.

    Tensors built directly are constants. Trainable leaves come from
    :meth:`Tape.leaf`; results of operations on taped tensors are recorded
    on the same tape.
    """

    __slots__ = ("data", "grad", "node_id", "tape", "name")
    __array_priority__ = 1000

    def __init__(self, data, *, tape: "Tape | None" = None, name: str | None = None):
        self.data = _as_matrix(data)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def requires_grad(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor({self.rows}x{self.cols}{tag}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through the recorded ops below
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        if np.isscalar(other):
            return add_scalar(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return add_scalar(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        if np.isscalar(other):
            return add_scalar(scale(self, -1.0), float(other))
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return mul(self, reciprocal(other))

    def __rtruediv__(self, other):
        if np.isscalar(other):
            return scale(reciprocal(self), float(other))
        return mul(other, reciprocal(self))

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Node ids are positions in ``nodes``; an operation is appended only after
    its inputs exist, so the list is already in topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, Tensor] = {}
        self._consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data, name: str) -> Tensor:
        """Register a trainable input. ``data`` is not copied."""
        if name in self.leaves:
            raise TapeError(f"duplicate leaf name {name!r}")
        t = Tensor(data, tape=self, name=name)
        t.node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), t, None))
        self.leaves[name] = t
        return t

    def _record(self, op: str, inputs: tuple, out: Tensor, backward_fn: Callable) -> Tensor:
        if self._consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        out.tape = self
        out.node_id = len(self.nodes)
        self.nodes.append(_Node(op, inputs, out, backward_fn))
        return out

    def reset(self) -> None:
        """Clear accumulated gradients so backward may run again."""
        for node in self.nodes:
            node.output.grad = None
        self._consumed = False

    def backward(self, loss: Tensor) -> dict[str, Tensor]:
        """Reverse sweep from a scalar ``loss``; returns leaf name -> gradient."""
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
        if loss.tape is not self or loss.node_id is None:
            raise TapeError("loss was not produced on this tape")
        if self._consumed:
            raise TapeError("backward() already ran on this tape; call reset() first")
        self._consumed = True

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward_fn is None:
                node.output.grad = g
                continue
            parent_grads = node.backward_fn(g)
            for inp, pg in zip(node.inputs, parent_grads):
                if pg is None or inp.node_id is None:
                    continue
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = pg if prev is None else prev + pg

        out = {}
        for name, t in self.leaves.items():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            out[name] = Tensor(t.grad, name=name)
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.node_id is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise TapeError("operands live on different tapes")
    return tape


def _emit(op: str, inputs: tuple, data: np.ndarray, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = None
    out.tape = None
    out.name = None
    tape = _tape_of(*inputs)
    if tape is not None:
        tape._record(op, inputs, out, backward_fn)
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        ga = g @ B.T if a.node_id is not None else None
        gb = A.T @ g if b.node_id is not None else None
        return ga, gb

    return _emit("matmul", (a, b), A @ B, backward)


def matmul_t(a, b) -> Tensor:
    """``a @ b.T`` without materialising the transpose."""
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.cols:
        raise ShapeError(f"matmul_t: inner dimensions differ, {a.shape} @ {b.shape}.T")
    A, B = a.data, b.data

    def backward(g):
        ga = g @ B if a.node_id is not None else None
        gb = g.T @ A if b.node_id is not None else None
        return ga, gb

    return _emit("matmul_t", (a, b), A @ B.T, backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _emit("transpose", (a,), np.ascontiguousarray(a.data.T), lambda g: (np.ascontiguousarray(g.T),))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data, lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    A, B = a.data, b.data

    def backward(g):
        ga = _reduce_to(g * B, A.shape) if a.node_id is not None else None
        gb = _reduce_to(g * A, B.shape) if b.node_id is not None else None
        return ga, gb

    return _emit("mul", (a, b), A * B, backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def add_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit("add_scalar", (a,), a.data + c, lambda g: (g,))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / a.data
    return _emit("reciprocal", (a,), y, lambda g: (-g * y * y,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    X = a.data
    return _emit("power", (a,), X**p, lambda g: (g * p * X ** (p - 1.0),))


def log(a) -> Tensor:
    a = as_tensor(a)
    X = a.data
    return _emit("log", (a,), np.log(X), lambda g: (g / X,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    a = as_tensor(a)
    X = a.data
    inside = (X >= lo) & (X <= hi)
    return _emit("clip", (a,), np.clip(X, lo, hi), lambda g: (g * inside,))


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    """Concatenate along columns (``axis=1``) or rows (``axis=0``)."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of nothing")
    other = 1 - axis
    for p in parts[1:]:
        if p.shape[other] != parts[0].shape[other]:
            raise ShapeError(
                f"concat(axis={axis}): mismatched shapes {parts[0].shape} and {p.shape}"
            )
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(x) for x in np.split(g, cuts, axis=axis))

    return _emit("concat", tuple(parts), np.concatenate([p.data for p in parts], axis=axis), backward)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not 0 <= start < stop <= a.cols:
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit("slice_cols", (a,), np.ascontiguousarray(a.data[:, start:stop]), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def row_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    Y = z

    def backward(g):
        return (Y * (g - (g * Y).sum(axis=1, keepdims=True)),)

    return _emit("row_softmax", (a,), Y, backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    Y = _sigmoid(a.data)
    return _emit("sigmoid", (a,), Y, lambda g: (g * Y * (1.0 - Y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    Y = np.tanh(a.data)
    return _emit("tanh", (a,), Y, lambda g: (g * (1.0 - Y * Y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), a.data * mask, lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    X = a.data
    return _emit("softplus", (a,), _softplus(X), lambda g: (g * _sigmoid(X),))


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "softplus": softplus}


def apply_activation(kind: str, a) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(a)


# ---------------------------------------------------------------------------
# reductions


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    """Sum everything (1x1 result) or along ``axis`` keeping 2-D shape."""
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=True).reshape(1, 1) if axis is None else a.data.sum(axis=axis, keepdims=True)
    return _emit("sum", (a,), out, lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def row_weighted_sum(weights, bag) -> Tensor:
    """``sum_i w_i * bag[i]`` for an ``N``-vector of weights (1xN or Nx1)."""
    w, bag = as_tensor(weights), as_tensor(bag)
    if w.rows != 1:
        w = transpose(w)
    if w.shape != (1, bag.rows):
        raise ShapeError(f"row_weighted_sum: weights {w.shape} do not match bag {bag.shape}")
    W, B = w.data, bag.data

    def backward(g):
        gw = g @ B.T if w.node_id is not None else None
        gb = W.T @ g if bag.node_id is not None else None
        return gw, gb

    return _emit("row_weighted_sum", (w, bag), W @ B, backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalisation composed from the primitives above."""
    x = as_tensor(x)
    centred = sub(x, mean(x, axis=1))
    var = mean(mul(centred, centred), axis=1)
    inv_std = power(add_scalar(var, eps), -0.5)
    return add(mul(mul(centred, inv_std), gamma), beta)


# ---------------------------------------------------------------------------
# finite-difference verification


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0

