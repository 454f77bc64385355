"""Dense tensors with tape-based reverse-mode automatic differentiation.

Operations executed while a :class:`Tape` is active are recorded in order;
:meth:`Tape.gradient` replays them backwards.  Every backward rule is written
in terms of the same differentiable operations, so passing
``create_graph=True`` records the backward pass itself and its result can be
differentiated again.

Broadcasting is restricted to scalar-with-tensor; anything else goes through
explicit :func:`expand` / :func:`sum_axis`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericError, TargetIndexError

_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def get_dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the floating type of newly created tensors."""
    previous = get_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


@contextlib.contextmanager
def no_grad():
    """Suspend recording on the active tape."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


@contextlib.contextmanager
def _recording(tape: "Tape"):
    stack = _stack()
    stack.append(tape)
    try:
        yield
    finally:
        stack.pop()


def _active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        dtype = get_dtype()
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of the operations executed while the tape is active.

    ``seed`` is carried as an identifier of the random source that produced
    the stochastic inputs of this pass; the tape itself draws nothing.
    """

    def __init__(self, seed: int | None = None):
        self.seed = seed
        self.nodes: list[_Node] = []
        self._position: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def _record(self, op, inputs, out, backward):
        self._position[id(out)] = len(self.nodes)
        self.nodes.append(_Node(op, inputs, out, backward))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._position

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad and id(inp) not in self._position:
                    seen.setdefault(id(inp), inp)
        return list(seen.values())

    def gradient(self, loss: Tensor, sources: Sequence[Tensor],
                 create_graph: bool = False) -> list[Tensor]:
        """Gradients of scalar ``loss`` with respect to each of ``sources``.

        Sources the loss does not depend on get zeros.  With
        ``create_graph`` the backward operations are recorded on this tape.
        """
        if loss.shape != ():
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        if not self.produced(loss) and not any(s is loss for s in sources):
            raise ContractError("loss was not produced on this tape")
        wanted = {}
        for i, s in enumerate(sources):
            wanted.setdefault(id(s), []).append(i)
        results: list[Tensor | None] = [None] * len(sources)
        grads: dict[int, Tensor] = {id(loss): Tensor(np.ones((), dtype=loss.data.dtype))}

        positions = [self._position.get(id(s)) for s in sources]
        stop = min(positions) if sources and all(p is not None for p in positions) else 0
        end = len(self.nodes)
        ctx = _recording(self) if create_graph else no_grad()
        with ctx:
            for k in range(end - 1, stop - 1, -1):
                node = self.nodes[k]
                g = grads.pop(id(node.out), None)
                if g is None:
                    continue
                for i in wanted.get(id(node.out), ()):
                    results[i] = g
                for inp, gi in zip(node.inputs, node.backward(g)):
                    if gi is None or not inp.requires_grad:
                        continue
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else add(prev, gi)
        for i, s in enumerate(sources):
            if results[i] is None:
                g = grads.get(id(s))
                results[i] = g if g is not None else Tensor(np.zeros(s.shape, dtype=s.data.dtype))
        return results

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
        params = self.leaves() if params is None else list(params)
        return dict(zip(params, self.gradient(loss, params)))


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Reverse-mode gradients of ``loss`` on the active tape, keyed by leaf."""
    tape = _active_tape()
    if tape is None or not tape.produced(loss):
        raise ContractError("loss was not produced on the current tape")
    return tape.backward(loss, params)


def grad(loss: Tensor, sources: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    tape = _active_tape()
    if tape is None or not tape.produced(loss):
        raise ContractError("loss was not produced on the current tape")
    return tape.gradient(loss, sources, create_graph=create_graph)


# ---------------------------------------------------------------------------
# operations


def _emit(op: str, data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(op, inputs, out, backward)
    else:
        out.requires_grad = False
    return out


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")
    return a, b


def _unbroadcast(g: Tensor, target: Tensor) -> Tensor:
    return g if g.shape == target.shape else sum_all(g)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(neg(g), b)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(mul(g, b), a), _unbroadcast(mul(g, a), b)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    if not np.all(b.data):
        raise NumericError("div: division by zero")
    out = None

    def bw(g):
        return (_unbroadcast(div(g, b), a), _unbroadcast(neg(div(mul(g, out), b)), b))

    out = _emit("div", a.data / b.data, (a, b), bw)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (neg(g),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    data = (a.data.astype(np.float64) @ b.data.astype(np.float64)).astype(a.data.dtype)
    return _emit("matmul", data, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    return _emit("transpose", a.data.T, (a,), lambda g: (transpose(g),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (reshape(g, a.shape),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def bw(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _emit("sigmoid", expit(a.data), (a,), bw)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def bw(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _emit("tanh", np.tanh(a.data), (a,), bw)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def bw(g):
        return (mul(g, out),)

    with np.errstate(over="ignore"):
        out = _emit("exp", np.exp(a.data), (a,), bw)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive input")
    return _emit("log", np.log(a.data), (a,), lambda g: (div(g, a),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _emit("softplus", np.logaddexp(0.0, a.data).astype(a.data.dtype), (a,),
                 lambda g: (mul(g, sigmoid(a)),))


def square(a) -> Tensor:
    return mul(a, a)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log, "softplus": softplus,
    "neg": neg, "square": square,
}
_BINARY = {"add", "sub", "mul", "div"}


def elementwise(kind: str, a, b=None) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ContractError(f"{kind} takes a single operand")
    return fn(a)


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(np.sum(a.data, dtype=np.float64), dtype=a.data.dtype)
    return _emit("sum", data, (a,), lambda g: (fill(g, a.shape),))


def fill(s: Tensor, shape) -> Tensor:
    """Broadcast a scalar tensor to ``shape``."""
    if s.shape != ():
        raise DimensionError("fill expects a scalar")
    shape = tuple(shape)
    return _emit("fill", np.full(shape, s.data, dtype=s.data.dtype), (s,),
                 lambda g: (sum_all(g),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    data = np.sum(a.data, axis=axis, dtype=np.float64).astype(a.data.dtype)
    n = a.shape[axis]
    return _emit("sum_axis", data, (a,), lambda g: (expand(g, axis, n),))


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new ``axis`` of length ``n`` by repetition (adjoint of sum_axis)."""
    data = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return _emit("expand", data, (a,), lambda g: (sum_axis(g, axis),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat of nothing")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(slice_axis(g, axis, int(bounds[i]), int(bounds[i + 1]))
                     for i in range(len(tensors)))

    return _emit("concat", data, tensors, bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    total = a.shape[axis]
    return _emit("slice", a.data[tuple(index)], (a,),
                 lambda g: (pad_axis(g, axis, start, total),))


def pad_axis(a: Tensor, axis: int, start: int, total: int) -> Tensor:
    """Embed ``a`` into zeros of length ``total`` along ``axis`` (adjoint of slice)."""
    shape = list(a.shape)
    shape[axis] = total
    data = np.zeros(shape, dtype=a.data.dtype)
    index = [slice(None)] * a.ndim
    stop = start + a.shape[axis]
    index[axis] = slice(start, stop)
    data[tuple(index)] = a.data
    return _emit("pad", data, (a,), lambda g: (slice_axis(g, axis, start, stop),))


def take_rows(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError("take_rows expects a flat index vector")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise TargetIndexError("row index out of range")
    n = table.shape[0]
    return _emit("take_rows", table.data[ids], (table,),
                 lambda g: (scatter_rows(g, ids, n),))


def scatter_rows(a: Tensor, ids, n: int) -> Tensor:
    """Sum rows of ``a`` into an ``n``-row zero table at ``ids`` (adjoint of take_rows)."""
    ids = np.asarray(ids, dtype=np.int64)
    data = np.zeros((n,) + a.shape[1:], dtype=np.float64)
    np.add.at(data, ids, a.data)
    return _emit("scatter_rows", data.astype(a.data.dtype), (a,),
                 lambda g: (take_rows(g, ids),))


def pick(a: Tensor, idx) -> Tensor:
    """Select ``a[i, idx[i]]`` for every row ``i``."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise DimensionError(f"pick: {idx.shape} indices for matrix {a.shape}")
    rows = np.arange(a.shape[0])
    width = a.shape[1]
    return _emit("pick", a.data[rows, idx], (a,), lambda g: (place(g, idx, width),))


def place(a: Tensor, idx, width: int) -> Tensor:
    """Scatter a vector into a zero matrix at column ``idx[i]`` of row ``i``."""
    idx = np.asarray(idx, dtype=np.int64)
    data = np.zeros((a.shape[0], width), dtype=a.data.dtype)
    data[np.arange(a.shape[0]), idx] = a.data
    return _emit("place", data, (a,), lambda g: (pick(g, idx),))


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax of a matrix."""
    if a.ndim != 2:
        raise DimensionError("log_softmax expects a matrix")
    x = a.data.astype(np.float64)
    x = x - x.max(axis=1, keepdims=True)
    data = (x - np.log(np.exp(x).sum(axis=1, keepdims=True))).astype(a.data.dtype)
    width = a.shape[1]
    out = None

    def bw(g):
        return (sub(g, mul(exp(out), expand(sum_axis(g, 1), 1, width))),)

    out = _emit("log_softmax", data, (a,), bw)
    return out


def log_softmax_nll(logits: Tensor, targets) -> Tensor:
    """Summed negative log-likelihood (nats) of integer ``targets`` under row softmaxes."""
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"{targets.shape} targets for logits {logits.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise TargetIndexError("targets must be integers")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise TargetIndexError("target index outside [0, V)")
    return neg(sum_all(pick(log_softmax(logits), targets)))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    """Plain numpy softmax over the last axis, in float64."""
    x = np.asarray(logits, dtype=np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)
