"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active::

    with Tape() as tape:
        loss = tg.mean(tg.mul(x, x))
    tape.backward(loss)

Outside a tape every op is a plain numpy computation, which is what the
finite-difference checks and inference paths use.

Broadcasting is deliberately limited: a 1-D operand may be applied row-wise
along the last axis (biases, gains), a 0-d operand may scale a tensor, and
matmul may apply a 2-D matrix to every row of an n-D tensor. Everything else
requires equal shapes.
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

_local = threading.local()

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tracked = False

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._tracked = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._tracked

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("only division by a python scalar is supported")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), like.shape))


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so the list is already topologically
    sorted; reverse iteration visits each node once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        self._saved = list(stack)
        stack.clear()

    def __exit__(self, *exc):
        _local.stack[:] = self._saved


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite value produced by {op}")


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                out.requires_grad = True
                out._tracked = True
                tape.nodes.append(_Node(out, inputs, backward))
                break
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss._tracked:
        raise ContractError("loss was not recorded on the tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
            if not inp._tracked:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# elementwise


def _row_operand(a: Tensor, b: Tensor, op: str) -> bool:
    """True when ``b`` is applied row-wise to ``a``; raise on other mismatches."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _sum_to_row(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    row = _row_operand(a, b, "add")

    def bw(g):
        gb = None
        if b.requires_grad:
            gb = _sum_to_row(g, b.shape[0]) if row else g
        return g if a.requires_grad else None, gb

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    row = _row_operand(a, b, "sub")

    def bw(g):
        gb = None
        if b.requires_grad:
            gb = -(_sum_to_row(g, b.shape[0]) if row else g)
        return g if a.requires_grad else None, gb

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may also be a row vector or a 0-d scalar."""
    if b.ndim == 0:
        def bw(g):
            ga = g * b.data if a.requires_grad else None
            gb = np.sum(g * a.data) if b.requires_grad else None
            return ga, gb

        return _result(a.data * b.data, (a, b), bw, "mul")

    row = _row_operand(a, b, "mul")

    def bw(g):
        ga = g * b.data if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * a.data
            if row:
                gb = _sum_to_row(gb, b.shape[0])
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)
    return _result(y, (x,), lambda g: (g / xd,), "log")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    y = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _result(y, (x,), bw, "gelu")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if x.ndim != 2:
            raise ShapeError("transpose without axes needs a 2-D tensor")
        axes = (1, 0)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ContractError("concat_rows needs at least one tensor")
    tail = xs[0].shape[1:]
    for t in xs:
        if t.shape[1:] != tail:
            raise ShapeError(f"concat_rows: trailing shapes differ ({t.shape} vs {xs[0].shape})")
    bounds = np.cumsum([0] + [t.shape[0] for t in xs])

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] if t.requires_grad else None for i, t in enumerate(xs))

    return _result(np.concatenate([t.data for t in xs], axis=0), xs, bw, "concat_rows")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[start:stop]`` along the first axis."""
    if not 0 <= start <= stop <= x.shape[0]:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {x.shape[0]} rows")

    def bw(g):
        out = np.zeros_like(x.data)
        out[start:stop] = g
        return (out,)

    return _result(x.data[start:stop], (x,), bw, "slice_rows")


def repeat_batch(x: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``x`` along a new leading axis."""
    return _result(
        np.broadcast_to(x.data, (n,) + x.shape).copy(), (x,), lambda g: (g.sum(axis=0),), "repeat_batch"
    )


def gather_rows(table: Tensor, ids) -> Tensor:
    """``table[ids]`` for integer ``ids`` of any shape (embedding lookup / row selection)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim < 1:
        raise ShapeError("gather_rows needs at least a 1-D table")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ContractError(f"gather_rows: index out of range for {n} rows")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (out,)

    return _result(table.data[ids], (table,), bw, "gather_rows")


def pick(x: Tensor, idx) -> Tensor:
    """``x[i, idx[i]]`` for a 2-D ``x``; returns a 1-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: need 2-D x and one index per row, got {x.shape} / {idx.shape}")
    rows = np.arange(x.shape[0])

    def bw(g):
        out = np.zeros_like(x.data)
        out[rows, idx] = g
        return (out,)

    return _result(x.data[rows, idx], (x,), bw, "pick")


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        return _result(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape),), "sum")
    ax = axis % x.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape),)

    return _result(np.sum(x.data, axis=ax), (x,), bw, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    if n == 0:
        raise ContractError("mean over an empty axis")
    return scale(sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported forms: 2-D @ 2-D; n-D @ 2-D (matrix applied to every row);
    n-D @ n-D with identical leading (batch) dimensions.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    if b.ndim == 2:
        k = a.shape[-1]

        def bw(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _result(a.data @ b.data, (a, b), bw, "matmul")

    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ ({a.shape} @ {b.shape})")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# row-wise (last axis) normalizers


def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result(y, (x,), bw, "softmax_rows")


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * np.sum(g, axis=-1, keepdims=True),)

    return _result(y, (x,), bw, "log_softmax_rows")


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit norm; rows with norm below ``eps`` are divided by ``eps``."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    small = norm < eps
    denom = np.where(small, eps, norm)
    y = x.data / denom

    def bw(g):
        proj = np.where(small, 0.0, np.sum(g * y, axis=-1, keepdims=True))
        return ((g - y * proj) / denom,)

    return _result(y, (x,), bw, "l2_normalize_rows")


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm_rows: gain/bias must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
        gg = _sum_to_row(g * xhat, n) if gain.requires_grad else None
        gb = _sum_to_row(g, n) if bias.requires_grad else None
        return gx, gg, gb

    return _result(y, (x, gain, bias), bw, "layer_norm_rows")


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max symmetric relative error between tape gradients and central differences.

    ``f`` must rebuild its computation from the current parameter values on
    every call. Existing ``.grad`` buffers of ``params`` are left as they were.
    """
    params = list(params)
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    for p, s in zip(params, saved):
        p.grad = s

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        af = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(af[i] - num) / max(1e-8, abs(af[i]) + abs(num))
            worst = max(worst, err)
    return worst
