"""Dense tensors over NumPy with a reverse-mode differentiation tape.

Every differentiable op produces a new :class:`Tensor`; when a :class:`Tape`
is active and at least one input requires a gradient, the op appends a node
``(output id, inputs, backward closure)`` to the tape.  :func:`backward`
replays the nodes in exact reverse order, accumulating gradients additively.

Elementwise broadcasting is deliberately narrow: operands must have equal
shapes, or one of them must be a scalar.  Anything else is a
:class:`ShapeError`.  Ops that need a bias or a per-channel weight
(``linear``, ``rmsnorm``) take it as an explicit argument instead.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "Gradients", "no_grad", "active_tape", "record",
    "ShapeError", "DomainError", "NumericError", "ContractError",
    "tensor", "zeros", "ones", "parameter",
    "add", "sub", "mul", "div", "neg", "scale", "exp", "log", "sigmoid", "silu",
    "log_sigmoid", "cumsum",
    "elementwise", "matmul", "linear", "sum", "mean", "reshape", "transpose",
    "concat", "embedding", "take_last", "softmax", "log_softmax", "rmsnorm",
    "l2_normalize", "masked_fill", "einsum", "tri_solve", "backward",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an op (e.g. log of <= 0)."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf where finiteness is documented."""


class ContractError(RuntimeError):
    """A caller broke an API precondition."""


_ids = itertools.count(1)
_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_tape() -> "Tape | None":
    st = _stack()
    return st[-1] if st else None


class Tape:
    """Ordered record of differentiable ops executed while the tape is active."""

    def __init__(self) -> None:
        self.nodes: list[tuple[int, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


class no_grad:
    """Suspend recording on this thread (ops still run, nothing is taped)."""

    def __enter__(self) -> None:
        _stack().append(None)

    def __exit__(self, *exc) -> None:
        _stack().pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad_id", "name")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def __getitem__(self, idx) -> "Tensor":
        return _getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)


def tensor(data, dtype=None, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad, name=name)


def parameter(data, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=True, name=name)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a custom op.

    ``backward_fn(g)`` must return one gradient (or None) per parent, each with
    the parent's shape.  It is only called when the output's gradient is live.
    Extension modules use this to register fused ops (scans, convolutions).
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad_id = next(_ids)
    out.name = None
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append((out.grad_id, tuple(parents), backward_fn))
    else:
        out.requires_grad = False
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{op}: at least one operand must be a Tensor")
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} "
                         "(only equal shapes or scalar operands are supported)")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def _result_dtype(a: Tensor, b: Tensor):
    # a scalar operand never widens a tensor operand
    if a.ndim == 0 and b.ndim != 0:
        return b.dtype
    if b.ndim == 0 and a.ndim != 0:
        return a.dtype
    return np.result_type(a.dtype, b.dtype)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    dt = _result_dtype(a, b)
    out = (a.data + b.data).astype(dt, copy=False)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    dt = _result_dtype(a, b)
    out = (a.data - b.data).astype(dt, copy=False)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    dt = _result_dtype(a, b)
    out = (a.data * b.data).astype(dt, copy=False)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    dt = _result_dtype(a, b)
    out = (a.data / b.data).astype(dt, copy=False)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), bw)


def neg(x: Tensor) -> Tensor:
    return record(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError(f"log of non-positive value (min={x.data.min()!r})")
    return record(np.log(x.data), (x,), lambda g: (g / x.data,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    half = np.asarray(0.5, dtype=z.dtype)
    return half * (1 + np.tanh(half * z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return record(out, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def log_sigmoid(x: Tensor) -> Tensor:
    """``log(sigmoid(x))`` without underflow for very negative inputs."""
    z = x.data
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return record(out, (x,), lambda g: (g * _sigmoid(-z),))


def cumsum(x: Tensor, axis: int) -> Tensor:
    out = np.cumsum(x.data, axis=axis)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return record(out, (x,), bw)


_UNARY = {"neg": neg, "exp": exp, "log": log, "sigmoid": sigmoid, "silu": silu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, *args):
    """Dispatch an elementwise op by name (``scale`` takes a tensor and a float)."""
    if op_kind in _UNARY:
        return _UNARY[op_kind](*args)
    if op_kind in _BINARY:
        return _BINARY[op_kind](*args)
    if op_kind == "scale":
        return scale(*args)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ for shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return record(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[..., k] @ w[k, n] (+ b[n])``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    k, n = w.shape

    def bw(g):
        g2 = g.reshape(-1, n)
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, k).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return record(out, parents, bw)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    ax = _norm_axis(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=ax, keepdims=keepdims))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    return scale(sum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def _getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic or (isinstance(idx, np.ndarray) and idx.ndim == 1 and idx.dtype.kind in "iu"
                     and len(np.unique(idx)) == len(idx)):
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return record(np.array(out, copy=True) if out.base is not None else out, (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, tuple(xs), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DomainError(f"token id out of range [0, {weight.shape[0]})")
    out = weight.data[ids]

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return record(out, (weight,), bw)


def take_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the last axis: ``out[..., j] = x[..., idx[..., j]]``."""
    idx = np.asarray(idx)
    out = np.take_along_axis(x.data, idx, axis=-1)

    def bw(g):
        gx = np.zeros_like(x.data)
        lead = np.indices(idx.shape)[:-1]
        np.add.at(gx, (*lead, idx), g)
        return (gx,)

    return record(out, (x,), bw)


def _check_temperature(t: float) -> float:
    t = float(t)
    if not t > 0:
        raise ContractError(f"temperature must be > 0, got {t}")
    return t


def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    t = _check_temperature(temperature)
    z = x.data / t if t != 1.0 else x.data
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        gx = y * (g - (g * y).sum(axis=axis, keepdims=True))
        return (gx / t if t != 1.0 else gx,)

    return record(y, (x,), bw)


def log_softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    t = _check_temperature(temperature)
    z = x.data / t if t != 1.0 else x.data
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        gx = g - p * g.sum(axis=axis, keepdims=True)
        return (gx / t if t != 1.0 else gx,)

    return record(out, (x,), bw)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ContractError("rmsnorm eps must be > 0")
    if weight.shape != (x.shape[-1],):
        raise ShapeError(f"rmsnorm: weight {weight.shape} does not match input {x.shape}")
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    n = x.data * r
    out = n * weight.data

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            dn = g * weight.data
            gx = r * (dn - n * (dn * n).mean(axis=-1, keepdims=True))
        if weight.requires_grad:
            gw = (g * n).reshape(-1, x.shape[-1]).sum(0)
        return gx, gw

    return record(out, (x, weight), bw)


L2_EPS = 1e-12


def l2_normalize(x: Tensor) -> Tensor:
    """Unit-norm along the last axis; the zero vector maps to itself."""
    r = 1.0 / np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + L2_EPS)
    y = x.data * r

    def bw(g):
        return (r * (g - y * (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (x,), bw)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; ``mask`` may broadcast to ``x``."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return record(out, (x,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype, copy=False),))


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """Explicit-output einsum (``'ij,jk->ik'``) with gradients for every operand."""
    if "->" not in subscripts:
        raise ContractError("einsum requires an explicit output ('...->...')")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != len(operands):
        raise ShapeError(f"einsum: {len(ins)} subscripts for {len(operands)} operands")
    for s, t in zip(ins, operands):
        if len(s) != t.ndim:
            raise ShapeError(f"einsum: subscript {s!r} does not match shape {t.shape}")
        if len(set(s)) != len(s):
            raise ContractError("einsum: repeated index within one operand is unsupported")
    out = np.einsum(subscripts, *[t.data for t in operands], optimize=len(operands) > 2)

    def bw(g):
        grads = []
        for i, (s, t) in enumerate(zip(ins, operands)):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [o.data for j, o in enumerate(operands) if j != i]
            osubs = [ins[j] for j in range(len(ins)) if j != i]
            avail = set(out_sub).union(*osubs) if osubs else set(out_sub)
            missing = [c for c in s if c not in avail]
            expr = ",".join([out_sub, *osubs]) + "->" + "".join(c for c in s if c in avail)
            gi = np.einsum(expr, g, *others, optimize=len(others) > 1)
            if missing:
                # index summed out only inside this operand: gradient is broadcast
                shape = [t.shape[k] if c in avail else 1 for k, c in enumerate(s)]
                gi = np.broadcast_to(gi.reshape(shape), t.shape).copy()
            grads.append(gi)
        return tuple(grads)

    return record(np.asarray(out), tuple(operands), bw)


def tri_solve(lower: Tensor, rhs: Tensor) -> Tensor:
    """Solve ``L X = R`` for unit-lower-triangular ``L[..., n, n]``.

    Only the strictly-lower part of ``L`` is read; the diagonal is taken as 1.
    """
    n = lower.shape[-1]
    if lower.shape[-2] != n or rhs.shape[-2] != n or lower.shape[:-2] != rhs.shape[:-2]:
        raise ShapeError(f"tri_solve: shapes {lower.shape} and {rhs.shape} are incompatible")
    L = np.tril(lower.data, -1) + np.eye(n, dtype=lower.dtype)
    x = np.linalg.solve(L, rhs.data)

    def bw(g):
        gr = np.linalg.solve(np.swapaxes(L, -1, -2), g)
        gl = np.tril(-(gr @ np.swapaxes(x, -1, -2)), -1) if lower.requires_grad else None
        return gl, (gr if rhs.requires_grad else None)

    return record(x, (lower, rhs), bw)


@dataclass
class Gradients:
    """Gradient map keyed by ``grad_id``; missing entries read as zeros."""

    by_id: dict[int, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self.by_id.get(t.grad_id)
        return np.zeros_like(t.data) if g is None else g

    def get(self, t: Tensor):
        return self.by_id.get(t.grad_id)

    def __contains__(self, t: Tensor) -> bool:
        return t.grad_id in self.by_id


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse-mode sweep over ``tape`` seeded with d(loss)/d(loss) = 1."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return Gradients({})
    grads: dict[int, np.ndarray] = {loss.grad_id: np.ones_like(loss.data)}
    for out_id, parents, fn in reversed(tape.nodes):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for p, gp in zip(parents, fn(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(p.grad_id)
            grads[p.grad_id] = gp if prev is None else prev + gp
    return Gradients(grads)


def check_finite(x: Tensor, what: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"non-finite values in {what}")


def params_finite(ts: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in ts)
