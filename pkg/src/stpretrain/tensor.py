"""Dense double-precision tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` only when at least one
input requires a gradient.  Outside a tape every op is a plain numpy
evaluation, which is what the finite-difference oracle relies on.
"""
from __future__ import annotations

import threading
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int]

DEFAULT_SLOPE = 0.01
LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when a caller violates an operation's precondition."""


class Tensor:
    """An immutable array value, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: Tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Use as a context manager; ops created inside the block are recorded in
    creation order, and :func:`backward` replays them in reverse.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self.grads: Dict[str, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> List[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.nodes.append(_Node(out, tuple(parents), backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _record(out, (a, b), backward)


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: ArrayLike, floor: float = 0.0) -> Tensor:
    """Natural log; with ``floor > 0`` the input is clamped from below first."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, floor) if floor > 0 else x.data

    def backward(g):
        gx = g / clamped
        if floor > 0:
            gx = np.where(x.data >= floor, gx, 0.0)
        return (gx,)

    return _record(np.log(clamped), (x,), backward)


def tabs(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _record(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sqrt(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,))


def vector_norm(x: ArrayLike, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; gradient taken as zero at the origin."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.expand_dims(np.where(n > 0, g / safe, 0.0), axis) * x.data,)

    return _record(n, (x,), backward)


def square(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def leaky_relu(x: ArrayLike, slope: float = DEFAULT_SLOPE) -> Tensor:
    """Elementwise ``max(x, slope * x)`` for ``0 < slope < 1``."""
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return _record(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def detach(x: ArrayLike) -> Tensor:
    """Same values, cut out of the gradient graph."""
    return Tensor(as_tensor(x).data)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), backward)


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def stack(xs: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _record(np.stack([x.data for x in xs], axis=axis), tuple(xs), backward)


# ---------------------------------------------------------------------------
# products


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product of two 2-d tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), backward)


def _pair_contract(sa: str, a: np.ndarray, sb: str, b: np.ndarray, so: str) -> np.ndarray:
    """Two-operand einsum lowered onto batched ``np.matmul``."""
    # indices private to one operand and absent from the output are summed first
    drop_a = [i for i, ch in enumerate(sa) if ch not in sb and ch not in so]
    if drop_a:
        a = a.sum(axis=tuple(drop_a))
        sa = "".join(ch for ch in sa if ch in sb or ch in so)
    drop_b = [i for i, ch in enumerate(sb) if ch not in sa and ch not in so]
    if drop_b:
        b = b.sum(axis=tuple(drop_b))
        sb = "".join(ch for ch in sb if ch in sa or ch in so)
    batch = [ch for ch in so if ch in sa and ch in sb]
    left = [ch for ch in so if ch in sa and ch not in sb]
    right = [ch for ch in so if ch in sb and ch not in sa]
    inner = [ch for ch in sa if ch in sb and ch not in so]
    size = dict(zip(sa, a.shape))
    size.update(zip(sb, b.shape))
    prod = lambda chars: int(np.prod([size[ch] for ch in chars])) if chars else 1
    a2 = a.transpose([sa.index(ch) for ch in batch + left + inner]).reshape(
        prod(batch), prod(left), prod(inner))
    b2 = b.transpose([sb.index(ch) for ch in batch + inner + right]).reshape(
        prod(batch), prod(inner), prod(right))
    out = np.matmul(a2, b2).reshape([size[ch] for ch in batch + left + right])
    order = batch + left + right
    return out.transpose([order.index(ch) for ch in so])


def _einsum_data(in_subs: List[str], arrays: List[np.ndarray], out_subs: str) -> np.ndarray:
    if len(arrays) == 2 and max(arrays[0].size, arrays[1].size) > 4096:
        return _pair_contract(in_subs[0], arrays[0], in_subs[1], arrays[1], out_subs)
    expr = ",".join(in_subs) + "->" + out_subs
    return np.einsum(expr, *arrays, optimize=len(arrays) > 2)


def einsum(subscripts: str, *operands: ArrayLike) -> Tensor:
    """Explicit-output einsum (``'ij,jk->ik'``) with gradients for every operand.

    Repeated indices inside a single operand are not supported.
    """
    ops = [as_tensor(o) for o in operands]
    lhs, out_subs = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ShapeError(f"einsum '{subscripts}' expects {len(in_subs)} operands, got {len(ops)}")
    sizes: Dict[str, int] = {}
    for subs, op in zip(in_subs, ops):
        if len(subs) != op.ndim or len(set(subs)) != len(subs):
            raise ShapeError(f"einsum operand subscripts '{subs}' do not fit shape {op.shape}")
        for ch, n in zip(subs, op.shape):
            if sizes.setdefault(ch, n) != n:
                raise ShapeError(
                    f"einsum '{subscripts}' size mismatch on index '{ch}': "
                    f"{[o.shape for o in ops]}")
    out = _einsum_data(in_subs, [o.data for o in ops], out_subs)

    def backward(g):
        grads = []
        for k, op in enumerate(ops):
            if not op.requires_grad:
                grads.append(None)
                continue
            others = [in_subs[j] for j in range(len(ops)) if j != k]
            available = set(out_subs).union(*others) if others else set(out_subs)
            kept = "".join(ch for ch in in_subs[k] if ch in available)
            arrays = [g] + [ops[j].data for j in range(len(ops)) if j != k]
            if others:
                gk = _einsum_data([out_subs] + others, arrays, kept)
            else:
                gk = np.einsum(out_subs + "->" + kept, g)
            if kept != in_subs[k]:
                shape = [sizes[ch] if ch in kept else 1 for ch in in_subs[k]]
                gk = np.broadcast_to(gk.reshape(shape), op.shape).copy()
            grads.append(gk)
        return tuple(grads)

    return _record(out, tuple(ops), backward)


# ---------------------------------------------------------------------------
# normalisers


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), backward)


def squash(x: ArrayLike, axis: int = -1) -> Tensor:
    """Capsule squash: keeps direction, maps norm n to n^2 / (1 + n^2).

    Defined as zero (value and gradient) at the zero vector.
    """
    x = as_tensor(x)
    n2 = (x.data * x.data).sum(axis=axis, keepdims=True)
    n = np.sqrt(n2)
    scale = n / (1.0 + n2)  # factor multiplying x
    out = x.data * scale

    def backward(g):
        # d scale / dn = (1 - n^2) / (1 + n^2)^2, chain through dn/dx = x / n
        safe_n = np.where(n > 0, n, 1.0)
        coef = np.where(n > 0, (1.0 - n2) / (1.0 + n2) ** 2 / safe_n, 0.0)
        dot = (g * x.data).sum(axis=axis, keepdims=True)
        return (g * scale + coef * dot * x.data,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, tape: Tape,
             params: Optional[Union[Mapping[str, Tensor], Iterable[Tensor]]] = None
             ) -> Dict[str, np.ndarray]:
    """Replay ``tape`` in reverse from a scalar ``loss``.

    Returns a map from parameter name to gradient.  When ``params`` is given,
    every listed parameter gets an entry (zeros if the loss never touched it);
    otherwise only named leaves reached by the loss are returned.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.name is not None:
                leaves[key] = parent

    if params is None:
        result = {t.name: grads[k] for k, t in leaves.items()}
    else:
        items = params.items() if isinstance(params, Mapping) else ((p.name, p) for p in params)
        result = {}
        for name, p in items:
            g = grads.get(id(p))
            result[name] = np.zeros_like(p.data) if g is None else g
    tape.grads = result
    return result
