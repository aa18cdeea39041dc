"""Dense float64 tensors with a recorded reverse-mode graph.

Feature maps use row-major NCHW layout. Every op returns a new tensor; when
any input requires a gradient the result remembers its parents and a closure
that maps the output gradient to one gradient per parent.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_grad_enabled = True
# Active kink recorders (see ``record_kinks``); each is a list of bool arrays.
_kink_stack: list[list[np.ndarray]] = []


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the branch decisions of non-smooth ops (relu, max, clamp).

    Two evaluations took the same smooth branch everywhere iff their recorded
    lists compare equal; ``grad_check`` uses this to skip coordinates whose
    perturbation crosses a kink.
    """
    rec: list[np.ndarray] = []
    _kink_stack.append(rec)
    try:
        yield rec
    finally:
        _kink_stack.pop()


def _note_kink(mask: np.ndarray) -> None:
    for rec in _kink_stack:
        rec.append(np.array(mask, copy=True))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self):
        from .autodiff import backward
        return backward(self)

    # operator sugar
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over the axes that were expanded from size 1 to reach it."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Broadcast restricted to size-1 axes of equal-rank operands (scalars allowed)."""
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) != len(b):
        raise ValueError(f"shape mismatch: {a} vs {b}")
    out = []
    for m, n in zip(a, b):
        if m == n or n == 1:
            out.append(m)
        elif m == 1:
            out.append(n)
        else:
            raise ValueError(f"shape mismatch: {a} vs {b}")
    return tuple(out)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b) -> Tensor:
    """Apply ``add``, ``sub`` or ``mul`` pointwise with size-1 broadcasting."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat needs at least one part")
    ref = parts[0].shape
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
                m != n for i, (m, n) in enumerate(zip(p.shape, ref)) if i != axis % len(ref)):
            raise ValueError(f"concat: incompatible shapes {ref} and {p.shape} along axis {axis}")
    if len(parts) == 1:
        return parts[0]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Channel-wise concatenation of NCHW tensors, blocks in argument order."""
    return concat(parts, axis=1)


def reshape(x: Tensor, new_shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    new_shape = tuple(int(n) for n in new_shape)
    if new_shape.count(-1) == 1:
        known = int(np.prod([n for n in new_shape if n != -1]))
        if known and x.size % known == 0:
            new_shape = tuple(x.size // known if n == -1 else n for n in new_shape)
    if int(np.prod(new_shape)) != x.size:
        raise ValueError(f"cannot reshape {x.shape} ({x.size} elements) to {new_shape}")
    old = x.shape
    return _make(x.data.reshape(new_shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes are batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), backward, "matmul")


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    _note_kink(inside)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def max_axis(x: Tensor, axis: int = 1) -> Tensor:
    """Max over one axis (kept); the gradient goes to the first maximiser."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    _note_kink(idx)
    idx_k = np.expand_dims(idx, axis)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx_k, g, axis=axis)
        return (out,)

    return _make(np.take_along_axis(x.data, idx_k, axis=axis), (x,), backward, "max")


def flip(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.flip(x.data, axis=axis).copy(), (x,),
                 lambda g: (np.flip(g, axis=axis).copy(),), "flip")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 stream; same seed, same samples on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))
