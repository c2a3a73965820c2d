"""Reverse-mode automatic differentiation over dense numpy arrays.

Operations are recorded on the innermost active :class:`Tape`; calling
:meth:`Tape.backward` replays them in reverse creation order, which is a
valid reverse topological order for a dynamically built graph.

Shapes are explicit. Binary ops accept equal shapes, a scalar operand, or a
trailing 1-D operand (bias add). Anything else goes through
:func:`broadcast_to` first.
"""
from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractViolation, RejectedInput

_FLOATS = (np.float32, np.float64)
_STACK: list = []
_DEBUG = os.environ.get("AVSDF_DEBUG", "") not in ("", "0")

# GEMM operands are padded to at least this many rows and columns so that
# every output row goes through the same BLAS kernel regardless of batch size.
_STABLE_MIN = 16


def set_debug(flag: bool) -> None:
    """Toggle the NaN/Inf assertion run after every op."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = data.data if isinstance(data, Tensor) else np.asarray(data)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __getitem__(self, index):
        return gather(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def astype(self, dtype):
        return astype(self, dtype)


class SparseGrad:
    """Gradient that is non-zero only at ``index``; accumulated in place."""

    __slots__ = ("index", "values", "unique")

    def __init__(self, index, values, unique: bool):
        self.index = index
        self.values = values
        self.unique = unique

    def add_into(self, buf: np.ndarray) -> None:
        vals = self.values.astype(buf.dtype, copy=False)
        if self.unique:
            buf[self.index] += vals
        else:
            np.add.at(buf, self.index, vals)


class Tape:
    """Records operations for one forward pass.

    Use as a context manager; ops executed inside record a node whenever at
    least one input requires a gradient.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, *exc):
        _STACK.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, out, parents, backward):
        self._nodes.append((out, parents, backward))

    def backward(self, output: Tensor, wrt: Sequence[Tensor] | None = None,
                 seed: np.ndarray | None = None) -> list[np.ndarray]:
        """Reverse pass from a scalar ``output``.

        Returns one gradient array per tensor in ``wrt``; tensors that did not
        take part in the recorded graph get zeros. Each leaf's ``grad`` is not
        stored on the tensor, callers keep the returned list.
        """
        if output.size != 1 and seed is None:
            raise ContractViolation(f"backward needs a scalar output, got shape {output.shape}")
        wrt = list(wrt or [])
        keep = {id(w) for w in wrt}
        owned: set = set()  # gradient buffers allocated here, safe to update in place
        grads: dict[int, np.ndarray] = {
            id(output): np.ones_like(output.data) if seed is None else np.asarray(seed, output.dtype)
        }
        for out, parents, fn in reversed(self._nodes):
            key = id(out)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            for p, gp in zip(parents, fn(g)):
                if gp is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                pk = id(p)
                prev = grads.get(pk)
                if isinstance(gp, SparseGrad):
                    if prev is None or pk not in owned:
                        prev = np.zeros_like(p.data) if prev is None else np.array(prev, copy=True)
                        owned.add(pk)
                    gp.add_into(prev)
                    grads[pk] = prev
                    continue
                if gp.dtype != p.data.dtype:
                    gp = gp.astype(p.data.dtype)
                if prev is None:
                    grads[pk] = gp
                elif pk in owned:
                    prev += gp
                else:
                    grads[pk] = prev + gp
                    owned.add(pk)
        return [grads.get(id(w), np.zeros_like(w.data)) for w in wrt]


class no_grad:
    """Context manager that suspends recording on every enclosing tape."""

    def __enter__(self):
        _STACK.append(None)
        return self

    def __exit__(self, *exc):
        _STACK.pop()
        return False


def active_tape() -> Tape | None:
    return _STACK[-1] if _STACK else None


def is_recording(*tensors) -> bool:
    tape = active_tape()
    if tape is None:
        return False
    return any(isinstance(t, Tensor) and t.requires_grad for t in tensors)


def custom_op(data: np.ndarray, parents: Sequence, backward: Callable) -> Tensor:
    """Wrap a forward result and its backward closure as a graph node.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        tape._record(out, tuple(parents), backward)
    if _DEBUG and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by a tensor op")
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x if dtype is None or x.dtype == dtype else astype(x, dtype)
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr)


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _const(x, like: np.ndarray) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=like.dtype)


def check_finite(x, what: str = "input") -> None:
    if not np.all(np.isfinite(_data(x))):
        raise RejectedInput(f"non-finite values in {what}")


# --------------------------------------------------------------------------
# elementwise binary ops


def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0 or b.size == 1 and b.ndim <= 1:
        return "b_scalar"
    if a.ndim == 0 or a.size == 1 and a.ndim <= 1:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "b_bias"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "a_bias"
    raise ContractViolation(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, side: str, shape) -> np.ndarray:
    if kind == "same":
        return g
    if (kind == "b_scalar" and side == "b") or (kind == "a_scalar" and side == "a"):
        return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype).reshape(shape)
    if (kind == "b_bias" and side == "b") or (kind == "a_bias" and side == "a"):
        return g.reshape(-1, g.shape[-1]).sum(axis=0, dtype=np.float64).astype(g.dtype)
    return g


def _binary(a, b, fwd, grad_a, grad_b):
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    if not ta and not tb:
        raise ContractViolation("binary op needs at least one Tensor operand")
    ref = a.data if ta else b.data
    ad = _const(a, ref)
    bd = _const(b, ref)
    kind = _broadcast_kind(ad, bd)
    out = fwd(ad, bd)

    def backward(g):
        ga = _reduce_to(grad_a(g, ad, bd, out), kind, "a", ad.shape) if ta and a.requires_grad else None
        gb = _reduce_to(grad_b(g, ad, bd, out), kind, "b", bd.shape) if tb and b.requires_grad else None
        return ga, gb

    return custom_op(out, (a, b), backward)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, np.divide, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * o / y)


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,))


# --------------------------------------------------------------------------
# matrix products


def _stable_gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D product whose rows do not depend on the other rows of ``a``."""
    n, m = a.shape[0], b.shape[1]
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    if m < _STABLE_MIN:
        b = np.concatenate([b, np.zeros((b.shape[0], _STABLE_MIN - m), b.dtype)], axis=1)
    if n < _STABLE_MIN:
        a = np.concatenate([a, np.zeros((_STABLE_MIN - n, a.shape[1]), a.dtype)], axis=0)
    out = a @ b
    if out.shape != (n, m):
        out = np.ascontiguousarray(out[:n, :m])
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands or equally batched 3-D operands."""
    ad, bd = _data(a), _data(b)
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ContractViolation(f"matmul shapes {ad.shape} @ {bd.shape}")
        if ad.dtype != bd.dtype:
            dt = np.result_type(ad, bd)
            ad, bd = ad.astype(dt), bd.astype(dt)
        out = _stable_gemm(ad, bd)
    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ContractViolation(f"batched matmul shapes {ad.shape} @ {bd.shape}")
        out = np.matmul(ad, bd)
    else:
        raise ContractViolation(f"matmul needs 2-D or 3-D operands, got {ad.shape} @ {bd.shape}")

    def backward(g):
        ga = gb = None
        if isinstance(a, Tensor) and a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if isinstance(b, Tensor) and b.requires_grad:
            if ad.ndim == 3 and ad.shape[1] == 1:
                # batched outer product; broadcasting beats a k=1 matmul
                gb = np.swapaxes(ad, -1, -2) * g
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return custom_op(out, (a, b), backward)


# --------------------------------------------------------------------------
# unary ops


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return custom_op(out, (x,), lambda g: (np.where(out > 0, g, 0).astype(g.dtype, copy=False),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return custom_op(out, (x,), lambda g: (g * (1 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return custom_op(out, (x,), lambda g: (g * out * (1 - out),))


def sin(x: Tensor) -> Tensor:
    return custom_op(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x: Tensor) -> Tensor:
    return custom_op(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return custom_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return custom_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    safe = np.where(out > 0, out, 1)
    return custom_op(out, (x,), lambda g: (np.where(out > 0, g / (2 * safe), 0).astype(g.dtype),))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # d|x|/dx at 0 is defined as 0
    return custom_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x: Tensor) -> Tensor:
    return custom_op(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return custom_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def astype(x: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    if x.dtype == dtype:
        return x
    src = x.dtype
    return custom_op(x.data.astype(dtype), (x,), lambda g: (g.astype(src),))


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is zero."""
    d = x.data
    out = np.sqrt(np.sum(d * d, axis=axis))

    def backward(g):
        safe = np.where(out > 0, out, 1)
        scale = np.where(out > 0, g / safe, 0).astype(d.dtype)
        return (np.expand_dims(scale, axis) * d,)

    return custom_op(out, (x,), backward)


# --------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(np.sum(x.data, axis=axis, dtype=np.float64, keepdims=keepdims), dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return custom_op(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    if count == 0:
        raise ContractViolation("mean of an empty tensor")
    s = np.sum(x.data, axis=axis, dtype=np.float64, keepdims=keepdims) / count
    out = np.asarray(s, dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / count).astype(x.dtype),)

    return custom_op(out, (x,), backward)


def _arg_reduce(x: Tensor, axis: int, pick):
    d = x.data
    axis = axis % d.ndim
    idx = pick(d, axis=axis)  # numpy returns the first occurrence on ties
    vals = np.take_along_axis(d, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(d)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return custom_op(vals, (x,), backward), idx


def min_reduce(x: Tensor, axis: int = -1):
    """Minimum along ``axis``; returns ``(values, argmin)``.

    The gradient flows only to the argmin entry, ties going to the lowest index.
    """
    return _arg_reduce(x, axis, np.argmin)


def max_reduce(x: Tensor, axis: int = -1):
    return _arg_reduce(x, axis, np.argmax)


def segment_max(x: Tensor, offsets: np.ndarray) -> Tensor:
    """Row-wise max over contiguous segments ``x[offsets[i]:offsets[i+1]]``.

    Gradient goes to the lowest-index maximal row of each segment and column.
    """
    d = x.data
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets[0] != 0 or offsets[-1] != d.shape[0] or np.any(np.diff(offsets) <= 0):
        raise ContractViolation("segment offsets must partition the rows into non-empty runs")
    n_seg = len(offsets) - 1
    arg = np.empty((n_seg, d.shape[1]), dtype=np.int64)
    out = np.empty((n_seg, d.shape[1]), dtype=d.dtype)
    for s in range(n_seg):
        block = d[offsets[s]:offsets[s + 1]]
        a = np.argmax(block, axis=0)
        arg[s] = a + offsets[s]
        out[s] = block[a, np.arange(d.shape[1])]

    def backward(g):
        gx = np.zeros_like(d)
        cols = np.broadcast_to(np.arange(d.shape[1]), arg.shape)
        gx[arg, cols] = g  # (row, col) pairs are unique across segments
        return (gx,)

    return custom_op(out, (x,), backward)


# --------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return custom_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return custom_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = np.broadcast_to(x.data, shape)
    lead = len(shape) - len(src)

    def backward(g):
        axes = tuple(range(lead)) + tuple(
            i + lead for i, s in enumerate(src) if s == 1 and shape[i + lead] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (g.reshape(src),)

    return custom_op(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrs = [_data(t) for t in tensors]
    out = np.concatenate(arrs, axis=axis)
    sizes = np.cumsum([a.shape[axis] for a in arrs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return custom_op(out, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrs = [_data(t) for t in tensors]
    out = np.stack(arrs, axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(arrs)))

    return custom_op(out, tuple(tensors), backward)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def gather(x: Tensor, index, unique: bool = False) -> Tensor:
    """``x[index]`` for basic or advanced indices.

    ``unique=True`` promises that advanced indices select distinct entries so
    the backward pass can assign instead of accumulate.
    """
    out = x.data[index]
    basic = _is_basic(index)

    def backward(g):
        return (SparseGrad(index, g, basic or unique),)

    if basic:
        out = np.array(out, copy=True)
    return custom_op(out, (x,), backward)


def index_put(base: Tensor, index, values: Tensor) -> Tensor:
    """Copy of ``base`` with ``base[index] = values``; ``index`` must not repeat."""
    out = np.array(_data(base), copy=True)
    out[index] = _data(values)

    def backward(g):
        gb = np.array(g, copy=True)
        gb[index] = 0
        return gb, g[index]

    return custom_op(out, (base, values), backward)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    ad, bd = _data(a), _data(b)
    if ad.shape != bd.shape or mask.shape != ad.shape:
        raise ContractViolation("where needs equally shaped mask and operands")
    out = np.where(mask, ad, bd)
    return custom_op(out, (a, b), lambda g: (g * mask, g * ~mask))


def maximum_const(x: Tensor, c: float) -> Tensor:
    return add(relu(sub(x, c)), c)


def parameters(items: Iterable[tuple[str, np.ndarray]]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in items}
