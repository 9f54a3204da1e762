"""Dense tensors with tape-recorded reverse-mode differentiation.

Values are numpy arrays wrapped in :class:`Tensor`.  Operations executed while
a :class:`Tape` is active, and that touch at least one tensor with
``requires_grad=True``, append an entry to that tape; :meth:`Tape.backward`
then walks the entries in reverse to produce gradients.

Training runs in 32-bit; gradient checks switch to 64-bit with
``with precision(np.float64): ...``.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "DimensionError", "ContractError", "NonFiniteError",
    "precision", "default_dtype", "backward",
    "add", "sub", "mul", "neg", "matmul", "conv2d", "relu", "exp", "log",
    "sum", "mean", "total", "log_softmax", "softmax", "gather", "max_pool2d",
    "reshape", "concat", "take_rows", "stop_gradient",
]


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_dtype = np.dtype(np.float32)
_local = threading.local()
_ids = itertools.count()


def default_dtype() -> np.dtype:
    return _dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _dtype
    old = _dtype
    _dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _dtype = old


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _dtype)
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, rows):
        return take_rows(self, rows)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class TapeEntry(NamedTuple):
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Entries are appended in execution order, so every input is produced
    before its consumer.  The tape is a context manager and may be
    re-entered to extend a recording (e.g. the loss computed after a
    recorded forward pass).
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, op, inputs, output, backward_fn):
        self.entries.append(TapeEntry(op, tuple(t.id for t in inputs), output.id,
                                      tuple(inputs), backward_fn))

    def backward(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradient of scalar ``loss`` for each of ``params``.

        Parameters the loss does not depend on get zeros.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output_id, None)
            if g is None:
                continue
            for inp, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp.id)
                grads[inp.id] = gi if prev is None else prev + gi
        out = []
        for p in params:
            g = grads.get(p.id)
            out.append(np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype))
        return out


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    return tape.backward(loss, params)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = np.asarray(out, dtype=_result_dtype(inputs))
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    result = Tensor(out)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(op, inputs, result, backward_fn)
    return result


def _result_dtype(inputs):
    return inputs[0].dtype if inputs else _dtype


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _emit("log", out, (a,), lambda g: (g / x,))


# linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with kernels ``w`` (F,C,kh,kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xd, wdat = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = wdat.reshape(f, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def _backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (gm.T @ cols).reshape(f, c, kh, kw)
        gcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw

    return _emit("conv2d", np.ascontiguousarray(out), (x, w), _backward)


def max_pool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects N,C,H,W, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise DimensionError(f"max_pool2d input {h}x{w} too small")
    blocks = x.data[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def _backward(g):
        gb = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        if (2 * ho, 2 * wo) == (h, w):
            return (gb,)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, :2 * ho, :2 * wo] = gb
        return (gx,)

    return _emit("max_pool2d", out, (x,), _backward)


# reductions and shape

def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    shape = x.shape

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), _backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    count = x.data.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit("mean", np.mean(x.data, axis=axis, keepdims=keepdims), (x,), _backward)


def total(x) -> Tensor:
    """Correctly rounded sum of all elements.

    Unlike :func:`sum` the result does not depend on element order or count
    splitting, which keeps per-batch loss normalisation exact.
    """
    x = _as_tensor(x)
    shape = x.shape
    value = math.fsum(x.data.ravel().tolist())
    return _emit("total", np.asarray(value, dtype=x.dtype), (x,),
                 lambda g: (np.full(shape, g, dtype=g.dtype),))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _emit("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def take_rows(x, rows) -> Tensor:
    """Basic slicing along the leading axis."""
    x = _as_tensor(x)
    if not isinstance(rows, slice):
        raise TypeError("take_rows supports slices only")
    shape = x.shape

    def _backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[rows] = g
        return (gx,)

    return _emit("take_rows", x.data[rows], (x,), _backward)


def gather(x, index) -> Tensor:
    """Pick ``x[i, index[i]]`` from a 2-D tensor; the hard-label lookup."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"gather expects (N,K) and (N,), got {x.shape} and {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise IndexError(f"gather index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def _backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[rows, index] = g
        return (gx,)

    return _emit("gather", x.data[rows, index], (x,), _backward)


# probability

def log_softmax(z, axis: int = -1) -> Tensor:
    z = _as_tensor(z)
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def _backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (z,), _backward)


def softmax(z, axis: int = -1) -> Tensor:
    z = _as_tensor(z)
    e = np.exp(z.data - z.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (z,), _backward)


def stop_gradient(x) -> Tensor:
    """Same values, cut from the graph."""
    x = _as_tensor(x)
    return Tensor(x.data, requires_grad=False)
