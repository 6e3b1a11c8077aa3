"""
Dense tensors with a reverse-mode differentiation tape.

Defines the Tensor class, the Tape that records primitive operations while it
is active, the primitive operations themselves and `backward`, which replays a
tape in reverse to produce exact gradients for every leaf.

Operations only record while a Tape context is active on the current thread.
Outside a tape they run in inference mode and keep no history.
"""
import contextlib
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, DimensionError, NaNPropagationError

_state = threading.local()


def default_dtype():
    """Return the floating point dtype new tensors are created with on this thread."""
    return getattr(_state, "dtype", np.float64)


@contextlib.contextmanager
def use_dtype(dtype):
    """
    Temporarily switch the default dtype (float64 or float32).

    Args:
        dtype: numpy floating dtype to use inside the context
    """
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ContractError(f"unsupported dtype {dtype}")
    previous = default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = previous


@dataclass
class Record:
    """One recorded primitive: inputs, output and the vector-Jacobian product."""
    op: str
    inputs: tuple
    output: "Tensor"
    vjp: Callable


class Tape:
    """
    Ordered list of recorded primitive operations.

    Use as a context manager; every operation evaluated inside the context on
    this thread is appended in execution order, which is a topological order.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, op, inputs, output, vjp):
        rec = Record(op, inputs, output, vjp)
        self.records.append(rec)
        return rec

    @staticmethod
    def current():
        """Return the innermost active tape on this thread, or None."""
        stack = _tape_stack()
        return stack[-1] if stack else None


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


class Tensor:
    """
    Immutable dense N-dimensional array.

    Attributes:
        data (np.ndarray): Row-major values, read-only
        requires_grad (bool): True for leaves that should receive gradients
        name (str | None): Optional label, used for parameters
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype(), copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None
        self._record = None

    @classmethod
    def _wrap(cls, arr):
        # Internal constructor for operation outputs; no copy of data.
        out = cls.__new__(cls)
        arr = np.asarray(arr)
        arr.setflags(write=False)
        out.data = arr
        out.requires_grad = False
        out.name = None
        out._tape = None
        out._record = None
        return out

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad_record(self):
        """The tape record that produced this tensor, or None for leaves and constants."""
        return self._record

    def numpy(self):
        """Return a writable copy of the values."""
        return np.array(self.data)

    def item(self):
        if self.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        label = f", name={self.name}" if self.name else ""
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad}{label})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def as_tensor(value):
    """Wrap scalars and arrays as constant tensors; tensors pass through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def zeros(shape):
    return Tensor._wrap(np.zeros(shape, dtype=default_dtype()))


def _apply(op, inputs, out_data, vjp):
    """Wrap an operation result and record it if any input is tracked on the active tape."""
    out = Tensor._wrap(out_data)
    tape = Tape.current()
    if tape is not None and any(t.requires_grad or t._tape is tape for t in inputs):
        out._tape = tape
        out._record = tape.record(op, tuple(inputs), out, vjp)
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# Elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply("add", (a, b), a.data + b.data, vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _apply("sub", (a, b), a.data - b.data, vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _apply("mul", (a, b), a.data * b.data, vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")

    def vjp(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _apply("div", (a, b), a.data / b.data, vjp)


def neg(a):
    a = as_tensor(a)
    return _apply("neg", (a,), -a.data, lambda g: (-g,))


def power(a, exponent):
    """Raise to a constant real exponent."""
    a = as_tensor(a)
    out = a.data ** exponent

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _apply("power", (a,), out, vjp)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _apply("exp", (a,), out, lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _apply("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _apply("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def gelu(a):
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d_inner = c * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _apply("gelu", (a,), out, vjp)


# Reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _apply("sum", (a,), out, vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def max_along(a, axis):
    """
    Maximum along one axis; the gradient flows to the first (lowest-index) maximum.

    Args:
        a (Tensor): Input
        axis (int): Axis to reduce

    Returns:
        Tensor: `a` with `axis` removed
    """
    a = as_tensor(a)
    axis = axis % a.ndim
    arg = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def vjp(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _apply("max_along", (a,), out, vjp)


# Linear algebra and layout

def matmul(a, b):
    """
    Matrix product over the last two axes; leading axes of `b` may be absent.

    Raises:
        DimensionError: If the inner extents differ
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _apply("matmul", (a, b), out, vjp)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))
    return _apply("transpose", (a,), np.transpose(a.data, axes),
                  lambda g: (np.transpose(g, inverse),))


def swap_last(a):
    """Swap the last two axes."""
    a = as_tensor(a)
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}")
    return _apply("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}")
    return _apply("broadcast_to", (a,), out, lambda g: (_unbroadcast(g, a.shape),))


def take(a, key):
    """Index with any numpy basic or advanced key; the gradient scatter-adds."""
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _apply("take", (a,), np.array(out), vjp)


def concat(tensors, axis=-1):
    """
    Concatenate along one axis (the channel axis by default).

    Raises:
        DimensionError: If the non-concatenated extents differ
    """
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}")
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _apply("concat", tuple(tensors), out, vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}")
    ax = axis % out.ndim

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _apply("stack", tuple(tensors), out, vjp)


def mean_of(tensors):
    """Arithmetic mean over a list of equally shaped tensors, summed in list order."""
    if not tensors:
        raise ContractError("mean_of needs at least one tensor")
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return mul(total, 1.0 / len(tensors))


def _flat_rows(x_shape, idx, op):
    """Broadcast a row-index array against the batch axes of x and flatten both."""
    batch = tuple(x_shape[:-2])
    idx = np.asarray(idx, dtype=np.int64)
    try:
        idx = np.broadcast_to(idx, batch + idx.shape[-1:])
    except ValueError:
        raise DimensionError(f"{op}: index shape {idx.shape} does not fit batch {batch}")
    n = x_shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"{op}: row index out of range for {n} rows")
    flat = idx.reshape(-1, idx.shape[-1])
    rows = np.arange(flat.shape[0])[:, None]
    return batch, flat, rows


def gather_rows(x, idx):
    """
    Select rows along the second-to-last axis, per batch entry.

    Args:
        x (Tensor): [..., n, D]
        idx (array-like): [..., k] row indices, broadcast over the batch axes

    Returns:
        Tensor: [..., k, D] with out[..., i, :] = x[..., idx[..., i], :]
    """
    x = as_tensor(x)
    batch, flat, rows = _flat_rows(x.shape, idx, "gather_rows")
    n, d = x.shape[-2], x.shape[-1]
    xf = x.data.reshape(-1, n, d)
    out = xf[rows, flat].reshape(batch + (flat.shape[1], d))

    def vjp(g):
        grad = np.zeros_like(xf)
        np.add.at(grad, (rows, flat), g.reshape(-1, flat.shape[1], d))
        return (grad.reshape(x.shape),)

    return _apply("gather_rows", (x,), out, vjp)


def scatter_rows(base, idx, rows_in):
    """
    Replace rows of `base` at `idx` with `rows_in`; indices must be unique per batch entry.

    Args:
        base (Tensor): [..., n, D]
        idx (array-like): [..., k]
        rows_in (Tensor): [..., k, D]

    Returns:
        Tensor: copy of `base` with the indexed rows replaced
    """
    base, rows_in = as_tensor(base), as_tensor(rows_in)
    batch, flat, rows = _flat_rows(base.shape, idx, "scatter_rows")
    n, d = base.shape[-2], base.shape[-1]
    if rows_in.shape != batch + (flat.shape[1], d):
        raise DimensionError(
            f"scatter_rows: rows {rows_in.shape} do not match {batch + (flat.shape[1], d)}")
    out = base.data.reshape(-1, n, d).copy()
    out[rows, flat] = rows_in.data.reshape(-1, flat.shape[1], d)

    def vjp(g):
        gf = g.reshape(-1, n, d)
        g_rows = gf[rows, flat].reshape(rows_in.shape)
        g_base = gf.copy()
        g_base[rows, flat] = 0.0
        return g_base.reshape(base.shape), g_rows

    return _apply("scatter_rows", (base, rows_in), out.reshape(base.shape), vjp)


# Normalizers

def softmax_rows(x):
    """
    Softmax over the trailing axis, stabilized by max subtraction.

    Raises:
        NaNPropagationError: If the input holds NaN values
    """
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NaNPropagationError("softmax_rows received NaN input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _apply("softmax_rows", (x,), y, vjp)


def log_softmax_rows(x):
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NaNPropagationError("log_softmax_rows received NaN input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    soft = np.exp(y)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _apply("log_softmax_rows", (x,), y, vjp)


def l2_normalize(x, axis=-1, eps=1e-12):
    """Divide by the L2 norm over `axis` (the channel axis by default)."""
    x = as_tensor(x)
    norm = power(add(sum(mul(x, x), axis=axis, keepdims=True), eps), 0.5)
    return div(x, norm)


# Differentiation

def backward(loss):
    """
    Replay the loss's tape in reverse and return gradients for every reachable leaf.

    Args:
        loss (Tensor): Scalar recorded on an active or finished tape

    Returns:
        dict[Tensor, Tensor]: leaf -> gradient with the leaf's shape. Leaves
        without requires_grad (frozen weights, constants) are absent.

    Raises:
        ContractError: If loss is not a scalar or was not recorded
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not recorded on a tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, g_in in zip(rec.inputs, rec.vjp(g)):
            if g_in is None:
                continue
            if inp._tape is tape:
                key = id(inp)
            elif inp.requires_grad:
                key = id(inp)
                leaves[key] = inp
            else:
                continue
            if key in grads:
                grads[key] = grads[key] + g_in
            else:
                grads[key] = np.array(g_in, dtype=inp.dtype)
    return {leaf: Tensor(grads[key], dtype=leaf.dtype) for key, leaf in leaves.items()}
