"""Dense tensors and a minimal reverse-mode differentiation tape.

Everything downstream (mixers, attention, blocks, training) is built from the
primitives in this module.  Values are plain numpy arrays (float32 or float64,
row-major); gradients are computed by recording primitive applications on a
:class:`Tape` and replaying the records backwards.

Conventions:

* operations are pure; a ``Tensor`` is never mutated after construction,
* both operands of a binary op must share one dtype (no silent upcasting),
* broadcasting is limited to python scalars and a trailing-axis bias vector;
  anything else goes through an explicit :func:`expand`.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

# tanh-approximation GELU, canonical constant set
GELU_C0 = math.sqrt(2.0 / math.pi)
GELU_C1 = 0.044715


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on invalid tape usage (non-scalar loss, unknown parameter...)."""


class Tensor:
    """A dense row-major array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x if dtype is None or x.dtype == dtype else x.astype(dtype)
    return Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("op", "out", "inputs", "forward_fn", "backward_fn")

    def __init__(self, op, out, inputs, forward_fn, backward_fn):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.forward_fn = forward_fn
        self.backward_fn = backward_fn


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications.

    Appending order is a topological order of the compute graph, so the
    backward pass is a single reversed sweep over the records.  A tape is
    owned by one thread: enter it as a context manager, run the forward
    computation inside, then call :meth:`backward` on a scalar output.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape context exited out of order")
        stack.pop()

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor],
               forward_fn: Callable, backward_fn: Callable) -> None:
        out.requires_grad = True
        self.nodes.append(_Node(op, out, tuple(inputs), forward_fn, backward_fn))

    def replay(self) -> None:
        """Re-execute every recorded forward in order, in place.

        Rewrites each node's output buffer from its inputs; with unchanged
        leaves the result is bit-for-bit identical to the original run.
        """
        for node in self.nodes:
            node.out.data = node.forward_fn(*[t.data for t in node.inputs])

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
        """Accumulate d(loss)/d(leaf) for every recorded leaf.

        ``loss`` must be a scalar produced on this tape.  Returns a dict
        mapping parameter Tensor -> gradient array; also stores gradients on
        ``t.grad`` for every leaf with ``requires_grad``.  With an explicit
        ``params`` list, a parameter that never occurred on the tape raises.
        """
        if loss.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if not any(node.out is loss for node in self.nodes):
            raise TapeError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        produced = {id(node.out) for node in self.nodes}
        leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}

        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            need = tuple(t.requires_grad for t in node.inputs)
            input_grads = node.backward_fn(g, need)
            for t, ig in zip(node.inputs, input_grads):
                if ig is None:
                    continue
                if id(t) in produced:
                    acc = grads.get(id(t))
                    grads[id(t)] = ig if acc is None else acc + ig
                elif t.requires_grad:
                    prev = leaf_grads.get(id(t))
                    leaf_grads[id(t)] = (t, ig if prev is None else prev[1] + ig)

        out: dict[Tensor, np.ndarray] = {}
        for t, g in leaf_grads.values():
            t.grad = g
            out[t] = g
        if params is not None:
            requested = {}
            for p in params:
                if id(p) not in leaf_grads:
                    label = p.name or f"parameter with shape {p.shape}"
                    raise TapeError(f"{label} was not recorded on the tape")
                requested[p] = leaf_grads[id(p)][1]
            return requested
        return out


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    return tape.backward(loss, params=params)


def _maybe_record(op, out, inputs, forward_fn, backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, out, inputs, forward_fn, backward_fn)
    return out


def record(op, out, inputs, forward_fn, backward_fn) -> Tensor:
    """Public hook for fused primitives defined outside this module."""
    return _maybe_record(op, out, inputs, forward_fn, backward_fn)


def _check_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands or equal-batch stacks of matrices."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype("matmul", a, b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: incompatible batched shapes {a.shape} x {b.shape}")
    else:
        raise ShapeError(f"matmul: expects 2-D or 3-D pairs, got {a.shape} x {b.shape}")

    out = Tensor(a.data @ b.data)

    def fwd(ad, bd):
        return ad @ bd

    def bwd(g, need):
        ga = g @ np.swapaxes(b.data, -1, -2) if need[0] else None
        gb = np.swapaxes(a.data, -1, -2) @ g if need[1] else None
        return ga, gb

    return _maybe_record("matmul", out, (a, b), fwd, bwd)


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> str:
    """Classify the allowed add/sub/mul operand layouts."""
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "bias"
    if b.size == 1 and b.ndim == 0:
        return "scalar"
    raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to_bias(g: np.ndarray, ndim: int) -> np.ndarray:
    axes = tuple(range(g.ndim - 1)) if g.ndim > 1 else ()
    return g.sum(axis=axes) if axes else g.copy()


def add(a, b) -> Tensor:
    """Elementwise sum; the right operand may be a trailing-axis bias or scalar."""
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype) if not isinstance(b, Tensor) else b
    _check_same_dtype("add", a, b)
    kind = _binary_shapes("add", a, b)
    out = Tensor(a.data + b.data)

    def fwd(ad, bd):
        return ad + bd

    def bwd(g, need):
        ga = g if need[0] else None
        if not need[1]:
            gb = None
        elif kind == "same":
            gb = g
        elif kind == "bias":
            gb = _reduce_to_bias(g, b.ndim)
        else:
            gb = np.asarray(g.sum(), dtype=b.dtype.type)
        return ga, gb

    return _maybe_record("add", out, (a, b), fwd, bwd)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype) if not isinstance(b, Tensor) else b
    _check_same_dtype("sub", a, b)
    kind = _binary_shapes("sub", a, b)
    out = Tensor(a.data - b.data)

    def fwd(ad, bd):
        return ad - bd

    def bwd(g, need):
        ga = g if need[0] else None
        if not need[1]:
            gb = None
        elif kind == "same":
            gb = -g
        elif kind == "bias":
            gb = -_reduce_to_bias(g, b.ndim)
        else:
            gb = np.asarray(-g.sum(), dtype=b.dtype.type)
        return ga, gb

    return _maybe_record("sub", out, (a, b), fwd, bwd)


def mul(a, b) -> Tensor:
    """Hadamard product; the right operand may be a scalar."""
    if isinstance(b, (int, float)) and not isinstance(b, bool):
        return scale(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def fwd(ad, bd):
        return ad * bd

    def bwd(g, need):
        ga = g * b.data if need[0] else None
        gb = g * a.data if need[1] else None
        return ga, gb

    return _maybe_record("mul", out, (a, b), fwd, bwd)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = a.dtype.type(s)
    out = Tensor(a.data * s)
    return _maybe_record("scale", out, (a,),
                         lambda ad: ad * s,
                         lambda g, need: (g * s if need[0] else None,))


def scale_shift(a, s: float, b: float) -> Tensor:
    """Elementwise affine map x -> s*x + b with python-scalar coefficients."""
    a = as_tensor(a)
    s, b = a.dtype.type(s), a.dtype.type(b)
    out = Tensor(a.data * s + b)
    return _maybe_record("scale_shift", out, (a,),
                         lambda ad: ad * s + b,
                         lambda g, need: (g * s if need[0] else None,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def identity(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.copy())
    return _maybe_record("identity", out, (a,),
                         lambda ad: ad.copy(),
                         lambda g, need: (g if need[0] else None,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(_sigmoid(a.data))

    def bwd(g, need):
        if not need[0]:
            return (None,)
        y = out.data
        return (g * y * (1.0 - y),)

    return _maybe_record("sigmoid", out, (a,), _sigmoid, bwd)


def _gelu(x: np.ndarray) -> np.ndarray:
    c0 = x.dtype.type(GELU_C0)
    c1 = x.dtype.type(GELU_C1)
    half = x.dtype.type(0.5)
    return half * x * (1.0 + np.tanh(c0 * (x + c1 * x * x * x)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    c0 = x.dtype.type(GELU_C0)
    c1 = x.dtype.type(GELU_C1)
    inner = c0 * (x + c1 * x * x * x)
    t = np.tanh(inner)
    dinner = c0 * (1.0 + 3.0 * c1 * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


def gelu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(_gelu(a.data))

    def bwd(g, need):
        if not need[0]:
            return (None,)
        return (g * _gelu_grad(a.data),)

    return _maybe_record("gelu", out, (a,), _gelu, bwd)


def _silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def silu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(_silu(a.data))

    def bwd(g, need):
        if not need[0]:
            return (None,)
        s = _sigmoid(a.data)
        return (g * (s + a.data * s * (1.0 - s)),)

    return _maybe_record("silu", out, (a,), _silu, bwd)


def reduce_mean(a, axis: int, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"reduce_mean: axis {axis} out of range for shape {a.shape}")
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.shape[axis]

    def fwd(ad):
        return ad.mean(axis=axis, keepdims=keepdims)

    def bwd(g, need):
        if not need[0]:
            return (None,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).astype(a.dtype, copy=False) + np.zeros_like(a.data),)

    return _maybe_record("reduce_mean", out, (a,), fwd, bwd)


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"reduce_sum: axis {axis} out of range for shape {a.shape}")
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def fwd(ad):
        return ad.sum(axis=axis, keepdims=keepdims)

    def bwd(g, need):
        if not need[0]:
            return (None,)
        if axis is None:
            return (np.full_like(a.data, g if np.ndim(g) == 0 else g.reshape(())) * 1.0,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.zeros_like(a.data) + gg,)

    return _maybe_record("reduce_sum", out, (a,), fwd, bwd)


def chunk(a, k: int, axis: int = -1) -> list[Tensor]:
    """Split into k equal parts along an axis; exact inverse of :func:`concat`."""
    a = as_tensor(a)
    ax = axis % a.ndim
    extent = a.shape[ax]
    if extent % k != 0:
        raise ShapeError(f"chunk: extent {extent} of axis {axis} not divisible by {k}")
    step = extent // k
    parts = []
    for i in range(k):
        lo, hi = i * step, (i + 1) * step
        sl = tuple(slice(lo, hi) if d == ax else slice(None) for d in range(a.ndim))
        out = Tensor(a.data[sl].copy())

        def fwd(ad, sl=sl):
            return ad[sl].copy()

        def bwd(g, need, sl=sl):
            if not need[0]:
                return (None,)
            full = np.zeros_like(a.data)
            full[sl] = g
            return (full,)

        parts.append(_maybe_record("chunk", out, (a,), fwd, bwd))
    return parts


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty part list")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    ax = axis % out.ndim
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def fwd(*datas):
        return np.concatenate(datas, axis=axis)

    def bwd(g, need):
        grads = []
        for i in range(len(parts)):
            if not need[i]:
                grads.append(None)
                continue
            sl = tuple(slice(offsets[i], offsets[i + 1]) if d == ax else slice(None)
                       for d in range(out.ndim))
            grads.append(g[sl])
        return grads

    return _maybe_record("concat", out, tuple(parts), fwd, bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bwd(g, need):
        if not need[0]:
            return (None,)
        return (g.reshape(a.shape),)

    return _maybe_record("reshape", out, (a,), lambda ad: ad.reshape(shape), bwd)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes).copy())

    def bwd(g, need):
        if not need[0]:
            return (None,)
        return (g.transpose(inv),)

    return _maybe_record("transpose", out, (a,), lambda ad: ad.transpose(axes).copy(), bwd)


def expand(a, axis: int, size: int) -> Tensor:
    """Broadcast an extent-1 axis to ``size`` (zero-copy view on the data)."""
    a = as_tensor(a)
    ax = axis % a.ndim
    if a.shape[ax] != 1:
        raise ShapeError(f"expand: axis {axis} of shape {a.shape} must have extent 1")
    target = tuple(size if d == ax else s for d, s in enumerate(a.shape))
    out = Tensor.__new__(Tensor)
    out.data = np.broadcast_to(a.data, target)
    out.grad = None
    out.requires_grad = False
    out.name = None

    def fwd(ad):
        return np.broadcast_to(ad, target)

    def bwd(g, need):
        if not need[0]:
            return (None,)
        return (g.sum(axis=ax, keepdims=True),)

    return _maybe_record("expand", out, (a,), fwd, bwd)


def cumsum(a, axis: int) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.cumsum(a.data, axis=axis))

    def bwd(g, need):
        if not need[0]:
            return (None,)
        rev = np.flip(g, axis=axis)
        return (np.flip(np.cumsum(rev, axis=axis), axis=axis),)

    return _maybe_record("cumsum", out, (a,), lambda ad: np.cumsum(ad, axis=axis), bwd)


def take_index(a, indices, axis: int) -> Tensor:
    """Gather along one axis with a shared integer index list (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(np.take(a.data, idx, axis=axis))

    def bwd(g, need):
        if not need[0]:
            return (None,)
        full = np.zeros_like(a.data)
        dest = np.moveaxis(full, axis, 0)
        np.add.at(dest, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _maybe_record("take_index", out, (a,), lambda ad: np.take(ad, idx, axis=axis), bwd)


def take_rows(table, indices) -> Tensor:
    """Row lookup into a 2-D table (embedding gather)."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(table.data[idx])

    def bwd(g, need):
        if not need[0]:
            return (None,)
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _maybe_record("take_rows", out, (table,), lambda td: td[idx], bwd)


def _layer_norm(x: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps)


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Affine-free layer normalization over the last axis."""
    a = as_tensor(a)
    eps = float(eps)
    out = Tensor(_layer_norm(a.data, eps))

    def bwd(g, need):
        if not need[0]:
            return (None,)
        x = a.data
        n = x.shape[-1]
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = xc * inv
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _maybe_record("layer_norm", out, (a,), lambda ad: _layer_norm(ad, eps), bwd)


def mul_const(a, c) -> Tensor:
    """Multiply by a constant array that broadcasts into ``a``'s shape.

    The constant never receives a gradient; use this for mask weights and
    per-row normalizers without materializing them at full size.
    """
    a = as_tensor(a)
    c = np.asarray(c, dtype=a.dtype)
    if np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise ShapeError(f"mul_const: {c.shape} does not broadcast into {a.shape}")
    out = Tensor(a.data * c)

    def bwd(g, need):
        if not need[0]:
            return (None,)
        return (g * c,)

    return _maybe_record("mul_const", out, (a,), lambda ad: ad * c, bwd)


def add_const(a, c) -> Tensor:
    """Add a constant array that broadcasts into ``a``'s shape (no gradient
    for the constant)."""
    a = as_tensor(a)
    c = np.asarray(c, dtype=a.dtype)
    if np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise ShapeError(f"add_const: {c.shape} does not broadcast into {a.shape}")
    out = Tensor(a.data + c)

    def bwd(g, need):
        return (g if need[0] else None,)

    return _maybe_record("add_const", out, (a,), lambda ad: ad + c, bwd)


def linear(x, w, b=None) -> Tensor:
    """Affine map over the trailing axis: reshape to rows, x @ w (+ b)."""
    x = as_tensor(x)
    w = as_tensor(w)
    lead = x.shape[:-1]
    rows = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    y = matmul(rows, w)
    if b is not None:
        y = add(y, b)
    if x.ndim != 2:
        y = reshape(y, lead + (w.shape[1],))
    return y


# raw-array activation forms plus derivatives, shared with fused kernels
sigmoid_array = _sigmoid
gelu_array = _gelu
gelu_grad_array = _gelu_grad
silu_array = _silu


def sigmoid_grad_array(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s * (1.0 - s)


def silu_grad_array(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s + x * s * (1.0 - s)


# ---------------------------------------------------------------------------
# finite differences (the independent oracle for every analytic gradient)
# ---------------------------------------------------------------------------

def finite_difference_gradients(f: Callable[[], float], params: Sequence[Tensor],
                                step: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``f()`` w.r.t. each parameter.

    ``f`` must re-read ``p.data`` on every call; it is evaluated without any
    tape.  Intended for float64 parameters only.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f()
            flat[i] = orig - step
            f_minus = f()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray],
                       floor: float = 1e-6) -> float:
    """Worst-case |a - n| / max(|a|, |n|, floor) across all parameters."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check_gradients(build_loss: Callable[[], Tensor], params: Sequence[Tensor],
                    step: float = 1e-5) -> tuple[float, str | None]:
    """Compare tape gradients of a scalar loss against central differences.

    ``build_loss`` runs the forward pass and returns the scalar loss; it is
    invoked once under a fresh tape (analytic path) and repeatedly without a
    tape (numeric path).  Returns (max relative error, name of worst param).
    """
    with Tape() as tape:
        loss = build_loss()
    grads = tape.backward(loss, params=params)
    analytic = [grads[p] for p in params]

    def f():
        return float(build_loss().data.reshape(()))

    numeric = finite_difference_gradients(f, params, step=step)
    worst, worst_name = 0.0, None
    for p, a, n in zip(params, analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        err = float(np.max(np.abs(a - n) / denom))
        if err > worst:
            worst = err
            worst_name = p.name or f"param{params.index(p)}"
    return worst, worst_name
