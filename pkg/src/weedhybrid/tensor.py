"""Dense tensors with reverse-mode automatic differentiation.

Values are stored as row-major 32-bit float arrays (a 64-bit mode exists for
verification); reductions accumulate in 64-bit before rounding back to the
storage type. The graph is define-by-run: primitives applied while a Tape is
active append (output, backward-rule) records in execution order, and
Tape.backward walks the records once in reverse. Tensors are treated as
immutable once produced; there is no implicit broadcasting between tensors
except the scalar-tensor case.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    """Set the storage dtype for newly created tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported tensor dtype {dt}")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the default storage dtype (used by gradient checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    """A dense n-dimensional float array, optionally participating in autodiff."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all shape rules live in the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def const(data) -> Tensor:
    """A tensor that never receives gradients (labels, masks, adjacency...)."""
    return Tensor(data, requires_grad=False)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Records are appended in execution order, so every node's inputs precede it;
    backward() visits each record exactly once in reverse.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward_fn))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad tensor reachable from loss."""
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._records):
            if out.grad is None:
                continue
            backward_fn(out.grad)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitive plumbing


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        raise AssertionError(f"gradient shape {g.shape} != value shape {t.data.shape}")
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")


def _result(data: np.ndarray, op: str, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    _finite_or_raise(data, op)
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=rg, dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and rg:
        tape._record(out, backward_fn)
    return out


def _out_dtype(*tensors: Tensor):
    dt = np.result_type(*(t.data.dtype for t in tensors))
    return np.float64 if dt == np.float64 else np.float32


def _as_scalar(x) -> float | None:
    """Return x as a python float if it is a plain number, else None."""
    if isinstance(x, (int, float, np.integer, np.floating)):
        return float(x)
    return None


def _f64(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64, copy=False)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        data = a.data + np.asarray(s, dtype=a.data.dtype)

        def back(g):
            _accum(a, g)

        return _result(data, "add", (a,), back)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    data = a.data + b.data

    def back(g):
        _accum(a, g.astype(a.data.dtype, copy=False))
        _accum(b, g.astype(b.data.dtype, copy=False))

    return _result(data.astype(_out_dtype(a, b)), "add", (a, b), back)


def sub(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return add(a, -s)
    return add(a, neg(b))


def neg(a: Tensor) -> Tensor:
    data = -a.data

    def back(g):
        _accum(a, -g)

    return _result(data, "neg", (a,), back)


def mul(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        data = a.data * np.asarray(s, dtype=a.data.dtype)

        def back(g):
            _accum(a, g * s)

        return _result(data, "mul", (a,), back)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    data = a.data * b.data

    def back(g):
        _accum(a, (g * b.data).astype(a.data.dtype, copy=False))
        _accum(b, (g * a.data).astype(b.data.dtype, copy=False))

    return _result(data.astype(_out_dtype(a, b)), "mul", (a, b), back)


def div(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return mul(a, 1.0 / s)
    if a.shape != b.shape:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} differ")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def back(g):
        _accum(a, (g / b.data).astype(a.data.dtype, copy=False))
        _accum(b, (-g * a.data / (b.data * b.data)).astype(b.data.dtype, copy=False))

    return _result(data.astype(_out_dtype(a, b)), "div", (a, b), back)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def back(g):
        _accum(a, g * (a.data > 0))

    return _result(data, "relu", (a,), back)


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    data = np.where(a.data > 0, a.data, a.data * a.data.dtype.type(alpha))

    def back(g):
        _accum(a, g * np.where(a.data > 0, 1.0, alpha).astype(a.data.dtype))

    return _result(data, "leaky_relu", (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    # exp(-|x|) form never overflows
    e = np.exp(-np.abs(a.data))
    data = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.data.dtype)

    def back(g):
        _accum(a, g * data * (1.0 - data))

    return _result(data, "sigmoid", (a,), back)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def back(g):
        _accum(a, g * (1.0 - data * data))

    return _result(data, "tanh", (a,), back)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def back(g):
        _accum(a, g * data)

    return _result(data, "exp", (a,), back)


def log(a: Tensor) -> Tensor:
    """Natural log; inputs must be positive (clamp first if they may not be)."""
    with np.errstate(divide="raise", invalid="raise"):
        try:
            data = np.log(a.data)
        except FloatingPointError:
            raise NumericError("log of non-positive value")

    def back(g):
        _accum(a, g / a.data)

    return _result(data, "log", (a,), back)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def back(g):
        _accum(a, g / (2.0 * data))

    return _result(data, "sqrt", (a,), back)


def pow_const(a: Tensor, p: float) -> Tensor:
    data = a.data ** a.data.dtype.type(p)

    def back(g):
        _accum(a, g * p * a.data ** a.data.dtype.type(p - 1.0))

    return _result(data, "pow_const", (a,), back)


def softplus(a: Tensor) -> Tensor:
    # max(x,0) + log1p(exp(-|x|)) is overflow-free
    data = (np.maximum(a.data, 0) + np.log1p(np.exp(-np.abs(a.data)))).astype(a.data.dtype)

    def back(g):
        e = np.exp(-np.abs(a.data))
        sig = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        _accum(a, (g * sig).astype(a.data.dtype, copy=False))

    return _result(data, "softplus", (a,), back)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo) elementwise; gradient passes only where a > lo."""
    data = np.maximum(a.data, a.data.dtype.type(lo))

    def back(g):
        _accum(a, g * (a.data > lo))

    return _result(data, "clamp_min", (a,), back)


# ---------------------------------------------------------------------------
# reductions (64-bit accumulation)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    data = _f64(a.data).sum(axis=axes).astype(a.data.dtype)

    def back(g):
        ge = np.expand_dims(g, axes) if axes else g
        _accum(a, np.broadcast_to(ge, a.shape).astype(a.data.dtype, copy=False))

    return _result(np.asarray(data), "sum", (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    data = (_f64(a.data).sum(axis=axes) / n).astype(a.data.dtype)

    def back(g):
        ge = np.expand_dims(g, axes) if axes else g
        _accum(a, (np.broadcast_to(ge, a.shape) / n).astype(a.data.dtype, copy=False))

    return _result(np.asarray(data), "mean", (a,), back)


def gap(a: Tensor) -> Tensor:
    """Global average pooling: mean over the two trailing spatial axes."""
    if a.ndim < 3:
        raise DimensionError(f"gap expects (..., C, H, W), got shape {a.shape}")
    return mean(a, axis=(-2, -1))


# ---------------------------------------------------------------------------
# structural primitives


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def back(g):
        _accum(a, g.reshape(a.shape))

    return _result(data, "reshape", (a,), back)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))

    def back(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _result(data, "transpose", (a,), back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ContractError("concat of zero tensors")
    nd = parts[0].ndim
    axis = axis % nd
    for p in parts[1:]:
        if p.ndim != nd:
            raise DimensionError("concat: rank mismatch")
        for ax in range(nd):
            if ax != axis and p.shape[ax] != parts[0].shape[ax]:
                raise DimensionError(
                    f"concat: off-axis extent mismatch on axis {ax}: "
                    f"{p.shape} vs {parts[0].shape}")
    data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * nd
            sl[axis] = slice(lo, hi)
            _accum(p, np.ascontiguousarray(g[tuple(sl)]).astype(p.data.dtype, copy=False))

    return _result(data.astype(_out_dtype(*parts)), "concat", tuple(parts), back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (the inverse of concat)."""
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}:{start + length}] out of range for extent {a.shape[axis]}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    data = np.ascontiguousarray(a.data[tuple(sl)])

    def back(g):
        full = np.zeros_like(a.data)
        full[tuple(sl)] = g
        _accum(a, full)

    return _result(data, "narrow", (a,), back)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a length-d vector to every row of a (..., d) tensor (bias add)."""
    if v.ndim != 1 or v.shape[0] != a.shape[-1]:
        raise DimensionError(f"add_rowvec: vector {v.shape} vs rows of {a.shape}")
    data = a.data + v.data

    def back(g):
        _accum(a, g.astype(a.data.dtype, copy=False))
        lead = tuple(range(g.ndim - 1))
        _accum(v, _f64(g).sum(axis=lead).astype(v.data.dtype))

    return _result(data.astype(_out_dtype(a, v)), "add_rowvec", (a, v), back)


def add_bcast(a: Tensor, b: Tensor) -> Tensor:
    """Add b to a, where b's shape equals a trailing slice of a's shape."""
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add_bcast: {b.shape} is not a suffix of {a.shape}")
    data = a.data + b.data

    def back(g):
        _accum(a, g.astype(a.data.dtype, copy=False))
        lead = tuple(range(g.ndim - b.ndim))
        db = _f64(g).sum(axis=lead) if lead else _f64(g)
        _accum(b, db.astype(b.data.dtype))

    return _result(data.astype(_out_dtype(a, b)), "add_bcast", (a, b), back)


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of a (N, d) matrix by scalar s[i]."""
    if a.ndim != 2 or s.ndim != 1 or s.shape[0] != a.shape[0]:
        raise DimensionError(f"scale_rows: {a.shape} with {s.shape}")
    data = a.data * s.data[:, None]

    def back(g):
        _accum(a, (g * s.data[:, None]).astype(a.data.dtype, copy=False))
        _accum(s, _f64(g * a.data).sum(axis=1).astype(s.data.dtype))

    return _result(data.astype(_out_dtype(a, s)), "scale_rows", (a, s), back)


def scale_channels(a: Tensor, w: Tensor) -> Tensor:
    """Multiply channel c of a (N, C, H, W) map by w[n, c] (broadcast over space)."""
    if a.ndim != 4 or w.ndim != 2 or w.shape != a.shape[:2]:
        raise DimensionError(f"scale_channels: {a.shape} with {w.shape}")
    data = a.data * w.data[:, :, None, None]

    def back(g):
        _accum(a, (g * w.data[:, :, None, None]).astype(a.data.dtype, copy=False))
        _accum(w, _f64(g * a.data).sum(axis=(2, 3)).astype(w.data.dtype))

    return _result(data.astype(_out_dtype(a, w)), "scale_channels", (a, w), back)


# ---------------------------------------------------------------------------
# matmul and softmax


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the leading axes numpy broadcasting introduced."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2-D operands and stacked 3-D batches; a 2-D
    operand paired with a 3-D one is shared across the batch."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise DimensionError(f"matmul: ranks {a.ndim} and {b.ndim} unsupported")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents {a.shape} x {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch extents {a.shape[0]} != {b.shape[0]}")
    with np.errstate(over="ignore"):
        data = (_f64(a.data) @ _f64(b.data)).astype(_out_dtype(a, b))

    def back(g):
        g64 = _f64(g)
        da = g64 @ np.swapaxes(_f64(b.data), -1, -2)
        db = np.swapaxes(_f64(a.data), -1, -2) @ g64
        _accum(a, _reduce_to(da, a.shape).astype(a.data.dtype))
        _accum(b, _reduce_to(db, b.shape).astype(b.data.dtype))

    return _result(data, "matmul", (a, b), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis; rows sum to 1."""
    ax = axis % a.ndim
    x = _f64(a.data)
    m = x.max(axis=ax, keepdims=True)
    e = np.exp(x - m)
    data = (e / e.sum(axis=ax, keepdims=True)).astype(a.data.dtype)

    def back(g):
        gy = _f64(g) * _f64(data)
        dot = gy.sum(axis=ax, keepdims=True)
        _accum(a, (gy - _f64(data) * dot).astype(a.data.dtype))

    return _result(data, "softmax", (a,), back)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: params {gain.shape}/{bias.shape} vs rows of {a.shape}")
    x = _f64(a.data)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    data = (xhat * _f64(gain.data) + _f64(bias.data)).astype(_out_dtype(a, gain, bias))

    def back(g):
        g64 = _f64(g)
        lead = tuple(range(g64.ndim - 1))
        _accum(bias, g64.sum(axis=lead).astype(bias.data.dtype))
        _accum(gain, (g64 * xhat).sum(axis=lead).astype(gain.data.dtype))
        gh = g64 * _f64(gain.data)
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        _accum(a, ((gh - m1 - xhat * m2) * inv).astype(a.data.dtype))

    return _result(data, "layer_norm", (a, gain, bias), back)


# ---------------------------------------------------------------------------
# spatial primitives


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _to_batched(a: Tensor) -> tuple[np.ndarray, bool]:
    if a.ndim == 3:
        return a.data[None], True
    if a.ndim == 4:
        return a.data, False
    raise DimensionError(f"expected (C,H,W) or (N,C,H,W), got shape {a.shape}")


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation with zero padding.

    x: (C,H,W) or (N,C,H,W); kernels: (K,C,kh,kw); optional bias (K,).
    Output spatial extents are floor((H + 2p - kh)/stride) + 1.
    """
    xd, squeeze = _to_batched(x)
    if kernels.ndim != 4:
        raise DimensionError(f"conv2d: kernels must be (K,C,kh,kw), got {kernels.shape}")
    n, c, h, w = xd.shape
    k, ck, kh, kw = kernels.shape
    if ck != c:
        raise DimensionError(f"conv2d: input channels {c} != kernel channels {ck}")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({k},)")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0 or kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} stride {stride} pad {padding} "
            f"gives non-positive output for input {h}x{w}")
    xp = _pad_hw(xd, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                      # (N,C,OH,OW,kh,kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    wmat = kernels.data.reshape(k, c * kh * kw)
    out = (_f64(cols) @ _f64(wmat).T).reshape(n, oh, ow, k).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + _f64(bias.data)[None, :, None, None]
    out = out.astype(_out_dtype(x, kernels))
    if squeeze:
        out = out[0]

    inputs = (x, kernels) if bias is None else (x, kernels, bias)

    def back(g):
        gd = g[None] if squeeze else g
        gmat = _f64(gd.transpose(0, 2, 3, 1).reshape(n * oh * ow, k))
        dk = (gmat.T @ _f64(cols)).reshape(k, c, kh, kw)
        _accum(kernels, dk.astype(kernels.data.dtype))
        if bias is not None:
            _accum(bias, gmat.sum(axis=0).astype(bias.data.dtype))
        dcols = (gmat @ _f64(wmat)).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * (oh - 1) + 1:stride,
                    j:j + stride * (ow - 1) + 1:stride] += dcols[:, :, :, :, i, j]
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
        _accum(x, (dx[0] if squeeze else dx).astype(x.data.dtype))

    return _result(out, "conv2d", inputs, back)


def conv_transpose2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0,
                     bias: Tensor | None = None) -> Tensor:
    """Transposed 2-D convolution (the adjoint of conv2d's input map).

    x: (C,H,W) or (N,C,H,W); kernels: (C,K,kh,kw); output spatial extent is
    (H-1)*stride - 2p + kh.
    """
    xd, squeeze = _to_batched(x)
    if kernels.ndim != 4:
        raise DimensionError(f"conv_transpose2d: kernels must be (C,K,kh,kw), got {kernels.shape}")
    n, c, h, w = xd.shape
    ck, k, kh, kw = kernels.shape
    if ck != c:
        raise DimensionError(f"conv_transpose2d: channels {c} != kernel channels {ck}")
    if bias is not None and bias.shape != (k,):
        raise DimensionError(f"conv_transpose2d: bias shape {bias.shape} != ({k},)")
    oh = (h - 1) * stride + kh - 2 * padding
    ow = (w - 1) * stride + kw - 2 * padding
    if oh <= 0 or ow <= 0:
        raise DimensionError("conv_transpose2d: non-positive output extent")
    contrib = np.einsum("nchw,ckij->nkhwij", _f64(xd), _f64(kernels.data))
    ypad = np.zeros((n, k, oh + 2 * padding, ow + 2 * padding), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            ypad[:, :, i:i + stride * (h - 1) + 1:stride,
                 j:j + stride * (w - 1) + 1:stride] += contrib[:, :, :, :, i, j]
    out = ypad[:, :, padding:padding + oh, padding:padding + ow]
    if bias is not None:
        out = out + _f64(bias.data)[None, :, None, None]
    out = out.astype(_out_dtype(x, kernels))
    if squeeze:
        out = out[0]

    inputs = (x, kernels) if bias is None else (x, kernels, bias)

    def back(g):
        gd = g[None] if squeeze else g
        gpad = _pad_hw(_f64(gd), padding)
        gwin = np.lib.stride_tricks.sliding_window_view(gpad, (kh, kw), axis=(2, 3))
        gwin = gwin[:, :, ::stride, ::stride]                # (N,K,H,W,kh,kw)
        dx = np.einsum("nkhwij,ckij->nchw", gwin, _f64(kernels.data))
        dk = np.einsum("nchw,nkhwij->ckij", _f64(xd), gwin)
        _accum(x, (dx[0] if squeeze else dx).astype(x.data.dtype))
        _accum(kernels, dk.astype(kernels.data.dtype))
        if bias is not None:
            _accum(bias, _f64(gd).sum(axis=(0, 2, 3)).astype(bias.data.dtype))

    return _result(out, "conv_transpose2d", inputs, back)


def avg_pool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Average pooling over square windows; x is (C,H,W) or (N,C,H,W)."""
    stride = window if stride is None else stride
    xd, squeeze = _to_batched(x)
    n, c, h, w = xd.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"avg_pool2d: window {window} too large for {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(xd, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    out = _f64(win).mean(axis=(-2, -1)).astype(x.data.dtype)
    if squeeze:
        out = out[0]

    def back(g):
        gd = (g[None] if squeeze else g) / (window * window)
        dx = np.zeros((n, c, h, w), dtype=np.float64)
        for i in range(window):
            for j in range(window):
                dx[:, :, i:i + stride * (oh - 1) + 1:stride,
                   j:j + stride * (ow - 1) + 1:stride] += gd
        _accum(x, (dx[0] if squeeze else dx).astype(x.data.dtype))

    return _result(out, "avg_pool2d", (x,), back)


def _bilinear_matrix(in_hw: tuple[int, int], out_hw: tuple[int, int]) -> np.ndarray:
    """Dense (out_h*out_w, in_h*in_w) interpolation matrix, half-pixel centers."""
    ih, iw = in_hw
    oh, ow = out_hw
    m = np.zeros((oh * ow, ih * iw), dtype=np.float64)

    def coords(o, i):
        s = (np.arange(o, dtype=np.float64) + 0.5) * (i / o) - 0.5
        s = np.clip(s, 0.0, i - 1.0)
        lo = np.floor(s).astype(int)
        lo = np.minimum(lo, i - 1)
        hi = np.minimum(lo + 1, i - 1)
        frac = s - lo
        return lo, hi, frac

    y0, y1, fy = coords(oh, ih)
    x0, x1, fx = coords(ow, iw)
    for oy in range(oh):
        for ox in range(ow):
            w00 = (1 - fy[oy]) * (1 - fx[ox])
            w01 = (1 - fy[oy]) * fx[ox]
            w10 = fy[oy] * (1 - fx[ox])
            w11 = fy[oy] * fx[ox]
            row = oy * ow + ox
            m[row, y0[oy] * iw + x0[ox]] += w00
            m[row, y0[oy] * iw + x1[ox]] += w01
            m[row, y1[oy] * iw + x0[ox]] += w10
            m[row, y1[oy] * iw + x1[ox]] += w11
    return m


_BILINEAR_CACHE: dict[tuple[tuple[int, int], tuple[int, int]], np.ndarray] = {}


def upsample_bilinear2d(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear resize of a (C,H,W) or (N,C,H,W) map (half-pixel convention)."""
    xd, squeeze = _to_batched(x)
    n, c, h, w = xd.shape
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise DimensionError(f"upsample_bilinear2d: bad target {out_hw}")
    key = ((h, w), (oh, ow))
    mat = _BILINEAR_CACHE.get(key)
    if mat is None:
        mat = _bilinear_matrix((h, w), (oh, ow))
        _BILINEAR_CACHE[key] = mat
    flat = _f64(xd).reshape(n * c, h * w)
    out = (flat @ mat.T).reshape(n, c, oh, ow).astype(x.data.dtype)
    if squeeze:
        out = out[0]

    def back(g):
        gd = g[None] if squeeze else g
        dx = (_f64(gd).reshape(n * c, oh * ow) @ mat).reshape(n, c, h, w)
        _accum(x, (dx[0] if squeeze else dx).astype(x.data.dtype))

    return _result(out, "upsample_bilinear2d", (x,), back)
