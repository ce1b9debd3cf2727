"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (row-major, NCHW convention for 4-D
data). Operations executed while a :class:`Tape` is active are recorded on
it; :func:`backward` replays the records in reverse to populate ``.grad``
on every tensor that requires gradients. Gradients accumulate additively
across fan-out. A tape is left intact by ``backward`` and may be replayed
(gradients then accumulate again); callers normally discard it per step.

Training and inference run in single precision; :func:`grad_check` runs
in double precision.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """N-dimensional array, optionally participating in gradient taping.

    ``data`` is treated as immutable once the tensor has been consumed by an
    operation; only ``grad`` is mutated (by :func:`backward`).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(
                f"item() needs a single-element tensor, got shape {self.data.shape}"
            )
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("op", "out", "inputs", "grads_fn")

    def __init__(self, op, out, inputs, grads_fn):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.grads_fn = grads_fn


class Tape:
    """Ordered log of operations, appended in execution (topological) order."""

    def __init__(self):
        self.records: list[_Record] = []
        self._out_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        _STACK.tapes.append(self)
        return self

    def __exit__(self, *exc):
        popped = _STACK.tapes.pop()
        assert popped is self, "tapes must be exited in reverse entry order"
        return False

    def __len__(self):
        return len(self.records)

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._out_ids


class _TapeStack(threading.local):
    def __init__(self):
        self.tapes: list[Tape] = []


_STACK = _TapeStack()

# Fault-injection hook for the gradcheck CLI's self-test: when set to an op
# name, that op's backward output is scaled by 1.01 during backward().
_BACKWARD_FAULT: Optional[str] = None


def active_tape() -> Optional[Tape]:
    return _STACK.tapes[-1] if _STACK.tapes else None


def record_op(
    op: str,
    out: Tensor,
    inputs: Sequence[Tensor],
    grads_fn: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Register ``out = op(inputs)`` on the active tape, if any.

    ``grads_fn`` receives the gradient w.r.t. ``out`` and returns one
    gradient array (or None) per input, already reduced to the input's
    shape. Extension point used by the network layers (batch norm,
    dropout) in addition to the built-in ops below.
    """
    tape = active_tape()
    if tape is None:
        return out
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape.records.append(_Record(op, out, tuple(inputs), grads_fn))
    tape._out_ids.add(id(out))
    return out


def backward(tape: Tape, root: Tensor) -> None:
    """Reverse traversal of ``tape`` seeding d(root)/d(root) = 1.

    ``root`` must be a single-element tensor produced on this tape. Each
    record is visited exactly once; gradients accumulate additively into
    every tensor with ``requires_grad`` reachable from the root.

    The tape stays intact and may be replayed: every pass first clears the
    gradients of tape-produced (intermediate) tensors, so leaf gradients
    accumulate additively across repeated calls while intermediates always
    hold the gradient of the most recent pass.
    """
    if root.data.size != 1:
        raise ShapeMismatchError(
            f"backward root must be scalar, got shape {root.data.shape}"
        )
    if not tape.produced(root):
        raise ValueError("backward root was not produced on this tape")
    for rec in tape.records:
        rec.out.grad = None
    root.grad = np.ones_like(root.data)
    for rec in reversed(tape.records):
        g = rec.out.grad
        if g is None:
            continue
        grads = rec.grads_fn(g)
        if _BACKWARD_FAULT is not None and rec.op == _BACKWARD_FAULT:
            grads = tuple(None if gi is None else gi * 1.01 for gi in grads)
        for t, gt in zip(rec.inputs, grads):
            if gt is None:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += gt


# ---------------------------------------------------------------------------
# broadcasting helpers (scalar and per-channel forms only)

def _broadcast_view(a: Tensor, b: Tensor):
    """Return b.data shaped to combine with a.data, or raise.

    Supported: identical shapes; single-element b; per-channel b against
    4-D NCHW a (shape (C,) or (1,C,1,1)); per-column b against 2-D (N,F)
    a (shape (F,) or (1,F)).
    """
    if a.data.shape == b.data.shape:
        return b.data
    if b.data.size == 1:
        return b.data.reshape(())
    if a.data.ndim == 4:
        c = a.data.shape[1]
        if b.data.shape == (c,) or b.data.shape == (1, c, 1, 1):
            return b.data.reshape(1, c, 1, 1)
    if a.data.ndim == 2:
        f = a.data.shape[1]
        if b.data.shape == (f,) or b.data.shape == (1, f):
            return b.data.reshape(1, f)
    raise ShapeMismatchError(
        f"cannot broadcast operand of shape {b.data.shape} against {a.data.shape}"
    )


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to ``shape`` (inverse of the broadcast in _broadcast_view)."""
    if g.shape == tuple(shape):
        return g
    if int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    if g.ndim == 4:
        return g.sum(axis=(0, 2, 3)).reshape(shape)
    if g.ndim == 2:
        return g.sum(axis=0).reshape(shape)
    raise ShapeMismatchError(f"cannot reduce gradient {g.shape} to {shape}")


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    bv = _broadcast_view(a, b)
    out = Tensor(a.data + bv)

    def grads(g):
        ga = g if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return record_op("add", out, (a, b), grads)


def sub(a: Tensor, b: Tensor) -> Tensor:
    bv = _broadcast_view(a, b)
    out = Tensor(a.data - bv)

    def grads(g):
        ga = g if a.requires_grad else None
        gb = _unbroadcast(-g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return record_op("sub", out, (a, b), grads)


def mul(a: Tensor, b: Tensor) -> Tensor:
    bv = _broadcast_view(a, b)
    out = Tensor(a.data * bv)

    def grads(g):
        ga = g * bv if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return record_op("mul", out, (a, b), grads)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * a.data.dtype.type(c))

    def grads(g):
        return (g * a.data.dtype.type(c) if a.requires_grad else None,)

    return record_op("scale", out, (a,), grads)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))

    def grads(g):
        return (g * (a.data > 0) if a.requires_grad else None,)

    return record_op("relu", out, (a,), grads)


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic, clipped into the open interval (0, 1)."""
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    lo = np.finfo(x.dtype).tiny
    hi = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    s = np.clip(s, lo, hi)
    out = Tensor(s)

    def grads(g):
        return (g * s * (1.0 - s) if a.requires_grad else None,)

    return record_op("sigmoid", out, (a,), grads)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def grads(g):
        return (g / a.data if a.requires_grad else None,)

    return record_op("log", out, (a,), grads)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(a.data, lo, hi))

    def grads(g):
        if not a.requires_grad:
            return (None,)
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return record_op("clamp", out, (a,), grads)


# ---------------------------------------------------------------------------
# reductions and shape ops

def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def grads(g):
        return (np.broadcast_to(g, a.data.shape).copy() if a.requires_grad else None,)

    return record_op("sum", out, (a,), grads)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())

    def grads(g):
        if not a.requires_grad:
            return (None,)
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return record_op("mean", out, (a,), grads)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def grads(g):
        return (g.reshape(a.data.shape) if a.requires_grad else None,)

    return record_op("reshape", out, (a,), grads)


# ---------------------------------------------------------------------------
# convolution / pooling / dense

def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation, NCHW input against OIHW kernel, zero padding."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects 4-D input and kernel, got {x.data.shape} and {kernel.data.shape}"
        )
    n, c, h, w = x.data.shape
    o, i, kh, kw = kernel.data.shape
    if c != i:
        raise ShapeMismatchError(
            f"conv2d channel mismatch: input has {c} channels, kernel expects {i}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(
            f"conv2d output would be {ho}x{wo} for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    if bias is not None and bias.data.shape != (o,):
        raise ShapeMismatchError(
            f"conv2d bias shape {bias.data.shape} does not match {o} output channels"
        )
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    windows = _conv_windows(xp, kh, kw, stride, ho, wo)
    res = np.einsum("nchwij,ocij->nohw", windows, kernel.data, optimize=True)
    if bias is not None:
        res = res + bias.data[None, :, None, None]
    out = Tensor(res)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def grads(g):
        gx = gk = gb = None
        if kernel.requires_grad:
            win = _conv_windows(xp, kh, kw, stride, ho, wo)
            gk = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
        if x.requires_grad:
            dcols = np.einsum("ocij,nohw->nchwij", kernel.data, g, optimize=True)
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += dcols[
                        :, :, :, :, di, dj
                    ]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk) if bias is None else (gx, gk, gb)

    return record_op("conv2d", out, inputs, grads)


def max_pool2d(x: Tensor, window: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling; padded positions hold -inf and are never selected.

    On ties the gradient routes to the first maximum in the window's
    row-major scan.
    """
    n, c, h, w = x.data.shape
    ho = (h + 2 * padding - window) // stride + 1
    wo = (w + 2 * padding - window) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(
            f"max_pool2d window {window} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if padding:
        xp = np.pad(
            x.data,
            ((0, 0), (0, 0), (padding, padding), (padding, padding)),
            constant_values=-np.inf,
        )
    else:
        xp = x.data
    windows = _conv_windows(xp, window, window, stride, ho, wo)
    flat = windows.reshape(n, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0])
    hp, wp = xp.shape[2], xp.shape[3]

    def grads(g):
        if not x.requires_grad:
            return (None,)
        wi, wj = np.divmod(idx, window)
        ai = wi + np.arange(ho)[None, None, :, None] * stride
        aj = wj + np.arange(wo)[None, None, None, :] * stride
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gxp.reshape(n, c, -1), (ni, ci, ai * wp + aj), g)
        return (gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp,)

    return record_op("max_pool2d", out, (x,), grads)


def global_avg_pool2d(x: Tensor) -> Tensor:
    n, c, h, w = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))

    def grads(g):
        if not x.requires_grad:
            return (None,)
        return (np.broadcast_to(g / (h * w), x.data.shape).copy(),)

    return record_op("global_avg_pool2d", out, (x,), grads)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (N,F) @ (F,U) + (U,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ShapeMismatchError(
            f"dense inner dimensions disagree: input {x.data.shape}, weight {weight.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[1],):
        raise ShapeMismatchError(
            f"dense bias shape {bias.data.shape} does not match {weight.data.shape[1]} units"
        )
    out = Tensor(x.data @ weight.data + bias.data)

    def grads(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return record_op("dense", out, (x, weight, bias), grads)


# ---------------------------------------------------------------------------
# finite-difference gradient checking

def grad_check(
    forward_fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    Inputs are copied to float64; the function must be deterministic.
    Returns max over all input elements of |a - n| / max(|a|, |n|, 1e-8).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    probes = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
    with Tape() as tape:
        root = forward_fn(*probes)
        if root.data.size != 1:
            raise ShapeMismatchError(
                f"grad_check requires a scalar-valued function, got shape {root.data.shape}"
            )
        backward(tape, root)
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in probes
    ]

    def value() -> float:
        return float(forward_fn(*probes).data)

    worst = 0.0
    for p, a in zip(probes, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = value()
            flat[i] = orig - eps
            f_minus = value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
