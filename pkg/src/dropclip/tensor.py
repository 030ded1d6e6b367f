"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

Every trainable computation in this package is built from the ops in this
module. Ops execute eagerly on numpy arrays; when a Tape is active and an
input requires gradients, the op records a backward closure so that
``backward(loss, tape)`` can replay adjoints in reverse execution order.

Broadcasting is deliberately restricted: two operands must have equal
shapes, or one must be a scalar, or the smaller shape must be a suffix of
the larger (leading-batch expansion). Anything else raises ShapeError.

Tapes are single-threaded; tensors may be shared across threads read-only.
"""

from __future__ import annotations

import threading
import warnings

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

L2_NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's contract."""


class TapeError(RuntimeError):
    """Backward was asked to differentiate something the tape cannot."""


class Tensor:
    """A dense n-dimensional real array, optionally tracked for gradients.

    ``data`` is a numpy float array. ``grad`` starts as None and is
    allocated by ``backward``; repeated backward calls accumulate into it
    until ``zero_grad`` is called.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


class _TapeEntry:
    __slots__ = ("name", "inputs", "out", "bwd")

    def __init__(self, name, inputs, out, bwd):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Tape:
    """Ordered record of executed ops, sufficient to replay adjoints.

    Use as a context manager; ops executed inside record themselves when
    any input requires gradients. With ``track_memory=True`` the tape also
    accounts live activation scalars (op outputs during the forward pass,
    plus transient adjoint buffers during backward) and exposes the peak
    in ``peak_scalars``. Never share a Tape across threads.
    """

    def __init__(self, track_memory: bool = False):
        self.entries: list[_TapeEntry] = []
        self._produced: dict[int, bool] = {}
        self.track_memory = track_memory
        self.live_scalars = 0
        self.peak_scalars = 0

    def __enter__(self):
        _STATE.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        top = _STATE.stack.pop()
        assert top is self
        return False

    def record(self, name, inputs, out, bwd):
        self.entries.append(_TapeEntry(name, inputs, out, bwd))
        self._produced[id(out)] = True
        if self.track_memory:
            self._bump(out.data.size)

    def _bump(self, n):
        self.live_scalars += n
        if self.live_scalars > self.peak_scalars:
            self.peak_scalars = self.live_scalars

    def __len__(self):
        return len(self.entries)


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_STATE = _State()


def active_tape() -> Tape | None:
    return _STATE.stack[-1] if _STATE.stack else None


def _maybe_record(name, inputs, out, bwd) -> None:
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(name, inputs, out, bwd)


def _any_grad(*tensors) -> bool:
    return any(t.requires_grad for t in tensors)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every requires_grad leaf feeding ``loss``.

    Visits each recorded op exactly once, in reverse execution order.
    Leaf grads accumulate across calls until zeroed.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if id(loss) not in tape._produced:
        raise TapeError("loss is not a product of this tape (detached graph)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    track = tape.track_memory
    if track:
        tape._bump(loss.data.size)
    produced = tape._produced
    for entry in reversed(tape.entries):
        gout = grads.pop(id(entry.out), None)
        if track:
            tape.live_scalars -= entry.out.data.size
        if gout is None:
            continue
        input_grads = entry.bwd(gout)
        for inp, g in zip(entry.inputs, input_grads):
            if g is None:
                continue
            key = id(inp)
            if key in produced:
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    if track:
                        tape._bump(g.size)
            elif inp.requires_grad:
                inp.grad = g if inp.grad is None else inp.grad + g
        if track:
            tape.live_scalars -= gout.size


# ---------------------------------------------------------------------------
# shape helpers

def _check_axis(name, axis, ndim):
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{name}: axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def _broadcast_pair(name, a: Tensor, b: Tensor):
    """Allow equal shapes, scalar expansion, or suffix (leading-batch) expansion."""
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.data.size == 1 or b.data.size == 1:
        return
    small, large = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(large) or small != large[len(large) - len(small):]:
        raise ShapeError(f"{name}: shapes {sa} and {sb} do not conform "
                         "(equal, scalar, or leading-batch expansion only)")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic ops

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch semantics (both operands ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: needs ndim >= 2, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data), requires_grad=_any_grad(a, b))

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    _maybe_record("matmul", (a, b), out, bwd)
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair("add", a, b)
    out = Tensor(a.data + b.data, requires_grad=_any_grad(a, b))

    def bwd(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    _maybe_record("add", (a, b), out, bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair("mul", a, b)
    out = Tensor(a.data * b.data, requires_grad=_any_grad(a, b))

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    _maybe_record("mul", (a, b), out, bwd)
    return out


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c, requires_grad=a.requires_grad)
    _maybe_record("scale", (a,), out, lambda g: (g * c,))
    return out


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data), requires_grad=a.requires_grad)
    _maybe_record("exp", (a,), out, lambda g: (g * out.data,))
    return out


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(1.0 / a.data, requires_grad=a.requires_grad)
    _maybe_record("reciprocal", (a,), out, lambda g: (-g * out.data * out.data,))
    return out


# ---------------------------------------------------------------------------
# structural ops

def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.data.ndim))[::-1]
    axes = tuple(_check_axis("transpose", ax, a.data.ndim) for ax in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} is not a permutation for ndim {a.data.ndim}")
    out = Tensor(np.transpose(a.data, axes), requires_grad=a.requires_grad)
    inv = tuple(np.argsort(axes))
    _maybe_record("transpose", (a,), out, lambda g: (np.transpose(g, inv),))
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {a.data.shape} to {shape}") from e
    out = Tensor(data, requires_grad=a.requires_grad)
    orig = a.data.shape
    _maybe_record("reshape", (a,), out, lambda g: (g.reshape(orig),))
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    axis = _check_axis("concat", axis, tensors[0].data.ndim)
    ref = list(tensors[0].data.shape)
    for t in tensors[1:]:
        s = list(t.data.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ShapeError(f"concat: shape {t.data.shape} incompatible with {tensors[0].data.shape} on axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 requires_grad=_any_grad(*tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    _maybe_record("concat", tuple(tensors), out, bwd)
    return out


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis("slice_axis", axis, a.data.ndim)
    n = a.data.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for extent {n}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx], requires_grad=a.requires_grad)
    orig_shape = a.data.shape

    def bwd(g):
        full = np.zeros(orig_shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    _maybe_record("slice_axis", (a,), out, bwd)
    return out


def gather_rows(table, ids) -> Tensor:
    """Index along axis 0 with an integer array (embedding lookup).

    ``ids`` may have any shape; output shape is ids.shape + table.shape[1:].
    The backward pass scatter-adds, so repeated ids accumulate.
    """
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("gather_rows: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(f"gather_rows: id out of range for {table.data.shape[0]} rows")
    out = Tensor(table.data[ids], requires_grad=table.requires_grad)
    shape = table.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (full,)

    _maybe_record("gather_rows", (table,), out, bwd)
    return out


def select_positions(x, idx) -> Tensor:
    """Pick one position along axis 1 per row: out[b] = x[b, idx[b]]."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    if x.data.ndim < 2 or idx.shape != (x.data.shape[0],):
        raise ShapeError(f"select_positions: x {x.data.shape} with idx {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[1]):
        raise ShapeError("select_positions: index out of range")
    rows = np.arange(x.data.shape[0])
    out = Tensor(x.data[rows, idx], requires_grad=x.requires_grad)
    shape = x.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[rows, idx] = g
        return (full,)

    _maybe_record("select_positions", (x,), out, bwd)
    return out


# ---------------------------------------------------------------------------
# reductions

def sum_axis(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is not None:
        axis = _check_axis("sum_axis", axis, a.data.ndim)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), requires_grad=a.requires_grad)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    _maybe_record("sum_axis", (a,), out, bwd)
    return out


def mean_axis(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[_check_axis("mean_axis", axis, a.data.ndim)]
    return scale(sum_axis(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinear ops

def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Numerically stabilized softmax; optional boolean keep-mask.

    Masked-out positions get probability zero. A row with no valid
    positions is an error.
    """
    a = as_tensor(a)
    axis = _check_axis("softmax", axis, a.data.ndim)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask)
        if mask.dtype != np.bool_:
            raise ShapeError("softmax: mask must be boolean")
        valid = np.broadcast_to(mask, x.shape)
        if not valid.any(axis=axis).all():
            raise ShapeError("softmax: a row is fully masked")
        x = np.where(valid, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=a.requires_grad)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    _maybe_record("softmax", (a,), out, bwd)
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis("log_softmax", axis, a.data.ndim)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse, requires_grad=a.requires_grad)

    def bwd(g):
        soft = np.exp(out.data)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    _maybe_record("log_softmax", (a,), out, bwd)
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.data.shape}/{beta.data.shape} "
                         f"do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, requires_grad=_any_grad(x, gamma, beta))

    def bwd(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    _maybe_record("layer_norm", (x, gamma, beta), out, bwd)
    return out


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * phi, requires_grad=a.requires_grad)

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (phi + x * pdf),)

    _maybe_record("gelu", (a,), out, bwd)
    return out


def l2_normalize(a, axis: int = -1, eps: float = L2_NORM_FLOOR) -> Tensor:
    """Scale rows to unit L2 norm.

    A row with norm below ``eps`` is returned unscaled toward zero (divided
    by the floor instead of its own norm) and triggers a warning; this never
    divides by zero.
    """
    a = as_tensor(a)
    axis = _check_axis("l2_normalize", axis, a.data.ndim)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if (norm < eps).any():
        warnings.warn("l2_normalize: near-zero vector, returning it unnormalized", RuntimeWarning)
    safe = np.maximum(norm, eps)
    y = a.data / safe
    out = Tensor(y, requires_grad=a.requires_grad)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        live = (norm >= eps)
        return ((g - y * dot * live) / safe,)

    _maybe_record("l2_normalize", (a,), out, bwd)
    return out
