"""Dense float64 arrays with taped reverse-mode gradients.

The model needs a small, closed set of array operations: matrix products,
valid 1-d (dilated) convolutions, adaptive max pooling, batch
normalization, and a few pointwise maps. This module implements exactly
those on top of raw numpy float64 buffers, together with a ComputeTape
that records every operation executed while it is active so the backward
pass can replay them in reverse order.

Conventions:
  * everything is float64, row-major, at most 3 axes (full reductions
    produce 0-axis scalars);
  * an operation is recorded only while a tape is active and at least one
    input is tracked (requires_grad leaf or an output of the same tape);
  * gradients accumulate additively when an array feeds several ops;
  * a tape can run backward once; build a fresh tape per training step.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, GradientError

Array = np.ndarray

_MAX_AXES = 3

_local = threading.local()


def _tape_stack() -> list["ComputeTape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> "ComputeTape | None":
    """The innermost tape currently recording on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class DiffArray:
    """A dense float64 array (0-3 axes) carrying an optional gradient.

    `requires_grad=True` marks a leaf whose total derivative should be
    populated by backward(). Arrays produced by recorded operations point
    at the tape that recorded them.
    """

    __slots__ = ("values", "grad", "requires_grad", "tape")

    def __init__(self, values, requires_grad: bool = False):
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim > _MAX_AXES:
            raise DimensionError(
                f"DiffArray supports at most {_MAX_AXES} axes, got shape {vals.shape}"
            )
        # ascontiguousarray promotes 0-d to 1-d; keep true scalars 0-d
        self.values: Array = np.ascontiguousarray(vals) if vals.ndim else vals
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.tape: ComputeTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.tape is not None:
            flags.append("taped")
        suffix = f" ({', '.join(flags)})" if flags else ""
        return f"DiffArray(shape={self.shape}{suffix})"

    # Light operator sugar; every op is also a module-level function.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(arr: DiffArray):
    raise DimensionError(f"expected a scalar, got shape {arr.shape}")


def as_diff(x) -> DiffArray:
    """Wrap numbers / ndarrays as constant DiffArrays; pass DiffArrays through."""
    if isinstance(x, DiffArray):
        return x
    return DiffArray(x)


@dataclass
class _TapeEntry:
    output: DiffArray
    inputs: tuple[DiffArray, ...]
    backward_fn: Callable[[Array], Sequence[Array | None]]


class ComputeTape:
    """Ordered record of executed operations for one forward/backward cycle.

    Use as a context manager around the forward pass, then call
    backward(root) once. Replaying in reverse visits each recorded op
    exactly once; arrays feeding several ops accumulate their gradients
    additively.
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []
        self._consumed = False

    def __enter__(self) -> "ComputeTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise GradientError("tape context exited out of order")
        return False

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def reset(self) -> None:
        """Discard the recorded graph so the tape can record a new one."""
        self._entries.clear()
        self._consumed = False

    def backward(self, root: DiffArray) -> None:
        if root.tape is None:
            raise GradientError("backward on a detached array: no tape recorded it")
        if root.tape is not self:
            raise GradientError("root was recorded on a different tape")
        if self._consumed:
            raise GradientError(
                "tape already ran backward; reset() or build a new tape before reusing it"
            )
        if root.size != 1:
            raise GradientError(f"backward root must be a scalar, got shape {root.shape}")
        self._consumed = True
        root.grad = np.ones_like(root.values)
        try:
            for entry in reversed(self._entries):
                d_out = entry.output.grad
                if d_out is None:
                    continue
                grads = entry.backward_fn(d_out)
                for inp, g in zip(entry.inputs, grads):
                    if g is None:
                        continue
                    if inp.grad is None:
                        # own the buffer: g may be a view into another gradient
                        inp.grad = np.array(g, dtype=np.float64)
                    else:
                        inp.grad = inp.grad + g
        finally:
            # the graph is spent; dropping it breaks the entry<->array
            # reference cycle so batch memory is reclaimed promptly
            self._entries.clear()


def backward(root: DiffArray) -> None:
    """Run the backward pass from a scalar root recorded on a tape."""
    if root.tape is None:
        raise GradientError("backward on a detached array: no tape recorded it")
    root.tape.backward(root)


def _record(
    out_values: Array,
    inputs: Sequence[DiffArray],
    make_backward: Callable[[tuple[bool, ...]], Callable[[Array], Sequence[Array | None]]],
) -> DiffArray:
    """Create the output array and record the op if gradients can flow."""
    tape = active_tape()
    inputs = tuple(inputs)
    if tape is not None:
        for arr in inputs:
            if arr.tape is not None and arr.tape is not tape:
                raise GradientError(
                    "input belongs to a different tape; tapes are confined to one "
                    "forward/backward cycle"
                )
    out = DiffArray(out_values)
    if tape is None:
        return out
    needs = tuple(a.requires_grad or a.tape is tape for a in inputs)
    if not any(needs):
        return out
    out.tape = tape
    tape._entries.append(_TapeEntry(out, inputs, make_backward(needs)))
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: DiffArray, b: DiffArray, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b, "add")
    out = a.values + b.values

    def make(needs):
        def back(d):
            da = _unbroadcast(d, a.shape) if needs[0] else None
            db = _unbroadcast(d, b.shape) if needs[1] else None
            return da, db

        return back

    return _record(out, (a, b), make)


def sub(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b, "sub")
    out = a.values - b.values

    def make(needs):
        def back(d):
            da = _unbroadcast(d, a.shape) if needs[0] else None
            db = _unbroadcast(-d, b.shape) if needs[1] else None
            return da, db

        return back

    return _record(out, (a, b), make)


def mul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.values, b.values
    out = av * bv

    def make(needs):
        def back(d):
            da = _unbroadcast(d * bv, a.shape) if needs[0] else None
            db = _unbroadcast(d * av, b.shape) if needs[1] else None
            return da, db

        return back

    return _record(out, (a, b), make)


def neg(a) -> DiffArray:
    a = as_diff(a)

    def make(needs):
        def back(d):
            return (-d,)

        return back

    return _record(-a.values, (a,), make)


def matmul(a, b) -> DiffArray:
    """Matrix product; backward gives dA = dC·Bᵀ and dB = Aᵀ·dC.

    Accepts the 2-d contract (m×k @ k×n) plus stacked 3-axis operands
    (batched over the leading axis, with a 2-d operand broadcast).
    """
    a, b = as_diff(a), as_diff(b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul inner axes disagree: {av.shape} @ {bv.shape}")
    if av.ndim == 3 and bv.ndim == 3 and av.shape[0] != bv.shape[0]:
        raise DimensionError(f"matmul batch axes disagree: {av.shape} @ {bv.shape}")
    out = av @ bv

    def make(needs):
        def back(d):
            da = db = None
            if needs[0]:
                da = _unbroadcast(d @ np.swapaxes(bv, -1, -2), av.shape)
            if needs[1]:
                db = _unbroadcast(np.swapaxes(av, -1, -2) @ d, bv.shape)
            return da, db

        return back

    return _record(out, (a, b), make)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _conv_out_len(T: int, s: int, d: int) -> int:
    receptive = d * (s - 1) + 1
    if T < receptive:
        raise ConfigError(
            f"input length {T} shorter than the receptive field of kernel size {s} "
            f"with dilation {d}; need length >= {receptive}"
        )
    return T - d * (s - 1)


def conv1d(x, kernel, dilation: int = 1) -> DiffArray:
    """Valid (unpadded) dilated cross-correlation of a 1-d signal.

    out[j] = sum_i kernel[i] * x[j + dilation*i], length T - d*(s-1).
    """
    x, kernel = as_diff(x), as_diff(kernel)
    if x.ndim != 1 or kernel.ndim != 1:
        raise DimensionError(
            f"conv1d takes 1-d signal and kernel, got {x.shape} and {kernel.shape}"
        )
    if dilation < 1:
        raise ConfigError(f"dilation must be a positive int, got {dilation}")
    T, s = x.shape[0], kernel.shape[0]
    out_len = _conv_out_len(T, s, dilation)
    xv, kv = x.values, kernel.values
    # tap-by-tap accumulation; conv1d_bank uses the same order so the two
    # agree bit for bit
    out = np.zeros(out_len)
    for i in range(s):
        out += kv[i] * xv[dilation * i : dilation * i + out_len]

    def make(needs):
        def back(d):
            dx = dk = None
            if needs[0]:
                dx = np.zeros_like(xv)
                for i in range(s):
                    dx[dilation * i : dilation * i + out_len] += d * kv[i]
            if needs[1]:
                dk = np.array(
                    [d @ xv[dilation * i : dilation * i + out_len] for i in range(s)]
                )
            return dx, dk

        return back

    return _record(out, (x, kernel), make)


def conv1d_bank(x, kernels, dilation: int = 1) -> DiffArray:
    """Apply K kernels to R independent rows at once.

    x: R×T, kernels: K×s -> R×K×(T - d*(s-1)). Row r, filter k equals
    conv1d(x[r], kernels[k], dilation).
    """
    x, kernels = as_diff(x), as_diff(kernels)
    if x.ndim != 2 or kernels.ndim != 2:
        raise DimensionError(
            f"conv1d_bank takes 2-d rows and kernels, got {x.shape} and {kernels.shape}"
        )
    if dilation < 1:
        raise ConfigError(f"dilation must be a positive int, got {dilation}")
    R = x.shape[0]
    K, s = kernels.shape
    T = x.shape[1]
    out_len = _conv_out_len(T, s, dilation)
    xv, kv = x.values, kernels.values
    out = np.zeros((R, K, out_len))
    for i in range(s):
        out += kv[None, :, i, None] * xv[:, None, dilation * i : dilation * i + out_len]

    def make(needs):
        def back(d):
            dx = dk = None
            if needs[0]:
                dx = np.zeros_like(xv)
                for i in range(s):
                    # sum filter contributions at tap i back onto the signal
                    dx[:, dilation * i : dilation * i + out_len] += np.einsum(
                        "rkj,k->rj", d, kv[:, i]
                    )
            if needs[1]:
                dk = np.stack(
                    [
                        np.einsum(
                            "rkj,rj->k", d, xv[:, dilation * i : dilation * i + out_len]
                        )
                        for i in range(s)
                    ],
                    axis=1,
                )
            return dx, dk

        return back

    return _record(out, (x, kernels), make)


def pool_segments(length: int, target: int) -> list[tuple[int, int]]:
    """Adaptive pooling segment bounds: segment i covers
    [floor(i*L/P), floor((i+1)*L/P)). The segments partition [0, L)."""
    if length < target:
        raise ConfigError(f"adaptive_max_pool: input length {length} < output size {target}")
    if target < 1:
        raise ConfigError(f"adaptive_max_pool: output size must be positive, got {target}")
    return [(i * length // target, (i + 1) * length // target) for i in range(target)]


def adaptive_max_pool(x, target: int) -> DiffArray:
    """Max over adaptive segments of the last axis; output size `target`.

    Backward routes each segment's gradient to its argmax position
    (first occurrence on ties).
    """
    x = as_diff(x)
    if x.ndim < 1:
        raise DimensionError("adaptive_max_pool needs at least 1 axis")
    length = x.shape[-1]
    segments = pool_segments(length, target)
    lead = x.shape[:-1]
    rows = int(np.prod(lead)) if lead else 1
    flat = x.values.reshape(rows, length)
    out = np.empty((rows, target))
    amax = np.empty((rows, target), dtype=np.intp)
    for i, (lo, hi) in enumerate(segments):
        seg = flat[:, lo:hi]
        out[:, i] = seg.max(axis=1)
        amax[:, i] = seg.argmax(axis=1) + lo

    def make(needs):
        def back(d):
            d2 = d.reshape(rows, target)
            dx = np.zeros_like(flat)
            r = np.arange(rows)
            for i in range(target):
                dx[r, amax[:, i]] += d2[:, i]
            return (dx.reshape(x.shape),)

        return back

    return _record(out.reshape(lead + (target,)), (x,), make)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BNState:
    """Running statistics for one batch-norm site (per-channel)."""

    running_mean: Array
    running_var: Array
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BNState":
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)

    def copy(self) -> "BNState":
        return BNState(self.running_mean.copy(), self.running_var.copy(), self.momentum, self.eps)


def batch_norm(x, scale, shift, state: BNState, training: bool) -> DiffArray:
    """Per-channel standardization with learnable scale/shift.

    Accepts channels×length (channel axis 0) or rows×channels×length
    (channel axis 1, statistics pooled over rows and length). Train mode
    normalizes by batch statistics (biased variance) and updates the
    running buffers with the configured momentum; eval mode normalizes by
    the running statistics.
    """
    x, scale, shift = as_diff(x), as_diff(scale), as_diff(shift)
    if x.ndim == 2:
        ch_axis, pop_axes = 0, (1,)
    elif x.ndim == 3:
        ch_axis, pop_axes = 1, (0, 2)
    else:
        raise DimensionError(f"batch_norm expects 2 or 3 axes, got shape {x.shape}")
    channels = x.shape[ch_axis]
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise DimensionError(
            f"batch_norm scale/shift must have shape ({channels},), got "
            f"{scale.shape} and {shift.shape}"
        )
    bshape = tuple(channels if ax == ch_axis else 1 for ax in range(x.ndim))
    xv = x.values
    gamma = scale.values.reshape(bshape)
    beta = shift.values.reshape(bshape)
    eps = state.eps

    if training:
        n = 1
        for ax in pop_axes:
            n *= xv.shape[ax]
        if n < 2:
            raise ConfigError(
                f"batch_norm in train mode needs a population of >= 2 per channel, got {n}"
            )
        mean = xv.mean(axis=pop_axes, keepdims=True)
        var = ((xv - mean) ** 2).mean(axis=pop_axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mean) * inv_std
        out = gamma * xhat + beta
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean.reshape(channels)
        state.running_var = (1 - m) * state.running_var + m * var.reshape(channels)

        def make(needs):
            def back(d):
                dx = dgamma = dbeta = None
                if needs[2]:
                    dbeta = d.sum(axis=pop_axes)
                if needs[1]:
                    dgamma = (d * xhat).sum(axis=pop_axes)
                if needs[0]:
                    dxhat = d * gamma
                    s1 = dxhat.sum(axis=pop_axes, keepdims=True)
                    s2 = (dxhat * xhat).sum(axis=pop_axes, keepdims=True)
                    dx = inv_std / n * (n * dxhat - s1 - xhat * s2)
                return dx, dgamma, dbeta

            return back

    else:
        mean = state.running_mean.reshape(bshape)
        inv_std = 1.0 / np.sqrt(state.running_var.reshape(bshape) + eps)
        xhat = (xv - mean) * inv_std
        out = gamma * xhat + beta

        def make(needs):
            def back(d):
                dx = dgamma = dbeta = None
                if needs[2]:
                    dbeta = d.sum(axis=pop_axes)
                if needs[1]:
                    dgamma = (d * xhat).sum(axis=pop_axes)
                if needs[0]:
                    dx = d * gamma * inv_std
                return dx, dgamma, dbeta

            return back

    return _record(out, (x, scale, shift), make)


# ---------------------------------------------------------------------------
# pointwise maps and shape ops
# ---------------------------------------------------------------------------

def tanh(x) -> DiffArray:
    x = as_diff(x)
    y = np.tanh(x.values)

    def make(needs):
        def back(d):
            return ((1.0 - y * y) * d,)

        return back

    return _record(y, (x,), make)


def sigmoid(x) -> DiffArray:
    x = as_diff(x)
    # split by sign for numerical stability
    xv = x.values
    y = np.where(xv >= 0, 1.0 / (1.0 + np.exp(-np.abs(xv))), np.exp(-np.abs(xv)) / (1.0 + np.exp(-np.abs(xv))))

    def make(needs):
        def back(d):
            return (y * (1.0 - y) * d,)

        return back

    return _record(y, (x,), make)


def softmax_rows(x) -> DiffArray:
    """Softmax along the last axis (each row becomes a probability vector)."""
    x = as_diff(x)
    xv = x.values
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def make(needs):
        def back(d):
            inner = (d * y).sum(axis=-1, keepdims=True)
            return (y * (d - inner),)

        return back

    return _record(y, (x,), make)


def concat(arrays: Sequence, axis: int) -> DiffArray:
    arrays = [as_diff(a) for a in arrays]
    if not arrays:
        raise DimensionError("concat needs at least one array")
    ndim = arrays[0].ndim
    ax = axis % ndim if ndim else axis
    ref = arrays[0].shape
    for a in arrays[1:]:
        if a.ndim != ndim or any(
            a.shape[i] != ref[i] for i in range(ndim) if i != ax
        ):
            raise DimensionError(
                f"concat axis {axis}: shapes {[tuple(a.shape) for a in arrays]} disagree "
                "off the concatenation axis"
            )
    out = np.concatenate([a.values for a in arrays], axis=ax)
    sizes = [a.shape[ax] for a in arrays]
    offsets = np.cumsum([0] + sizes)

    def make(needs):
        def back(d):
            grads = []
            for i, a in enumerate(arrays):
                if not needs[i]:
                    grads.append(None)
                    continue
                sl = [slice(None)] * ndim
                sl[ax] = slice(offsets[i], offsets[i + 1])
                grads.append(d[tuple(sl)])
            return grads

        return back

    return _record(out, arrays, make)


def reshape(x, shape: Sequence[int]) -> DiffArray:
    x = as_diff(x)
    shape = tuple(shape)
    out = x.values.reshape(shape)
    if out.ndim > _MAX_AXES:
        raise DimensionError(f"reshape to {shape} exceeds {_MAX_AXES} axes")

    def make(needs):
        def back(d):
            return (d.reshape(x.shape),)

        return back

    return _record(out, (x,), make)


def transpose_last(x) -> DiffArray:
    """Swap the last two axes (matrix transpose, batch-aware)."""
    x = as_diff(x)
    if x.ndim < 2:
        raise DimensionError(f"transpose_last needs >= 2 axes, got shape {x.shape}")
    out = np.swapaxes(x.values, -1, -2)

    def make(needs):
        def back(d):
            return (np.swapaxes(d, -1, -2),)

        return back

    return _record(out, (x,), make)


def sum_all(x) -> DiffArray:
    x = as_diff(x)

    def make(needs):
        def back(d):
            return (np.full(x.shape, d.reshape(-1)[0]),)

        return back

    return _record(np.asarray(x.values.sum()), (x,), make)


def mean_all(x) -> DiffArray:
    x = as_diff(x)
    n = x.size

    def make(needs):
        def back(d):
            return (np.full(x.shape, d.reshape(-1)[0] / n),)

        return back

    return _record(np.asarray(x.values.mean()), (x,), make)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> DiffArray:
    """Zero each element with probability p and scale survivors by 1/(1-p).

    Identity in eval mode or when p == 0. The caller owns the RNG stream,
    which is what makes runs reproducible.
    """
    x = as_diff(x)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs an explicit RNG")
    keep = rng.random(x.shape) >= p
    factor = keep / (1.0 - p)
    out = x.values * factor

    def make(needs):
        def back(d):
            return (d * factor,)

        return back

    return _record(out, (x,), make)
