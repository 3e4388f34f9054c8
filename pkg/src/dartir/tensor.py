"""Dense float64 tensors with a define-by-run gradient tape.

Every operation is a pure function from Tensors to a Tensor. While a
GradTape is active, each operation appends a backward closure to the tape;
``GradTape.backward`` replays those closures in exact reverse execution
order and accumulates gradients into ``Tensor.grad``. Without an active
tape the same functions run as plain forward computations.

All arithmetic is float64. Any operation whose result contains NaN or Inf
raises :class:`NumericsError` instead of propagating the value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, NumericsError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "GradCheckReport",
    "KinkProbe",
    "add",
    "sub",
    "mul",
    "scale",
    "add_const",
    "neg",
    "abs_",
    "sqrt_",
    "relu",
    "sigmoid",
    "matmul",
    "linear",
    "masked_softmax_lastdim",
    "layer_norm",
    "conv2d",
    "reflect_pad_bottom_right",
    "crop_top_left",
    "reshape",
    "transpose",
    "slice_lastdim",
    "concat",
    "global_avg_pool",
    "global_max_pool",
    "channel_mean",
    "channel_max",
    "take_rows",
    "take_middle",
    "gather_band",
    "replace_middle",
    "band_dot",
    "band_weighted_sum",
    "mean_all",
    "sum_all",
    "grad_check",
    "reflect_indices",
]


class Tensor:
    """A dense float64 array plus a gradient slot.

    ``data`` is always a ``numpy.ndarray`` of dtype float64; ``grad`` is
    either None or an array of the same shape.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericsError("tensor contains non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


# ---------------------------------------------------------------------------
# Tape machinery

_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Ordered record of executed operations for reverse-mode replay.

    A tape is rebuilt per forward pass: enter the context, run the forward
    computation, call :meth:`backward` on the scalar loss. One tape must
    never be shared between concurrent training steps.
    """

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward))

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and replay the tape in reverse order."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, backward in reversed(self._records):
            if out.grad is not None:
                backward(out.grad)

    def __len__(self) -> int:
        return len(self._records)


def _tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class KinkProbe:
    """Collects each nonsmooth op's distance to its nearest kink.

    Central differences are only meaningful when no ReLU/abs zero crossing
    or max-pool tie sits within the perturbation radius; gradient checkers
    probe a candidate evaluation point with this before trusting it.
    """

    def __init__(self) -> None:
        self.min_margin = math.inf

    def __enter__(self) -> "KinkProbe":
        _PROBE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _PROBE_STACK.pop()
        assert popped is self

    def note(self, margin: float) -> None:
        if margin < self.min_margin:
            self.min_margin = margin


_PROBE_STACK: list[KinkProbe] = []


def _note_kink(margin: float) -> None:
    if _PROBE_STACK:
        _PROBE_STACK[-1].note(margin)


def _top2_gap(values: np.ndarray, axis: int) -> float:
    """Smallest gap between the largest and second-largest along an axis."""
    if values.shape[axis] < 2:
        return math.inf
    part = np.partition(values, values.shape[axis] - 2, axis=axis)
    top = np.take(part, values.shape[axis] - 1, axis=axis)
    second = np.take(part, values.shape[axis] - 2, axis=axis)
    return float((top - second).min())


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Gradient arrays are never mutated in place anywhere in this module,
    # so aliasing the incoming array on first accumulation is safe.
    if t.grad is None:
        t.grad = np.asarray(g)
    else:
        t.grad = t.grad + g


def _result(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericsError("operation produced non-finite values")
    out.data = arr
    out.grad = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise operations


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data + b.data)
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))
        tape.record(out, backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data - b.data)
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(-g, b.data.shape))
        tape.record(out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data * b.data)
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))
        tape.record(out, backward)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _result(a.data * c)
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            _accum(a, g * c)
        tape.record(out, backward)
    return out


def add_const(a: Tensor, c: float) -> Tensor:
    out = _result(a.data + c)
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            _accum(a, g)
        tape.record(out, backward)
    return out


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def abs_(a: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient 0 at exact zeros."""
    out = _result(np.abs(a.data))
    if _PROBE_STACK and a.data.size:
        _note_kink(float(out.data.min()))
    tape = _tape()
    if tape is not None:
        sign = np.sign(a.data)
        def backward(g: np.ndarray) -> None:
            _accum(a, g * sign)
        tape.record(out, backward)
    return out


def sqrt_(a: Tensor) -> Tensor:
    out = _result(np.sqrt(a.data))
    tape = _tape()
    if tape is not None:
        y = out.data
        def backward(g: np.ndarray) -> None:
            _accum(a, g / (2.0 * y))
        tape.record(out, backward)
    return out


def relu(a: Tensor) -> Tensor:
    out = _result(np.maximum(a.data, 0.0))
    if _PROBE_STACK and a.data.size:
        _note_kink(float(np.abs(a.data).min()))
    tape = _tape()
    if tape is not None:
        mask = a.data > 0.0
        def backward(g: np.ndarray) -> None:
            _accum(a, g * mask)
        tape.record(out, backward)
    return out


_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def sigmoid(a: Tensor) -> Tensor:
    # Evaluate on the negative half-line only, so exp never overflows, and
    # clamp into the largest representable open interval: the gate must
    # stay strictly between 0 and 1 even where float64 would saturate.
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    np.clip(y, _SIGMOID_LO, _SIGMOID_HI, out=y)
    out = _result(y)
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            _accum(a, g * y * (1.0 - y))
        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    out = _result(a.data @ b.data)
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))
        tape.record(out, backward)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b over the last dimension."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def masked_softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last dimension, restricted to admissible positions.

    ``mask`` is a boolean array of the same shape; True marks admissible
    positions. Masked positions come out exactly 0 and each row of
    admissible positions sums to 1. A row with no admissible position is
    an error. Stabilized by subtracting the row max over admissible
    positions before exponentiation.
    """
    if mask is None:
        m = x.data.max(axis=-1, keepdims=True)
        e = np.exp(x.data - m)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.data.shape:
            raise ShapeError(f"mask shape {mask.shape} != input shape {x.data.shape}")
        if not mask.any(axis=-1).all():
            raise NumericsError("masked softmax saw a row with no admissible position")
        neg = np.where(mask, x.data, -np.inf)
        m = neg.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(x.data - m), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    y = e / denom
    out = _result(y)
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(x, y * (g - dot))
        tape.record(out, backward)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last dimension, then apply the affine pair."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _result(xhat * gamma.data + beta.data)
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            sum_axes = tuple(range(g.ndim - 1))
            _accum(beta, g.sum(axis=sum_axes))
            _accum(gamma, (g * xhat).sum(axis=sum_axes))
            gh = g * gamma.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gh - m1 - xhat * m2))
        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# Reflect padding and convolution


def reflect_indices(n: int, pad_before: int, pad_after: int) -> np.ndarray:
    """Source index for each position of a reflect-101 padded axis.

    Reflection excludes the edge sample ([a,b,c] padded by 2 on the left
    reads [c,b,a,b,c]) and folds as often as needed, so pads larger than
    the axis are legal. An axis of extent 1 maps everything to index 0.
    """
    t = np.arange(-pad_before, n + pad_after)
    if n == 1:
        return np.zeros_like(t)
    period = 2 * n - 2
    m = np.mod(t, period)
    return np.where(m < n, m, period - m)


def _fold_reflect(g: np.ndarray, n: int, pad_before: int, pad_after: int,
                  axis: int) -> np.ndarray:
    """Sum single-bounce reflect-pad gradients back onto the n source rows."""
    take = [slice(None)] * g.ndim
    take[axis] = slice(pad_before, pad_before + n)
    out = g[tuple(take)].copy()
    if pad_before:
        src = [slice(None)] * g.ndim
        dst = [slice(None)] * g.ndim
        src[axis] = slice(pad_before - 1, None, -1)
        dst[axis] = slice(1, pad_before + 1)
        out[tuple(dst)] += g[tuple(src)]
    if pad_after:
        src = [slice(None)] * g.ndim
        dst = [slice(None)] * g.ndim
        src[axis] = slice(pad_before + n, pad_before + n + pad_after)
        stop = n - 2 - pad_after
        dst[axis] = slice(n - 2, None if stop < 0 else stop, -1)
        out[tuple(dst)] += g[tuple(src)]
    return out


def reflect_pad_bottom_right(x: Tensor, pad_b: int, pad_r: int) -> Tensor:
    """Reflect-pad a [H, W, D] map on its bottom and right edges."""
    h, w = x.data.shape[0], x.data.shape[1]
    iy = reflect_indices(h, 0, pad_b)
    ix = reflect_indices(w, 0, pad_r)
    out = _result(x.data[iy[:, None], ix[None, :]])
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            dx = np.zeros_like(x.data)
            np.add.at(dx, (iy[:, None], ix[None, :]), g)
            _accum(x, dx)
        tape.record(out, backward)
    return out


def crop_top_left(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left [h, w] corner of a [H, W, ...] tensor."""
    if h > x.data.shape[0] or w > x.data.shape[1]:
        raise ShapeError(f"cannot crop {x.data.shape} down to ({h}, {w})")
    out = _result(x.data[:h, :w])
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            dx = np.zeros_like(x.data)
            dx[:h, :w] = g
            _accum(x, dx)
        tape.record(out, backward)
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-size cross-correlation of a [C_in, H, W] map with reflect padding.

    ``kernel`` is [C_out, C_in, k, k] with odd k. The input must satisfy
    H, W > k // 2 so a single reflection covers the pad.
    """
    cin, h, w = x.data.shape
    cout, cin_k, kh, kw = kernel.data.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"conv2d kernel must be square with odd extent, got {kh}x{kw}")
    if cin_k != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {cin_k}")
    pad = kh // 2
    if h <= pad or w <= pad:
        raise ShapeError(
            f"conv2d input {h}x{w} too small for reflect pad {pad} (needs > {pad})"
        )
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.data.shape} != ({cout},)")

    iy = reflect_indices(h, pad, pad)
    ix = reflect_indices(w, pad, pad)
    padded = x.data[:, iy[:, None], ix[None, :]]
    # Cross-correlate via one shifted tensordot per kernel offset; this
    # beats im2col here because the patch tensor never materializes.
    y = np.zeros((cout, h, w))
    for dy in range(kh):
        for dx in range(kw):
            patch = padded[:, dy:dy + h, dx:dx + w]
            y += np.tensordot(kernel.data[:, :, dy, dx], patch, axes=([1], [0]))
    if bias is not None:
        y += bias.data[:, None, None]
    out = _result(y)
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            dkernel = np.empty_like(kernel.data)
            dpadded = np.zeros_like(padded)
            for dy in range(kh):
                for dx in range(kw):
                    patch = padded[:, dy:dy + h, dx:dx + w]
                    dkernel[:, :, dy, dx] = np.tensordot(g, patch, axes=([1, 2], [1, 2]))
                    dpadded[:, dy:dy + h, dx:dx + w] += np.tensordot(
                        kernel.data[:, :, dy, dx], g, axes=([0], [0])
                    )
            folded = _fold_reflect(dpadded, h, pad, pad, axis=1)
            folded = _fold_reflect(folded, w, pad, pad, axis=2)
            _accum(x, folded)
            _accum(kernel, dkernel)
            if bias is not None:
                _accum(bias, g.sum(axis=(1, 2)))
        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# Shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = _result(x.data.reshape(shape))
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            _accum(x, g.reshape(x.data.shape))
        tape.record(out, backward)
    return out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = _result(x.data.transpose(axes))
    tape = _tape()
    if tape is not None:
        inv = tuple(np.argsort(axes))
        def backward(g: np.ndarray) -> None:
            _accum(x, g.transpose(inv))
        tape.record(out, backward)
    return out


def slice_lastdim(x: Tensor, lo: int, hi: int) -> Tensor:
    out = _result(x.data[..., lo:hi])
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            dx = np.zeros_like(x.data)
            dx[..., lo:hi] = g
            _accum(x, dx)
        tape.record(out, backward)
    return out


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    out = _result(np.concatenate([p.data for p in parts], axis=axis))
    tape = _tape()
    if tape is not None:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def backward(g: np.ndarray) -> None:
            moved = np.moveaxis(g, axis, 0)
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                _accum(p, np.moveaxis(moved[lo:hi], 0, axis))
        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# Pooling and per-position channel statistics


def global_avg_pool(x: Tensor) -> Tensor:
    """[C, H, W] -> [C], mean over all positions."""
    c, h, w = x.data.shape
    out = _result(x.data.mean(axis=(1, 2)))
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            _accum(x, np.broadcast_to(g[:, None, None] / (h * w), x.data.shape))
        tape.record(out, backward)
    return out


def global_max_pool(x: Tensor) -> Tensor:
    """[C, H, W] -> [C], max over all positions; grad routes to the first max."""
    c, h, w = x.data.shape
    flat = x.data.reshape(c, h * w)
    if _PROBE_STACK:
        _note_kink(_top2_gap(flat, axis=1))
    idx = flat.argmax(axis=1)
    out = _result(flat[np.arange(c), idx])
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            dflat = np.zeros_like(flat)
            dflat[np.arange(c), idx] = g
            _accum(x, dflat.reshape(x.data.shape))
        tape.record(out, backward)
    return out


def channel_mean(x: Tensor) -> Tensor:
    """[C, H, W] -> [1, H, W], per-position mean over channels."""
    c = x.data.shape[0]
    out = _result(x.data.mean(axis=0, keepdims=True))
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            _accum(x, np.broadcast_to(g / c, x.data.shape))
        tape.record(out, backward)
    return out


def channel_max(x: Tensor) -> Tensor:
    """[C, H, W] -> [1, H, W], per-position max over channels (first-max grad)."""
    if _PROBE_STACK:
        _note_kink(_top2_gap(x.data, axis=0))
    idx = x.data.argmax(axis=0)
    out = _result(np.take_along_axis(x.data, idx[None], axis=0))
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            dx = np.zeros_like(x.data)
            np.put_along_axis(dx, idx[None], g, axis=0)
            _accum(x, dx)
        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# Gather/scatter used by the attention kernels


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a [N, ...] tensor; ``idx`` may have any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    out = _result(x.data[idx])
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            dx = np.zeros_like(x.data)
            np.add.at(dx, idx, g)
            _accum(x, dx)
        tape.record(out, backward)
    return out


def take_middle(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along axis 1 of a [H, N, D] tensor; idx of shape [..] selects rows."""
    idx = np.asarray(idx, dtype=np.int64)
    out = _result(x.data[:, idx])
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            dx = np.zeros_like(x.data)
            for head in range(x.data.shape[0]):
                np.add.at(dx[head], idx, g[head])
            _accum(x, dx)
        tape.record(out, backward)
    return out


def gather_band(x: Tensor, offsets: np.ndarray, index: np.ndarray) -> Tensor:
    """Gather each token's banded neighbors from a [H, N, D] tensor.

    ``offsets`` lists the band's relative positions and ``index`` is the
    precomputed [N, w] neighbor table (out-of-range entries clipped to the
    edge). Equivalent to x[:, index], but the backward pass scatters with
    one shifted slice-add per offset instead of a generic index scatter.
    """
    index = np.asarray(index, dtype=np.int64)
    out = _result(x.data[:, index])
    tape = _tape()
    if tape is not None:
        n = x.data.shape[1]
        def backward(g: np.ndarray) -> None:
            dx = np.zeros_like(x.data)
            for k, off in enumerate(offsets):
                off = int(off)
                lo = max(0, -off)
                hi = min(n, n - off)
                if lo < hi:
                    dx[:, lo + off:hi + off] += g[:, lo:hi, k]
                if lo > 0:
                    dx[:, 0] += g[:, :lo, k].sum(axis=1)
                if hi < n:
                    dx[:, n - 1] += g[:, hi:, k].sum(axis=1)
            _accum(x, dx)
        tape.record(out, backward)
    return out


def replace_middle(x: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """Copy of a [H, N, D] tensor with rows ``idx`` along axis 1 replaced."""
    idx = np.asarray(idx, dtype=np.int64)
    data = x.data.copy()
    data[:, idx] = rows.data
    out = _result(data)
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            dx = g.copy()
            dx[:, idx] = 0.0
            _accum(x, dx)
            _accum(rows, g[:, idx])
        tape.record(out, backward)
    return out


def band_dot(q: Tensor, kb: Tensor) -> Tensor:
    """Per-token scores against gathered neighbors.

    q is [H, N, D], kb is [H, N, W, D]; result [H, N, W] with
    out[h,n,w] = q[h,n] . kb[h,n,w].
    """
    out = _result(np.einsum("hnd,hnwd->hnw", q.data, kb.data))
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            _accum(q, np.einsum("hnw,hnwd->hnd", g, kb.data))
            _accum(kb, g[:, :, :, None] * q.data[:, :, None, :])
        tape.record(out, backward)
    return out


def band_weighted_sum(p: Tensor, vb: Tensor) -> Tensor:
    """Aggregate gathered neighbor values with per-token weights.

    p is [H, N, W], vb is [H, N, W, D]; result [H, N, D].
    """
    out = _result(np.einsum("hnw,hnwd->hnd", p.data, vb.data))
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            _accum(p, np.einsum("hnd,hnwd->hnw", g, vb.data))
            _accum(vb, p.data[:, :, :, None] * g[:, :, None, :])
        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# Reductions


def sum_all(x: Tensor) -> Tensor:
    out = _result(x.data.sum())
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            _accum(x, np.broadcast_to(g, x.data.shape))
        tape.record(out, backward)
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = _result(x.data.mean())
    tape = _tape()
    if tape is not None:
        def backward(g: np.ndarray) -> None:
            _accum(x, np.broadcast_to(g / n, x.data.shape))
        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error between tape and central differences."""

    per_param: dict[str, float]

    @property
    def max_relative_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_relative_error <= tol

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients of a scalar ``f()`` against central differences.

    ``f`` must be a pure function of ``params`` (closing over fixed inputs).
    The relative error for each element is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    for p in params.values():
        p.grad = None
    with GradTape() as tape:
        loss = f()
        if loss.data.size != 1:
            raise ShapeError(f"grad_check needs a scalar loss, got {loss.data.shape}")
        if not np.isfinite(loss.data).all():
            raise NumericsError("grad_check loss is non-finite")
        tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    report: dict[str, float] = {}
    for name, p in params.items():
        worst = 0.0
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f().item()
            flat[i] = orig - h
            lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            denom = max(abs(ana[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(ana[i] - numeric) / denom)
        report[name] = worst
    return GradCheckReport(report)
