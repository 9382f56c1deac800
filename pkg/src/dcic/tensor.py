"""Tape-based reverse-mode autodiff over dense numpy arrays.

Every network in this package runs on the ops below. Tensors default to
float32; float64 arrays are accepted unchanged so numerical checks can run
at higher precision. Gradients are recorded only while a :class:`Tape` is
active, so eval-mode forward passes pay no bookkeeping cost.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the requested operation."""


class TapeConsumedError(RuntimeError):
    """A tape was replayed more than once."""


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed ops, replayed exactly once in reverse.

    Use as a context manager around the forward pass, then hand the tape to
    :func:`backward`. Ops executed while no tape is active record nothing.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPES.pop()
        return False


def _tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Dense N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        # float32 semantics by default; explicit float64 ndarrays pass through
        # so numerical checks can run at higher precision
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    """Trainable tensor; its grad buffer exists from the start (zeros)."""
    return Tensor(data, requires_grad=True)


def record(out: Tensor, inputs, bwd) -> Tensor:
    """Register `bwd` for `out` on the active tape if any input needs grad.

    `bwd(g)` receives the upstream gradient and must accumulate into the
    inputs via :func:`accumulate`.
    """
    t = _tape()
    if t is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        t._records.append((out, bwd))
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add `g` into t.grad, allocating a zero buffer on first touch."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor, tape: Tape) -> None:
    """Replay the tape in reverse, filling .grad for everything reachable.

    Parameters never touched by the loss keep their zero grad buffers. The
    tape is single-use; a second call raises :class:`TapeConsumedError`.
    """
    if tape._consumed:
        raise TapeConsumedError("tape was already consumed by a backward pass")
    tape._consumed = True
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, bwd in reversed(tape._records):
        g = out.grad
        if g is None:
            continue
        bwd(g)
        out.grad = None
    tape._records.clear()


def assert_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise / shape ops


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce `g` down to `shape` (adjoint of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g, b.data.shape))

    return record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            accumulate(b, -_unbroadcast(g, b.data.shape))

    return record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return record(out, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def bwd(g):
        accumulate(x, g * (x.data > 0))

    return record(out, (x,), bwd)


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"residual_add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            accumulate(a, g)
        if b.requires_grad:
            accumulate(b, g)

    return record(out, (a, b), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        accumulate(x, g.reshape(x.data.shape))

    return record(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    inv = np.argsort(axes)

    def bwd(g):
        accumulate(x, g.transpose(inv))

    return record(out, (x,), bwd)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate(x, np.broadcast_to(g, x.data.shape))

    return record(out, (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    n = x.data.size // out.data.size

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate(x, np.broadcast_to(g, x.data.shape) / n)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution


def _pad_spec(size: int, k_eff: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (pad_lo, pad_hi, out_size); odd 'same' padding goes bottom/right."""
    if padding == "same":
        total = k_eff - 1
        lo = total // 2
        hi = total - lo
    elif padding == "valid":
        lo = hi = 0
    else:
        raise ValueError(f"unknown padding mode {padding!r}")
    out = (size + lo + hi - k_eff) // stride + 1
    return lo, hi, out


def _check_conv_args(stride: int, dilation: int) -> None:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")


# below this many output positions per image, batched GEMMs are overhead-bound
# and a single merged GEMM over (K, N*P) columns wins
_MERGE_COLS_MAX_P = 600


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, dilation: int, padding: str):
    """Gather conv windows into columns, plus (oh, ow).

    Large maps come back 'batched' as (N, C*kh*kw, P); small ones 'merged'
    as (C*kh*kw, N*P) so the whole batch feeds one GEMM. Unpadded 1x1
    stride-1 convs are a zero-copy reshape.
    """
    n, c, h, w = x.shape
    keh = kh + (kh - 1) * (dilation - 1)
    kew = kw + (kw - 1) * (dilation - 1)
    pt, pb, oh = _pad_spec(h, keh, stride, padding)
    pl, pr, ow = _pad_spec(w, kew, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv output would be empty for input {h}x{w}, kernel {kh}x{kw}")
    merged = n > 1 and oh * ow <= _MERGE_COLS_MAX_P
    if kh == kw == 1 and stride == 1 and not merged:
        return x.reshape(n, c, h * w), oh, ow
    padded_size = (h + pt + pb) * (w + pl + pr)
    if padded_size <= 2 * h * w:
        if pt or pb or pl or pr:
            xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        else:
            xp = x
        if merged:
            cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    cols[:, i, j] = xp[:, :, i * dilation:i * dilation + stride * oh:stride,
                                       j * dilation:j * dilation + stride * ow:stride].transpose(1, 0, 2, 3)
            return cols.reshape(c * kh * kw, n * oh * ow), oh, ow
        cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i * dilation:i * dilation + stride * oh:stride,
                                      j * dilation:j * dilation + stride * ow:stride]
        return cols.reshape(n, c * kh * kw, oh * ow), oh, ow
    # heavy padding (large dilations): gather the in-bounds sub-rectangle of
    # each tap from the unpadded input; out-of-bounds taps stay zero
    if merged:
        cols = np.zeros((c, kh, kw, n, oh, ow), dtype=x.dtype)
    else:
        cols = np.zeros((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        ylo = max(0, (pt - i * dilation + stride - 1) // stride)
        yhi = min(oh, (h + pt - i * dilation + stride - 1) // stride)
        if ylo >= yhi:
            continue
        sy = ylo * stride + i * dilation - pt
        for j in range(kw):
            xlo = max(0, (pl - j * dilation + stride - 1) // stride)
            xhi = min(ow, (w + pl - j * dilation + stride - 1) // stride)
            if xlo >= xhi:
                continue
            sx = xlo * stride + j * dilation - pl
            src = x[:, :, sy:sy + (yhi - ylo) * stride:stride,
                    sx:sx + (xhi - xlo) * stride:stride]
            if merged:
                cols[:, i, j, :, ylo:yhi, xlo:xhi] = src.transpose(1, 0, 2, 3)
            else:
                cols[:, :, i, j, ylo:yhi, xlo:xhi] = src
    if merged:
        return cols.reshape(c * kh * kw, n * oh * ow), oh, ow
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _cols_matmul(w2: np.ndarray, cols: np.ndarray, n: int, oh: int, ow: int) -> np.ndarray:
    """(O, K) times columns in either layout -> (N, O, oh*ow)."""
    if cols.ndim == 2:  # merged (K, N*P)
        y = (w2 @ cols).reshape(w2.shape[0], n, oh * ow)
        return np.ascontiguousarray(y.transpose(1, 0, 2))
    return np.matmul(w2, cols)


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, dilation: int, padding: str):
    n = x.shape[0]
    cout = w.shape[0]
    cols, oh, ow = _im2col(x, w.shape[2], w.shape[3], stride, dilation, padding)
    y = _cols_matmul(w.reshape(cout, -1), cols, n, oh, ow)
    return y.reshape(n, cout, oh, ow), cols


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, dilation: int,
                     padding: str, in_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of _conv_fwd w.r.t. its input; also the transposed-conv forward."""
    n, cout, oh, ow = g.shape
    _, cin, kh, kw = w.shape
    h, wd = in_hw
    keh = kh + (kh - 1) * (dilation - 1)
    kew = kw + (kw - 1) * (dilation - 1)
    pt, pb, oh2 = _pad_spec(h, keh, stride, padding)
    pl, pr, ow2 = _pad_spec(wd, kew, stride, padding)
    if (oh2, ow2) != (oh, ow):
        raise ShapeError(f"gradient spatial dims {(oh, ow)} do not match conv output {(oh2, ow2)}")
    if stride == 1 and (oh, ow) == (h, wd) and kh % 2 and kw % 2:
        # symmetric 'same' padding: the adjoint is itself a convolution with
        # the channel-swapped, 180-degree-rotated kernel (gather beats scatter)
        wr = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        y, _ = _conv_fwd(g, wr, 1, dilation, "same")
        return y
    w2 = w.reshape(cout, -1)
    if n > 1 and oh * ow <= _MERGE_COLS_MAX_P:
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        contrib = (w2.T @ g2).reshape(cin, kh, kw, n, oh, ow)
        if kh == kw == 1 and stride == 1 and not (pt or pb or pl or pr):
            return np.ascontiguousarray(contrib[:, 0, 0].transpose(1, 0, 2, 3)).reshape(n, cin, h, wd)
        dxp = np.zeros((n, cin, h + pt + pb, wd + pl + pr), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i * dilation:i * dilation + stride * oh:stride,
                    j * dilation:j * dilation + stride * ow:stride] += \
                    contrib[:, i, j].transpose(1, 0, 2, 3)
    else:
        contrib = np.matmul(w2.T, g.reshape(n, cout, oh * ow))
        if kh == kw == 1 and stride == 1 and not (pt or pb or pl or pr):
            return contrib.reshape(n, cin, h, wd)
        contrib = contrib.reshape(n, cin, kh, kw, oh, ow)
        dxp = np.zeros((n, cin, h + pt + pb, wd + pl + pr), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i * dilation:i * dilation + stride * oh:stride,
                    j * dilation:j * dilation + stride * ow:stride] += contrib[:, :, i, j]
    if pt or pb or pl or pr:
        return np.ascontiguousarray(dxp[:, :, pt:pt + h, pl:pl + wd])
    return dxp


def _conv_weight_grad_cols(cols: np.ndarray, g: np.ndarray, wshape) -> np.ndarray:
    n, cout = g.shape[0], g.shape[1]
    if cols.ndim == 2:  # merged (K, N*P)
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        return (g2 @ cols.T).reshape(wshape)
    per_sample = np.matmul(g.reshape(n, cout, -1), cols.transpose(0, 2, 1))
    return per_sample.sum(axis=0).reshape(wshape)


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, kh: int, kw: int, stride: int,
                      dilation: int, padding: str) -> np.ndarray:
    cols, _, _ = _im2col(x, kh, kw, stride, dilation, padding)
    cout, cin = g.shape[1], x.shape[1]
    return _conv_weight_grad_cols(cols, g, (cout, cin, kh, kw))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: str = "same") -> Tensor:
    """2-D convolution, NCHW layout, weight (Cout, Cin, kh, kw).

    'same' padding totals effective_kernel-1 zeros, extra on bottom/right;
    dilation spaces the kernel taps without adding parameters.
    """
    _check_conv_args(stride, dilation)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels but weight expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    n, _, h, wd = x.shape
    cout = w.shape[0]
    cols, oh, ow = _im2col(x.data, w.shape[2], w.shape[3], stride, dilation, padding)
    y = _cols_matmul(w.data.reshape(cout, -1), cols, n, oh, ow)
    if b is not None:
        y += b.data.reshape(1, -1, 1)
    out = Tensor(y.reshape(n, cout, oh, ow))

    def bwd(g):
        if b is not None and b.requires_grad:
            accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            accumulate(w, _conv_weight_grad_cols(cols, g, w.data.shape))
        if x.requires_grad:
            accumulate(x, _conv_input_grad(g, w.data, stride, dilation, padding, (h, wd)))

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, bwd)


def transposed_conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Adjoint of conv2d('same', stride): (N, A, h, w) -> (N, B, h*s, w*s).

    Weight layout matches the conv it transposes: (A, B, kh, kw).
    """
    _check_conv_args(stride, 1)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"transposed_conv2d expects 4-D input/weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"input has {x.shape[1]} channels but weight expects {w.shape[0]}")
    n, _, h, wd = x.shape
    out_hw = (h * stride, wd * stride)
    out = Tensor(_conv_input_grad(x.data, w.data, stride, 1, "same", out_hw))

    def bwd(g):
        if x.requires_grad:
            y, _ = _conv_fwd(g, w.data, stride, 1, "same")
            accumulate(x, y)
        if w.requires_grad:
            accumulate(w, _conv_weight_grad(g, x.data, w.shape[2], w.shape[3], stride, 1, "same"))

    return record(out, (x, w), bwd)


# ---------------------------------------------------------------------------
# normalization, pooling, linear


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, train: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm on NCHW input; running stats mutated in train mode."""
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if n == 0:
        raise ShapeError("batch_norm on an empty batch")
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"scale/shift must have shape ({c},)")
    if train:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = Tensor(scale.data.reshape(1, c, 1, 1) * xhat + shift.data.reshape(1, c, 1, 1))

    def bwd(g):
        if shift.requires_grad:
            accumulate(shift, g.sum(axis=(0, 2, 3)))
        if scale.requires_grad:
            accumulate(scale, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gs = g * scale.data.reshape(1, c, 1, 1)
            if train:
                mean_gs = gs.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gs * xhat).mean(axis=(0, 2, 3), keepdims=True)
                accumulate(x, inv.reshape(1, c, 1, 1) * (gs - mean_gs - xhat * mean_gx))
            else:
                accumulate(x, gs * inv.reshape(1, c, 1, 1))

    return record(out, (x, scale, shift), bwd)


def max_pool(x: Tensor, kernel: int = 3, stride: int = 2, padding: str = "same") -> Tensor:
    """Max pooling; gradient routes to the first max per window on ties."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ShapeError(f"input {h}x{w} smaller than pooling kernel {kernel}")
    pt, pb, oh = _pad_spec(h, kernel, stride, padding)
    pl, pr, ow = _pad_spec(w, kernel, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def bwd(g):
        dxp = np.zeros_like(xp)
        for t in range(kernel * kernel):
            i, j = divmod(t, kernel)
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g * (arg == t)
        accumulate(x, dxp[:, :, pt:pt + h, pl:pl + w])

    return record(out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Collapse the spatial dims by averaging: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bwd(g):
        accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))

    return record(out, (x,), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map (N, D) @ (D, K) + (K,)."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear expects 2-D input/weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"input dim {x.shape[1]} does not match weight dim {w.shape[0]}")
    y = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[1]} outputs")
        y = y + b.data
    out = Tensor(y)

    def bwd(g):
        if b is not None and b.requires_grad:
            accumulate(b, g.sum(axis=0))
        if w.requires_grad:
            accumulate(w, x.data.T @ g)
        if x.requires_grad:
            accumulate(x, g @ w.data.T)

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, bwd)


# ---------------------------------------------------------------------------
# upsampling


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Repeat each pixel factor x factor times."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3))

    def bwd(g):
        accumulate(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return record(out, (x,), bwd)


@lru_cache(maxsize=None)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D linear interpolation matrix mapping n_in samples to n_out (ends align)."""
    m = np.zeros((n_out, n_in), dtype=np.float32)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    scale = (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
    for j in range(n_out):
        pos = j * scale
        i0 = min(int(np.floor(pos)), n_in - 2)
        frac = pos - i0
        m[j, i0] = 1.0 - frac
        m[j, i0 + 1] = frac
    return m


def bilinear_upsample(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear resize of NCHW maps to out_hw (corner samples align)."""
    n, c, h, w = x.shape
    mh = _interp_matrix(h, out_hw[0]).astype(x.data.dtype)
    mw = _interp_matrix(w, out_hw[1]).astype(x.data.dtype)
    out = Tensor(np.matmul(np.matmul(mh, x.data), mw.T))

    def bwd(g):
        accumulate(x, np.matmul(np.matmul(mh.T, g), mw))

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# losses


def mse_loss(x: Tensor, y: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    if x.data.shape != y.data.shape:
        raise ShapeError(f"mse_loss shapes differ: {x.shape} vs {y.shape}")
    diff = x.data - y.data
    out = Tensor(np.asarray((diff * diff).mean(), dtype=x.data.dtype))
    n = diff.size

    def bwd(g):
        scaled = (2.0 / n) * g * diff
        if x.requires_grad:
            accumulate(x, scaled)
        if y.requires_grad:
            accumulate(y, -scaled)

    return record(out, (x, y), bwd)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray,
                          ignore_label: int | None = None) -> Tensor:
    """Mean of -log softmax(logits)[label] over rows, max-subtracted for stability.

    Rows whose label equals `ignore_label` contribute neither loss nor gradient.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N, K) logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    valid = np.ones(n, dtype=bool) if ignore_label is None else labels != ignore_label
    checked = labels[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid labels in batch")
    safe = np.where(valid, labels, 0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    losses = -logp[np.arange(n), safe] * valid
    out = Tensor(np.asarray(losses.sum() / n_valid, dtype=logits.data.dtype))

    def bwd(g):
        d = probs.copy()
        d[np.arange(n), safe] -= 1.0
        d *= (valid / n_valid)[:, None]
        accumulate(logits, g * d)

    return record(out, (logits,), bwd)
