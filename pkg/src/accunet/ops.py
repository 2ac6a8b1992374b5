"""Differentiable numpy kernels.

Every op takes and returns :class:`~accunet.tensor.Tensor`. Compute happens
in the dtype of the inputs (float32 for training, float64 when checking
gradients). When an op has a tracked input on the active tape, it records a
closure over the minimal saved state needed for its backward rule.

FLOP accounting: 2 FLOPs per multiply-accumulate, plus 1 FLOP per output
element for bias adds, normalization, activations, pooling, resampling and
elementwise arithmetic. Concatenation and reshapes are free. While a
:class:`FlopCounter` is active each executed kernel adds its cost.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from accunet.tensor import (
    DegenerateBatchError,
    DivisibilityError,
    NumericError,
    ShapeError,
    Tensor,
    active_tape,
)

# ---------------------------------------------------------------- plumbing

CHECK_FINITE = True


class FlopCounter:
    """Accumulate the FLOPs of every kernel run inside the ``with`` block."""

    def __init__(self):
        self.total = 0
        self.by_op: dict = {}

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)

    def __enter__(self):
        _counters.append(self)
        return self

    def __exit__(self, *exc):
        _counters.remove(self)


_counters: list = []


def _count(op: str, n: int) -> None:
    for c in _counters:
        c.add(op, n)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _needs(*inputs) -> Optional[tuple]:
    """Which inputs need gradients, or None if nothing is tracked."""
    tape = active_tape()
    if tape is None:
        return None
    flags = tuple(t is not None and tape.tracks(t) for t in inputs)
    return flags if any(flags) else None


def _emit(op: str, data: np.ndarray, inputs: Sequence, need, backward) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data.sum()):
        raise NumericError(f"{op}: produced non-finite values")
    out = Tensor(data)
    if need is not None:
        kept = [(t, i) for i, t in enumerate(inputs) if t is not None]

        def _bw(g):
            gs = backward(g)
            return [gs[i] for _, i in kept]

        active_tape().record(op, out, [t for t, _ in kept], _bw)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _chan_sum(a: np.ndarray) -> np.ndarray:
    """Sum a (n, c, h, w) array over everything but channels."""
    n, c = a.shape[:2]
    return a.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def _check4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a (n, c, h, w) tensor, got shape {x.shape}")


# -------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    need = _needs(a, b)
    out = a.data + b.data
    _count("add", out.size)
    sa, sb = a.shape, b.shape
    return _emit("add", out, (a, b), need,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    need = _needs(a, b)
    out = a.data - b.data
    _count("sub", out.size)
    sa, sb = a.shape, b.shape
    return _emit("sub", out, (a, b), need,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    need = _needs(a, b)
    out = a.data * b.data
    _count("mul", out.size)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if need[0] else None
        gb = _unbroadcast(g * a.data, b.shape) if need[1] else None
        return ga, gb

    return _emit("mul", out, (a, b), need, backward)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    need = _needs(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    shape = x.shape
    return _emit("sum", out, (x,), need,
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    need = _needs(x)
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    shape, n = x.shape, x.size
    return _emit("mean", out, (x,), need,
                 lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    need = _needs(x)
    out = x.data.reshape(shape)
    src = x.shape
    return _emit("reshape", out, (x,), need, lambda g: (g.reshape(src),))


# -------------------------------------------------------------- activations

def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0 <= slope < 1:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    need = _needs(x)
    out = x.data * slope
    np.maximum(out, x.data, out=out)
    _count("leaky_relu", out.size)

    def backward(g):
        gx = g * slope
        np.copyto(gx, g, where=x.data > 0)
        return (gx,)

    return _emit("leaky_relu", out, (x,), need, backward)


def relu(x: Tensor) -> Tensor:
    need = _needs(x)
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype, copy=False)
    _count("relu", out.size)
    return _emit("relu", out, (x,), need, lambda g: (np.where(pos, g, 0).astype(g.dtype),))


def sigmoid(x: Tensor) -> Tensor:
    need = _needs(x)
    out = _sigmoid(x.data)
    _count("sigmoid", out.size)
    return _emit("sigmoid", out, (x,), need, lambda g: (g * out * (1 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype, copy=False)


def activation(x: Tensor, kind: str, slope: float = 0.01) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ------------------------------------------------------------- convolution

def conv2d_output_shape(in_shape, weight_shape, stride=1, padding=0, groups=1) -> tuple:
    n, c, h, w = in_shape
    co, cg, kh, kw = weight_shape
    if c != cg * groups or co % groups:
        raise ShapeError(
            f"conv2d: input has {c} channels but weight {tuple(weight_shape)} "
            f"with groups={groups} expects {cg * groups}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output would be {ho}x{wo} for input {h}x{w}")
    return (n, co, ho, wo)


def conv2d_flops(in_shape, weight_shape, stride=1, padding=0, groups=1, bias=True) -> int:
    n, co, ho, wo = conv2d_output_shape(in_shape, weight_shape, stride, padding, groups)
    _, cg, kh, kw = weight_shape
    out = n * co * ho * wo
    return 2 * out * cg * kh * kw + (out if bias else 0)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation.

    Depthwise weights (one input and one output channel per group) run as
    shifted elementwise products; everything else as one batched matmul per
    kernel offset.
    """
    _check4d(x, "conv2d")
    n, c, h, w = x.shape
    co, cg, kh, kw = weight.shape
    _, _, ho, wo = conv2d_output_shape(x.shape, weight.shape, stride, padding, groups)
    need = _needs(x, weight, bias)
    s, p = stride, padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    hp, wp = xp.shape[2:]
    og = co // groups
    wd = weight.data
    depthwise = cg == 1 and og == 1

    def window(a, i, j):
        return a[..., i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]

    if depthwise:
        out = np.zeros((n, co, ho, wo), dtype=x.dtype)
        tmp = np.empty_like(out)
        for i in range(kh):
            for j in range(kw):
                np.multiply(window(xp, i, j), wd[:, 0, i, j][:, None, None], out=tmp)
                out += tmp
    else:
        xg = xp.reshape(n, groups, cg, hp, wp)
        wg = wd.reshape(groups, og, cg, kh, kw)
        acc = None
        for i in range(kh):
            for j in range(kw):
                patch = window(xg, i, j).reshape(n, groups, cg, ho * wo)
                term = np.matmul(wg[:, :, :, i, j], patch)
                if acc is None:
                    acc = term
                else:
                    acc += term
        out = acc.reshape(n, co, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None]
    _count("conv2d", conv2d_flops(x.shape, weight.shape, s, p, groups, bias is not None))

    def backward(g):
        gxp = np.zeros_like(xp) if need[0] else None
        gw = np.zeros_like(wd) if need[1] else None
        if depthwise:
            for i in range(kh):
                for j in range(kw):
                    if gw is not None:
                        gw[:, 0, i, j] = np.einsum("ncyx,ncyx->c", g, window(xp, i, j))
                    if gxp is not None:
                        window(gxp, i, j)[...] += g * wd[:, 0, i, j][:, None, None]
        else:
            gg = g.reshape(n, groups, og, ho * wo)
            xg = xp.reshape(n, groups, cg, hp, wp)
            wg = wd.reshape(groups, og, cg, kh, kw)
            gxg = gxp.reshape(n, groups, cg, hp, wp) if gxp is not None else None
            for i in range(kh):
                for j in range(kw):
                    if gw is not None:
                        patch = window(xg, i, j).reshape(n, groups, cg, ho * wo)
                        gij = np.matmul(gg, patch.swapaxes(-1, -2)).sum(axis=0)
                        gw[:, :, i, j] = gij.reshape(co, cg)
                    if gxg is not None:
                        gpatch = np.matmul(wg[:, :, :, i, j].swapaxes(-1, -2), gg)
                        window(gxg, i, j)[...] += gpatch.reshape(n, groups, cg, ho, wo)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        gb = _chan_sum(g) if need[2] else None
        return gx, gw, gb

    return _emit("conv2d", out, (x, weight, bias), need, backward)


def conv2d_transpose_flops(in_shape, weight_shape, bias=True) -> int:
    n, ci, h, w = in_shape
    _, co, kh, kw = weight_shape
    return 2 * n * ci * h * w * co * kh * kw + (n * co * h * kh * w * kw if bias else 0)


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: Optional[int] = None) -> Tensor:
    """Transposed convolution with non-overlapping taps (kernel == stride).

    ``weight`` has shape (c_in, c_out, k, k). Each input pixel paints a k x k
    block of the output, so the output is (n, c_out, k*h, k*w).
    """
    _check4d(x, "conv2d_transpose")
    n, ci, h, w = x.shape
    wci, co, kh, kw = weight.shape
    stride = kh if stride is None else stride
    if wci != ci:
        raise ShapeError(f"conv2d_transpose: input has {ci} channels, weight expects {wci}")
    if not (kh == kw == stride):
        raise ShapeError("conv2d_transpose: only kernel == stride (non-overlapping) is supported")
    need = _needs(x, weight, bias)
    k = kh
    xm = x.data.reshape(n, ci, h * w)
    wd = weight.data
    out = np.empty((n, co, h * k, w * k), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i::k, j::k] = np.matmul(wd[:, :, i, j].T, xm).reshape(n, co, h, w)
    if bias is not None:
        out += bias.data[:, None, None]
    _count("conv2d_transpose", conv2d_transpose_flops(x.shape, weight.shape, bias is not None))

    def backward(g):
        gx = np.zeros_like(xm) if need[0] else None
        gw = np.zeros_like(wd) if need[1] else None
        for i in range(k):
            for j in range(k):
                gij = g[:, :, i::k, j::k].reshape(n, co, h * w)
                if gx is not None:
                    gx += np.matmul(wd[:, :, i, j], gij)
                if gw is not None:
                    gw[:, :, i, j] = np.matmul(xm, gij.swapaxes(-1, -2)).sum(axis=0)
        gb = _chan_sum(g) if need[2] else None
        return (gx.reshape(x.shape) if gx is not None else None), gw, gb

    return _emit("conv2d_transpose", out, (x, weight, bias), need, backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (n, c_in), weight (c_out, c_in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    need = _needs(x, weight, bias)
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    _count("linear", 2 * x.shape[0] * weight.size + (out.size if bias is not None else 0))

    def backward(g):
        gx = g @ weight.data if need[0] else None
        gw = g.T @ x.data if need[1] else None
        gb = g.sum(axis=0) if need[2] else None
        return gx, gw, gb

    return _emit("linear", out, (x, weight, bias), need, backward)


# ------------------------------------------------------ pooling/resampling

def _pairwise_sum(views: list) -> np.ndarray:
    """Tree-sum equally shaped arrays (exact for constants when len is a power of two)."""
    if len(views) == 1:
        return views[0].copy()
    mid = len(views) // 2
    out = _pairwise_sum(views[:mid])
    out += _pairwise_sum(views[mid:])
    return out


def pool2d(x: Tensor, kind: str, size: int, where: str = "pool2d") -> Tensor:
    """Non-overlapping ``size`` x ``size`` average or max pooling.

    Spatial dims must be exact multiples of ``size``; ``where`` labels the
    call site in the error message.
    """
    _check4d(x, "pool2d")
    n, c, h, w = x.shape
    s = size
    if h % s or w % s:
        raise DivisibilityError(
            f"{where}: spatial size {h}x{w} must be a multiple of {s}")
    need = _needs(x)
    ho, wo = h // s, w // s
    _count("pool2d", n * c * ho * wo)
    if s == 1:
        return _emit("pool2d", x.data.copy(), (x,), need, lambda g: (g,))
    offsets = [(i, j) for i in range(s) for j in range(s)]
    if kind == "avg":
        out = _pairwise_sum([x.data[:, :, i::s, j::s] for i, j in offsets])
        inv = 1.0 / (s * s)
        out *= inv

        def backward(g):
            gx = np.empty(x.shape, dtype=g.dtype)
            gs = g * inv
            for i, j in offsets:
                gx[:, :, i::s, j::s] = gs
            return (gx,)

        return _emit("avg_pool2d", out, (x,), need, backward)
    if kind == "max":
        out = x.data[:, :, 0::s, 0::s].copy()
        for i, j in offsets[1:]:
            np.maximum(out, x.data[:, :, i::s, j::s], out=out)

        def backward(g):
            # route to the first offset attaining the max (ties go to the earliest)
            gx = np.empty(x.shape, dtype=g.dtype)
            free = np.ones(out.shape, dtype=bool)
            for i, j in offsets:
                hit = x.data[:, :, i::s, j::s] == out
                hit &= free
                free &= ~hit
                gx[:, :, i::s, j::s] = np.where(hit, g, 0)
            return (gx,)

        return _emit("max_pool2d", out, (x,), need, backward)
    raise ValueError(f"unknown pooling kind {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    _check4d(x, "global_avg_pool")
    need = _needs(x)
    out = x.data.mean(axis=(2, 3), keepdims=True)
    _count("global_avg_pool", out.size)
    hw = x.shape[2] * x.shape[3]
    shape = x.shape
    return _emit("global_avg_pool", out, (x,), need,
                 lambda g: (np.broadcast_to(g / hw, shape).astype(g.dtype),))


def _bilinear_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # align_corners=False: output pixel centres map back onto input centres
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - lam)
    np.add.at(m, (rows, i1), lam)
    return m.astype(dtype)


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1)


def upsample(x: Tensor, size: tuple, mode: str = "nearest") -> Tensor:
    """Resize the spatial dims of ``x`` to ``size`` = (h', w')."""
    _check4d(x, "upsample")
    n, c, h, w = x.shape
    th, tw = size
    if th < 1 or tw < 1:
        raise ShapeError(f"upsample: target size {size} must be positive")
    need = _needs(x)
    _count("upsample", n * c * th * tw)
    if (th, tw) == (h, w):
        return _emit("upsample", x.data.copy(), (x,), need, lambda g: (g,))
    if mode == "nearest":
        if th % h == 0 and tw % w == 0:
            fh, fw = th // h, tw // w
            out = np.broadcast_to(x.data[:, :, :, None, :, None],
                                  (n, c, h, fh, w, fw)).reshape(n, c, th, tw)

            def backward(g):
                gx = g[:, :, 0::fh, 0::fw].copy()
                for i in range(fh):
                    for j in range(fw):
                        if i or j:
                            gx += g[:, :, i::fh, j::fw]
                return (gx,)

            return _emit("upsample_nearest", out, (x,), need, backward)
        ri, ci = _nearest_index(h, th), _nearest_index(w, tw)
        out = x.data[:, :, ri][:, :, :, ci]

        def backward(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            np.add.at(gx, (slice(None), slice(None), ri[:, None], ci[None, :]), g)
            return (gx,)

        return _emit("upsample_nearest", out, (x,), need, backward)
    if mode == "bilinear":
        mh = _bilinear_matrix(h, th, x.dtype)
        mw = _bilinear_matrix(w, tw, x.dtype)
        out = np.matmul(np.matmul(mh, x.data), mw.T)

        def backward(g):
            return (np.matmul(np.matmul(mh.T, g), mw),)

        return _emit("upsample_bilinear", out, (x,), need, backward)
    raise ValueError(f"unknown upsample mode {mode!r}")


# ----------------------------------------------------------- normalization

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance). In inference
    mode the running statistics are used and the op is affine per channel.
    """
    _check4d(x, "batchnorm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,):
        raise ShapeError(f"batchnorm2d: {c} channels but gamma has shape {gamma.shape}")
    need = _needs(x, gamma, beta)
    _count("batchnorm2d", x.size)
    gd = gamma.data[:, None, None]
    if training:
        m = n * h * w
        if m < 2:
            raise DegenerateBatchError(
                f"batchnorm2d: training mode needs at least 2 values per channel, got {m}")
        mu = _chan_sum(x.data) / m
        xhat = x.data - mu[:, None, None]
        var = np.einsum("nchw,nchw->c", xhat, xhat) / m
        invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat *= invstd[:, None, None]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
        out = xhat * gd
        out += beta.data[:, None, None]

        def backward(g):
            gg = _chan_sum(g) if (need[0] or need[2]) else None
            gxh = np.einsum("nchw,nchw->c", g, xhat) if (need[0] or need[1]) else None
            gx = None
            if need[0]:
                k = (gamma.data * invstd / m)[:, None, None]
                gx = k * (m * g - gg[:, None, None] - xhat * gxh[:, None, None])
            return gx, gxh if need[1] else None, gg if need[2] else None

        return _emit("batchnorm2d", out, (x, gamma, beta), need, backward)

    invstd = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
    xhat = (x.data - running_mean[:, None, None].astype(x.dtype)) * invstd[:, None, None]
    out = xhat * gd + beta.data[:, None, None]

    def backward(g):
        gx = g * (gamma.data * invstd)[:, None, None] if need[0] else None
        ggam = np.einsum("nchw,nchw->c", g, xhat) if need[1] else None
        gb = _chan_sum(g) if need[2] else None
        return gx, ggam, gb

    return _emit("batchnorm2d", out, (x, gamma, beta), need, backward)


# ------------------------------------------------------------ concatenation

def concat_channels(xs: Sequence[Tensor], strategy: str = "prealloc") -> Tensor:
    """Concatenate (n, c_i, h, w) tensors along channels, in the given order.

    ``naive`` grows the result one input at a time (each step re-copies
    everything so far); ``prealloc`` sizes the output once and writes each
    input into its slice. Both give bit-identical results.
    """
    if not xs:
        raise ShapeError("concat_channels: nothing to concatenate")
    for t in xs:
        _check4d(t, "concat_channels")
    n, _, h, w = xs[0].shape
    for t in xs:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels: shape {t.shape} does not match (n, h, w) = {(n, h, w)}")
    need = _needs(*xs)
    widths = [t.shape[1] for t in xs]
    if strategy == "naive":
        out = xs[0].data.copy()
        for t in xs[1:]:
            out = np.concatenate([out, t.data], axis=1)
    elif strategy == "prealloc":
        out = np.empty((n, int(np.sum(widths)), h, w), dtype=xs[0].dtype)
        at = 0
        for t, cw in zip(xs, widths):
            out[:, at:at + cw] = t.data
            at += cw
    else:
        raise ValueError(f"unknown concat strategy {strategy!r}")
    offsets = np.cumsum([0] + widths)

    def backward(g):
        return [g[:, offsets[i]:offsets[i + 1]] for i in range(len(xs))]

    return _emit("concat_channels", out, tuple(xs), need, backward)
