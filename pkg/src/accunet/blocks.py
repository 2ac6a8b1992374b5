"""HANC, MLFC, squeeze-excitation and residual skip blocks.

Every convolution sits in a :class:`ConvUnit` (conv -> BN -> activation).
Squeeze-excitation recalibrates each block's final output once; setting
``UnitOptions.se_every_conv`` puts an SE gate after every unit instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from accunet import ops
from accunet.nn import BatchNorm2d, Conv2d, Linear, Module, Trace
from accunet.tensor import DivisibilityError, ShapeError, Tensor


@dataclass(frozen=True)
class UnitOptions:
    slope: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    se_ratio: int = 8
    se_every_conv: bool = False
    concat: str = "prealloc"
    activation: str = "leaky_relu"


def _act(x: Tensor, opts: UnitOptions) -> Tensor:
    return ops.activation(x, opts.activation, opts.slope)


def _trace_elementwise(tr: Trace, name: str, kind: str, shape) -> None:
    tr.add(name, kind, shape, 0, math.prod(shape))


class SqueezeExcite(Module):
    """Channel gate ``x * sigmoid(fc2(relu(fc1(mean_hw(x)))))``."""

    def __init__(self, rng, c: int, ratio: int = 8, slope: float = 0.01):
        hidden = max(c // ratio, 1)
        self.fc1 = Linear(rng, c, hidden, slope)
        self.fc2 = Linear(rng, hidden, c, slope)

    def gate(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        s = ops.reshape(ops.global_avg_pool(x), (n, c))
        s = ops.sigmoid(self.fc2(ops.relu(self.fc1(s))))
        return ops.reshape(s, (n, c, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        return ops.mul(x, self.gate(x))

    def trace(self, shape, tr, name):
        n, c = shape[:2]
        tr.add(name + ".squeeze", "gap", (n, c, 1, 1), 0, n * c)
        h = self.fc1.trace((n, c), tr, name + ".fc1")
        _trace_elementwise(tr, name + ".relu", "relu", h)
        h = self.fc2.trace(h, tr, name + ".fc2")
        _trace_elementwise(tr, name + ".sigmoid", "sigmoid", h)
        _trace_elementwise(tr, name + ".scale", "mul", shape)
        return shape


def se_recalibrate(x: Tensor, se: SqueezeExcite) -> Tensor:
    if x.shape[1] != se.fc1.weight.shape[1]:
        raise ShapeError(f"SE expects {se.fc1.weight.shape[1]} channels, got {x.shape[1]}")
    return se(x)


class ConvUnit(Module):
    """conv -> batchnorm -> (+ residual) -> activation -> optional SE.

    Convolutions feeding a batchnorm carry no bias: in training mode the
    batch mean would cancel it exactly.
    """

    def __init__(self, rng, c_in: int, c_out: int, opts: UnitOptions, kernel: int = 1,
                 padding: int = 0, groups: int = 1, se: bool = False, act: bool = True):
        self.opts = opts
        self.act = act
        self.conv = Conv2d(rng, c_in, c_out, kernel, 1, padding, groups, bias=False,
                           slope=opts.slope)
        self.bn = BatchNorm2d(c_out, opts.bn_momentum, opts.bn_eps)
        self.se = SqueezeExcite(rng, c_out, opts.se_ratio, opts.slope) \
            if (se or opts.se_every_conv) else None

    def forward(self, x: Tensor, residual: Optional[Tensor] = None) -> Tensor:
        y = self.bn(self.conv(x))
        if residual is not None:
            y = ops.add(y, residual)
        if self.act:
            y = _act(y, self.opts)
        if self.se is not None:
            y = self.se(y)
        return y

    def trace(self, shape, tr, name, residual: bool = False):
        shape = self.conv.trace(shape, tr, name + ".conv")
        shape = self.bn.trace(shape, tr, name + ".bn")
        if residual:
            _trace_elementwise(tr, name + ".shortcut", "add", shape)
        if self.act:
            _trace_elementwise(tr, name + ".act", self.opts.activation, shape)
        if self.se is not None:
            shape = self.se.trace(shape, tr, name + ".se")
        return shape


def hanc_aggregate(x1: Tensor, k: int, strategy: str = "prealloc") -> Tensor:
    """Append patch means and maxima at scales 2, 4, ..., 2**(k-1).

    Channel layout: ``[x1, mean_2, ..., mean_{2^(k-1)}, max_2, ..., max_{2^(k-1)}]``,
    each pooled map nearest-upsampled back to x1's resolution, so the output
    has ``x1.c * (2k - 1)`` channels. ``k == 1`` returns ``x1`` itself.
    """
    if not 1 <= k <= 4:
        raise ValueError(f"k must be in 1..4, got {k}")
    if k == 1:
        return x1
    h, w = x1.shape[2:]
    req = 2 ** (k - 1)
    if h % req or w % req:
        raise DivisibilityError(
            f"hanc_aggregate(k={k}): spatial size {h}x{w} must be a multiple of {req}")
    # each scale pools the previous one by 2, so 4x4 statistics come from 2x2 ones
    means, maxes = [], []
    avg = mx = x1
    for _ in range(1, k):
        avg = ops.pool2d(avg, "avg", 2, "hanc_aggregate")
        mx = ops.pool2d(mx, "max", 2, "hanc_aggregate")
        means.append(ops.upsample(avg, (h, w)))
        maxes.append(ops.upsample(mx, (h, w)))
    return ops.concat_channels([x1, *means, *maxes], strategy)


def trace_aggregate(shape, k: int, tr: Trace, name: str):
    if k == 1:
        return shape
    n, c, h, w = shape
    for s in range(1, k):
        f = 2 ** s
        for kind in ("avg", "max"):
            tr.add(f"{name}.{kind}{f}", f"{kind}pool", (n, c, h // f, w // f), 0,
                   n * c * (h // f) * (w // f))
            tr.add(f"{name}.{kind}{f}.up", "upsample", shape, 0, n * c * h * w)
    out = (n, c * (2 * k - 1), h, w)
    tr.add(name + ".concat", "concat", out)
    return out


class HancBlock(Module):
    """Hierarchical aggregation of neighbourhood context.

    expand (1x1, c_in -> c_in*inv_fctr) -> depthwise 3x3 -> mean/max context
    at k scales -> reduce (1x1 back to c_in) + shortcut -> 1x1 to c_out -> SE.
    """

    def __init__(self, rng, c_in: int, c_out: int, k: int, inv_fctr: int, opts: UnitOptions):
        if not 1 <= k <= 4:
            raise ValueError(f"k must be in 1..4, got {k}")
        self.c_in, self.c_out, self.k, self.inv_fctr = c_in, c_out, k, inv_fctr
        self.opts = opts
        c_inv = c_in * inv_fctr
        self.c_inv = c_inv
        self.expand = ConvUnit(rng, c_in, c_inv, opts)
        self.dconv = ConvUnit(rng, c_inv, c_inv, opts, kernel=3, padding=1, groups=c_inv)
        self.reduce = ConvUnit(rng, c_inv * (2 * k - 1), c_in, opts)
        self.out = ConvUnit(rng, c_in, c_out, opts, se=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise ShapeError(f"HANC block expects {self.c_in} channels, got {x.shape[1]}")
        x1 = self.dconv(self.expand(x))
        x2 = hanc_aggregate(x1, self.k, self.opts.concat)
        x3 = self.reduce(x2, residual=x)
        return self.out(x3)

    def widths(self) -> tuple:
        """Channel widths of x1, x2, x3, x_out."""
        return (self.c_inv, self.c_inv * (2 * self.k - 1), self.c_in, self.c_out)

    def trace(self, shape, tr, name):
        s = self.expand.trace(shape, tr, name + ".expand")
        s = self.dconv.trace(s, tr, name + ".dconv")
        s = trace_aggregate(s, self.k, tr, name + ".aggregate")
        s = self.reduce.trace(s, tr, name + ".reduce", residual=True)
        return self.out.trace(s, tr, name + ".out")


class ResidualSkip(Module):
    """``SE(act(BN(conv3x3(x)) + x))``: channel-preserving skip refinement."""

    def __init__(self, rng, c: int, opts: UnitOptions):
        self.res = ConvUnit(rng, c, c, opts, kernel=3, padding=1, se=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.res(x, residual=x)

    def trace(self, shape, tr, name):
        return self.res.trace(shape, tr, name + ".res", residual=True)


def resize_to(x: Tensor, size: tuple) -> Tensor:
    """Average-pool down or bilinearly upsample by an integer factor."""
    h, w = x.shape[2:]
    th, tw = size
    if (h, w) == (th, tw):
        return x
    if h > th:
        if h % th or w % tw or h // th != w // tw:
            raise ShapeError(f"cannot pool {h}x{w} down to {th}x{tw} by an integer factor")
        return ops.pool2d(x, "avg", h // th, "mlfc resize")
    return ops.upsample(x, (th, tw), "bilinear")


def _trace_resize(shape, size, tr, name):
    n, c, h, w = shape
    if (h, w) == tuple(size):
        return shape
    out = (n, c, *size)
    kind = "avgpool" if h > size[0] else "upsample"
    tr.add(name, kind, out, 0, math.prod(out))
    return out


class MlfcLevel(Module):
    def __init__(self, rng, c_tot: int, c: int, opts: UnitOptions):
        self.summarize = ConvUnit(rng, c_tot, c, opts)
        self.merge = ConvUnit(rng, 2 * c, c, opts, se=True)


class MlfcBlock(Module):
    """Multi-level feature compilation over the four encoder levels.

    For level i every level map is resized to level i's resolution and the
    stack (c_tot channels, level order 1..4) is summarised by a 1x1 unit to
    c_i channels, then merged with x_i through another 1x1 unit on
    ``[summary, x_i]``.
    """

    def __init__(self, rng, channels: Sequence[int], opts: UnitOptions):
        self.channels = tuple(channels)
        self.c_tot = sum(self.channels)
        self.opts = opts
        for i, c in enumerate(self.channels, start=1):
            setattr(self, f"lvl{i}", MlfcLevel(rng, self.c_tot, c, opts))
        self._levels = [getattr(self, f"lvl{i}") for i in range(1, len(self.channels) + 1)]

    def forward(self, xs: Sequence[Tensor]) -> list:
        if len(xs) != len(self.channels):
            raise ShapeError(f"MLFC expects {len(self.channels)} levels, got {len(xs)}")
        for x, c in zip(xs, self.channels):
            if x.shape[1] != c:
                raise ShapeError(f"MLFC channel schedule {self.channels} does not match "
                                 f"{[t.shape[1] for t in xs]}")
        outs = []
        for xi, level in zip(xs, self._levels):
            size = xi.shape[2:]
            stacked = ops.concat_channels([resize_to(xj, size) for xj in xs], self.opts.concat)
            comb = level.summarize(stacked)
            outs.append(level.merge(ops.concat_channels([comb, xi], self.opts.concat)))
        return outs

    def trace(self, shapes, tr, name):
        outs = []
        for i, (si, level) in enumerate(zip(shapes, self._levels), start=1):
            lname = f"{name}.lvl{i}"
            for j, sj in enumerate(shapes, start=1):
                _trace_resize(sj, si[2:], tr, f"{lname}.resize{j}")
            stacked = (si[0], self.c_tot, *si[2:])
            tr.add(lname + ".concat", "concat", stacked)
            s = level.summarize.trace(stacked, tr, lname + ".summarize")
            tr.add(lname + ".concat_merge", "concat", (si[0], 2 * si[1], *si[2:]))
            outs.append(level.merge.trace((s[0], 2 * s[1], *s[2:]), tr, lname + ".merge"))
        return outs


def mlfc_block(xs: Sequence[Tensor], block: MlfcBlock) -> list:
    return block(xs)


class DoubleConv(Module):
    """Two 3x3 conv units, the plain UNet level block (used by ablations)."""

    def __init__(self, rng, c_in: int, c_out: int, opts: UnitOptions, se: bool = True):
        self.conv1 = ConvUnit(rng, c_in, c_out, opts, kernel=3, padding=1)
        self.conv2 = ConvUnit(rng, c_out, c_out, opts, kernel=3, padding=1, se=se)

    def forward(self, x):
        return self.conv2(self.conv1(x))

    def trace(self, shape, tr, name):
        s = self.conv1.trace(shape, tr, name + ".conv1")
        return self.conv2.trace(s, tr, name + ".conv2")
