"""Parameterised layers on top of :mod:`accunet.ops`.

Modules register parameters and sub-modules as plain attributes; attribute
order fixes the dotted parameter names (``enc1.hanc1.expand.conv.weight``)
and the order in which weights are drawn from the init RNG.

Besides ``forward`` every module implements ``trace(shape, tr, name)``,
which propagates a shape without computing anything and records per-layer
parameter and FLOP counts. ``tests/test_model.py`` checks that the traced
FLOPs equal what the kernels actually count during a forward pass.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from accunet import ops
from accunet.tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(np.ascontiguousarray(data), requires_grad=True, name=name)


@dataclass
class LayerRow:
    name: str
    kind: str
    out_shape: tuple
    params: int
    flops: int
    macs: int = 0


@dataclass
class Trace:
    rows: list = field(default_factory=list)

    def add(self, name, kind, out_shape, params=0, flops=0, macs=0) -> None:
        self.rows.append(LayerRow(name, kind, tuple(out_shape), int(params), int(flops), int(macs)))

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.01) -> np.ndarray:
    gain = math.sqrt(2.0 / (1 + slope ** 2))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Module:
    training = True
    _buffer_names: tuple = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def trace(self, shape, tr: Trace, name: str):  # pragma: no cover - abstract
        raise NotImplementedError

    def children(self) -> Iterator[tuple]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for key in self._buffer_names:
            yield prefix + key, getattr(self, key)
        for key, child in self.children():
            yield from child.named_buffers(prefix + key + ".")

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (used by the float64 oracle)."""
        for _, p in self.named_parameters():
            p.data = np.ascontiguousarray(p.data, dtype=dtype)
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        for key in self._buffer_names:
            setattr(self, key, getattr(self, key).astype(dtype))
        for _, child in self.children():
            child._cast_buffers(dtype)

    def param_store(self) -> "ParamStore":
        return ParamStore(dict(self.named_parameters()), dict(self.named_buffers()))


class ParamStore(Mapping):
    """Ordered name -> Parameter view of a module, plus its buffers."""

    def __init__(self, params: dict, buffers: dict):
        self._params = params
        self.buffers = buffers

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def count(self) -> int:
        return sum(p.size for p in self._params.values())


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int = 1, stride: int = 1,
                 padding: int = 0, groups: int = 1, bias: bool = True, slope: float = 0.01):
        if c_in % groups or c_out % groups:
            raise ValueError(f"groups={groups} must divide c_in={c_in} and c_out={c_out}")
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in // groups, kernel, kernel),
                                                fan_in, slope))
        if bias:
            self.bias = Parameter(np.zeros(c_out, dtype=np.float32))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def trace(self, shape, tr, name):
        out = ops.conv2d_output_shape(shape, self.weight.shape, self.stride, self.padding,
                                      self.groups)
        flops = ops.conv2d_flops(shape, self.weight.shape, self.stride, self.padding,
                                 self.groups, self.bias is not None)
        kind = "dwconv" if self.groups > 1 else f"conv{self.weight.shape[2]}x{self.weight.shape[3]}"
        macs = ops.conv2d_flops(shape, self.weight.shape, self.stride, self.padding,
                                self.groups, False) // 2
        tr.add(name, kind, out, self.num_params(), flops, macs)
        return out


class ConvTranspose2d(Module):
    """2x2 stride-2 upsampling convolution (weight layout (c_in, c_out, k, k))."""

    def __init__(self, rng, c_in: int, c_out: int, kernel: int = 2, slope: float = 0.01):
        self.weight = Parameter(kaiming_uniform(rng, (c_in, c_out, kernel, kernel), c_in, slope))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32))

    def forward(self, x):
        return ops.conv2d_transpose(x, self.weight, self.bias)

    def trace(self, shape, tr, name):
        n, _, h, w = shape
        k = self.weight.shape[2]
        out = (n, self.weight.shape[1], h * k, w * k)
        tr.add(name, "tconv", out, self.num_params(),
               ops.conv2d_transpose_flops(shape, self.weight.shape, True),
               ops.conv2d_transpose_flops(shape, self.weight.shape, False) // 2)
        return out


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(c, dtype=np.float32))
        self.beta = Parameter(np.zeros(c, dtype=np.float32))
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                               self.training, self.momentum, self.eps)

    def trace(self, shape, tr, name):
        tr.add(name, "bn", shape, self.num_params(), math.prod(shape))
        return shape


class Linear(Module):
    def __init__(self, rng, c_in: int, c_out: int, slope: float = 0.01):
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in), c_in, slope))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32))

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)

    def trace(self, shape, tr, name):
        out = (shape[0], self.weight.shape[0])
        tr.add(name, "linear", out, self.num_params(),
               2 * shape[0] * self.weight.size + math.prod(out), shape[0] * self.weight.size)
        return out
