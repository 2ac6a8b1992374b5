"""Finite-difference oracle suite over kernels, blocks, the network and the loss.

Each check builds a float64 scalar program (a random linear functional of
the op output, so every output element carries weight) and compares tape
gradients with central differences. Used by ``accunet gradcheck`` and the
test suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from accunet import ops
from accunet.blocks import (ConvUnit, HancBlock, MlfcBlock, ResidualSkip, SqueezeExcite,
                            UnitOptions, hanc_aggregate, mlfc_block, se_recalibrate)
from accunet.gradcheck import grad_check
from accunet.model import ModelConfig, build
from accunet.nn import Module
from accunet.tensor import Tensor
from accunet.training import combined_loss

TOL_PRIMITIVE = 1e-3
TOL_BLOCK = 1e-3
TOL_NETWORK = 1e-2
TOL_LOSS = 1e-4

# deep programs contain leaky-ReLU kinks and max selections; see grad_check
EPS_LADDER = (1e-4, 1e-6)


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _weights(rng, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _scalarize(fn: Callable[[Tensor], Tensor], seed: int) -> Callable[[Tensor], Tensor]:
    """Turn an op into a scalar program via a fixed random weighting of its output."""
    cache = {}

    def f(x):
        out = fn(x)
        if "w" not in cache:
            cache["w"] = np.random.default_rng(seed + 1).standard_normal(out.shape)
        return ops.sum(ops.mul(out, Tensor(cache["w"])))

    return f


def check_op(name, fn, x, wrt=(), tol=TOL_PRIMITIVE, seed=0, max_checks=None,
             eps=1e-4) -> CheckResult:
    t0 = time.perf_counter()
    err = grad_check(_scalarize(fn, seed), x, eps, wrt=list(wrt), max_checks=max_checks,
                     seed=seed)
    return CheckResult(name, err, tol, time.perf_counter() - t0)


def check_module(name, module: Module, fn, x, tol=TOL_BLOCK, seed=0,
                 max_checks=24, training=True) -> CheckResult:
    module.astype(np.float64).train(training)
    return check_op(name, fn, x, module.parameters(), tol, seed, max_checks, EPS_LADDER)


def primitive_checks(seed: int = 0) -> Iterator[CheckResult]:
    rng = np.random.default_rng(seed)

    def r(*shape):
        return rng.standard_normal(shape)

    w3 = _weights(rng, (5, 4, 3, 3))
    b3 = _weights(rng, (5,))
    yield check_op("conv2d 3x3", lambda x: ops.conv2d(x, w3, b3, 1, 1), r(1, 4, 8, 8), [w3, b3])
    ws = _weights(rng, (3, 4, 3, 3))
    yield check_op("conv2d 3x3 stride 2", lambda x: ops.conv2d(x, ws, None, 2, 1),
                   r(2, 4, 7, 7), [ws])
    wp = _weights(rng, (6, 4, 1, 1))
    yield check_op("conv2d pointwise", lambda x: ops.conv2d(x, wp), r(2, 4, 5, 5), [wp])
    wd = _weights(rng, (4, 1, 3, 3))
    bd = _weights(rng, (4,))
    yield check_op("conv2d depthwise", lambda x: ops.conv2d(x, wd, bd, 1, 1, groups=4),
                   r(2, 4, 6, 6), [wd, bd])
    wg = _weights(rng, (4, 2, 3, 3))
    yield check_op("conv2d grouped", lambda x: ops.conv2d(x, wg, None, 1, 1, groups=2),
                   r(1, 4, 5, 5), [wg])
    wt = _weights(rng, (4, 3, 2, 2))
    bt = _weights(rng, (3,))
    yield check_op("conv2d_transpose", lambda x: ops.conv2d_transpose(x, wt, bt),
                   r(2, 4, 3, 3), [wt, bt])
    yield check_op("avg_pool2d", lambda x: ops.pool2d(x, "avg", 2), r(2, 3, 4, 6))
    yield check_op("max_pool2d", lambda x: ops.pool2d(x, "max", 2), r(2, 3, 4, 6))
    yield check_op("max_pool2d s=4", lambda x: ops.pool2d(x, "max", 4), r(1, 2, 8, 8))
    yield check_op("upsample nearest", lambda x: ops.upsample(x, (6, 9)), r(1, 2, 2, 3))
    yield check_op("upsample nearest non-integer", lambda x: ops.upsample(x, (5, 7)),
                   r(1, 2, 3, 3))
    yield check_op("upsample bilinear", lambda x: ops.upsample(x, (8, 12), "bilinear"),
                   r(1, 2, 2, 3))
    g = _weights(rng, (3,))
    b = _weights(rng, (3,))
    yield check_op("batchnorm2d training",
                   lambda x: ops.batchnorm2d(x, g, b, np.zeros(3), np.ones(3), True),
                   r(2, 3, 4, 4), [g, b])
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    yield check_op("batchnorm2d inference",
                   lambda x: ops.batchnorm2d(x, g, b, rm, rv, False), r(2, 3, 4, 4), [g, b])
    # keep samples away from the kink so central differences do not straddle it
    kinked = r(2, 3, 4, 4)
    kinked += np.sign(kinked) * 0.05
    yield check_op("leaky_relu", lambda x: ops.leaky_relu(x, 0.01), kinked)
    yield check_op("relu", ops.relu, kinked)
    yield check_op("sigmoid", ops.sigmoid, r(2, 3, 4, 4))
    other = Tensor(r(1, 3, 4, 4), requires_grad=True)
    yield check_op("concat_channels",
                   lambda x: ops.concat_channels([x, other, x], "prealloc"), r(1, 2, 4, 4),
                   [other])
    yield check_op("concat_channels naive",
                   lambda x: ops.concat_channels([other, x], "naive"), r(1, 2, 4, 4), [other])
    yield check_op("global_avg_pool", ops.global_avg_pool, r(2, 3, 4, 5))
    wl = _weights(rng, (4, 3))
    bl = _weights(rng, (4,))
    yield check_op("linear", lambda x: ops.linear(x, wl, bl), r(5, 3), [wl, bl])
    gate = Tensor(r(2, 3, 1, 1), requires_grad=True)
    yield check_op("mul broadcast", lambda x: ops.mul(x, gate), r(2, 3, 4, 4), [gate])


def block_checks(seed: int = 0) -> Iterator[CheckResult]:
    rng = np.random.default_rng(seed)
    opts = UnitOptions()

    def r(*shape):
        return rng.standard_normal(shape)

    unit = ConvUnit(rng, 3, 4, opts, kernel=3, padding=1, se=True)
    yield check_module("conv_unit", unit, unit, r(2, 3, 6, 6))
    se = SqueezeExcite(rng, 8, 4)
    yield check_module("se_recalibrate", se, lambda x: se_recalibrate(x, se), r(2, 8, 3, 3))
    for k in (1, 2, 3):
        yield check_op(f"hanc_aggregate k={k}", lambda x, k=k: hanc_aggregate(x, k),
                       r(1, 2, 8, 8))
    for k in (1, 2, 3):
        block = HancBlock(rng, 3, 4, k, 3, opts)
        yield check_module(f"hanc_block k={k}", block, block, r(2, 3, 8, 8))
    skip = ResidualSkip(rng, 3, opts)
    yield check_module("residual_skip_block", skip, skip, r(2, 3, 6, 6))
    mlfc = MlfcBlock(rng, (2, 3, 4, 5), opts)
    feats = [r(2, c, 16 >> i, 16 >> i) for i, c in enumerate((2, 3, 4, 5))]
    rest = [Tensor(f, requires_grad=True) for f in feats[1:]]
    mlfc.astype(np.float64).train(True)

    def run(x):
        outs = mlfc_block([x, *rest], mlfc)
        return ops.concat_channels([ops.reshape(o, (2, -1, 1, 1)) for o in outs])

    yield check_op("mlfc_block", run, feats[0], [*rest, *mlfc.parameters()], TOL_BLOCK, seed, 24,
                   EPS_LADDER)


def network_check(seed: int = 0, max_checks: int = 6) -> CheckResult:
    """Whole network plus loss on (1, 3, 16, 16); BN in inference mode.

    With a single image the 1x1 bottleneck gives each BN channel one value,
    which training-mode statistics cannot normalise.
    """
    cfg = ModelConfig(channels=(2, 4, 4, 6, 6), inv_fctr_overrides={"dec3.hanc2": 5})
    model = build(cfg, seed).astype(np.float64).eval()
    rng = np.random.default_rng(seed)
    # non-trivial running statistics so inference BN is not the identity
    for _, buf in model.named_buffers():
        buf[...] = rng.uniform(0.5, 1.5, buf.shape)
    target = (rng.random((1, 1, 16, 16)) > 0.5).astype(np.float64)
    t0 = time.perf_counter()
    err = grad_check(lambda x: combined_loss(model(x), target), rng.standard_normal((1, 3, 16, 16)),
                     EPS_LADDER, wrt=model.parameters(), max_checks=max_checks, seed=seed)
    return CheckResult("acc_unet + loss (1,3,16,16)", err, TOL_NETWORK, time.perf_counter() - t0)


def loss_check(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    target = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    t0 = time.perf_counter()
    err = grad_check(lambda z: combined_loss(z, target), 2 * rng.standard_normal((2, 1, 4, 4)))
    return CheckResult("combined_loss", err, TOL_LOSS, time.perf_counter() - t0)


def run_all(seed: int = 0) -> list:
    return [*primitive_checks(seed), *block_checks(seed), network_check(seed), loss_check(seed)]
