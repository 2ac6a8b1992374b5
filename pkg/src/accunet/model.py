"""ACC-UNet assembly, ablation variants, and the parameter/FLOP audit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from accunet import ops
from accunet.blocks import DoubleConv, HancBlock, MlfcBlock, ResidualSkip, UnitOptions
from accunet.nn import Conv2d, ConvTranspose2d, Module, Trace
from accunet.tensor import DivisibilityError, ShapeError, Tensor

VARIANTS = ("full", "no_mlfc", "no_hanc", "base_half_unet")

FLOPS_CONVENTION = ("2 FLOPs per multiply-accumulate; 1 FLOP per output element for bias, "
                    "batchnorm, activation, pooling, resampling and elementwise ops")

REPORTED_PARAMS = {"full": 16.77e6, "base_half_unet": 7.8e6}
REPORTED_FLOPS = 38e9


@dataclass
class ModelConfig:
    variant: str = "full"
    in_channels: int = 3
    out_channels: int = 1
    # vanilla UNet filters (64..1024) halved; the last entry is the bottleneck
    channels: tuple = (32, 64, 128, 256, 512)
    k_schedule: tuple = (3, 3, 3, 2, 1)
    inv_fctr: int = 3
    inv_fctr_overrides: dict = field(default_factory=lambda: {"dec3.hanc2": 34})
    hanc_blocks_per_level: int = 2
    mlfc_stacks: int = 3
    se_ratio: int = 8
    se_every_conv: bool = False
    leaky_slope: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    skip_order: str = "res_first"
    decoder_skip: str = "mlfc"
    no_hanc_filter_scale: float = 1.25
    concat: str = "prealloc"

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.k_schedule = tuple(self.k_schedule)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.channels) != 5 or len(self.k_schedule) != 5:
            raise ValueError("channels and k_schedule need one entry per level (4 + bottleneck)")
        if any(not 1 <= k <= 4 for k in self.k_schedule):
            raise ValueError(f"every k must lie in 1..4, got {self.k_schedule}")
        if self.hanc_blocks_per_level < 1 or self.mlfc_stacks < 0:
            raise ValueError("need at least one block per level and a non-negative MLFC count")
        if self.skip_order not in ("res_first", "mlfc_first"):
            raise ValueError(f"skip_order must be res_first or mlfc_first, got {self.skip_order!r}")
        if self.decoder_skip not in ("mlfc", "mlfc+encoder"):
            raise ValueError(f"decoder_skip must be mlfc or mlfc+encoder, got {self.decoder_skip!r}")
        if self.concat not in ("naive", "prealloc"):
            raise ValueError(f"concat must be naive or prealloc, got {self.concat!r}")

    @property
    def uses_hanc(self) -> bool:
        return self.variant in ("full", "no_mlfc")

    @property
    def uses_skip_blocks(self) -> bool:
        return self.variant != "base_half_unet"

    @property
    def n_mlfc(self) -> int:
        return self.mlfc_stacks if self.variant in ("full", "no_hanc") else 0

    def level_channels(self) -> tuple:
        if self.variant == "no_hanc":
            return tuple(int(round(c * self.no_hanc_filter_scale)) for c in self.channels)
        return self.channels

    def inv_for(self, block_name: str) -> int:
        return self.inv_fctr_overrides.get(block_name, self.inv_fctr)

    def required_multiple(self) -> int:
        """Smallest m such that every h, w multiple of m is a legal input."""
        m = 2 ** (len(self.channels) - 1)
        if self.uses_hanc:
            for level, k in enumerate(self.k_schedule):
                m = max(m, 2 ** level * 2 ** (k - 1))
        return m

    def unit_options(self) -> UnitOptions:
        return UnitOptions(
            slope=self.leaky_slope, bn_momentum=self.bn_momentum, bn_eps=self.bn_eps,
            se_ratio=self.se_ratio, se_every_conv=self.se_every_conv, concat=self.concat,
            activation="relu" if self.variant == "base_half_unet" else "leaky_relu")


class _Level(Module):
    """The blocks of one encoder/decoder level (``hanc{J}`` or ``conv1/conv2``)."""

    def __init__(self, rng, cfg: ModelConfig, name: str, c_in: int, c_out: int, level: int):
        opts = cfg.unit_options()
        self._blocks = []
        if cfg.uses_hanc:
            k = cfg.k_schedule[level - 1]
            for j in range(1, cfg.hanc_blocks_per_level + 1):
                block = HancBlock(rng, c_in if j == 1 else c_out, c_out, k,
                                  cfg.inv_for(f"{name}.hanc{j}"), opts)
                setattr(self, f"hanc{j}", block)
                self._blocks.append((f"hanc{j}", block))
        else:
            block = DoubleConv(rng, c_in, c_out, opts, se=cfg.variant != "base_half_unet")
            self.conv1, self.conv2 = block.conv1, block.conv2
            self._blocks.append(("", block))

    def forward(self, x):
        for _, block in self._blocks:
            x = block(x)
        return x

    def trace(self, shape, tr, name):
        for key, block in self._blocks:
            shape = block.trace(shape, tr, f"{name}.{key}" if key else name)
        return shape


class _DecoderLevel(_Level):
    def __init__(self, rng, cfg, name, c_below, c_skip_total, c_out, level):
        self.up = ConvTranspose2d(rng, c_below, c_out, 2, cfg.leaky_slope)
        super().__init__(rng, cfg, name, c_skip_total + c_out, c_out, level)


class AccUNet(Module):
    """ACC-UNet and its ablation variants, chosen by ``ModelConfig.variant``.

    Parameter names: ``enc{L}.*`` (L = 5 is the bottleneck), ``skip{L}.res.*``,
    ``mlfc{S}.lvl{L}.*``, ``dec{L}.*`` and ``head.*``.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ch = cfg.level_channels()
        opts = cfg.unit_options()
        c_in = cfg.in_channels
        for level in range(1, 6):
            setattr(self, f"enc{level}", _Level(rng, cfg, f"enc{level}", c_in, ch[level - 1], level))
            c_in = ch[level - 1]
        if cfg.uses_skip_blocks:
            for level in range(1, 5):
                setattr(self, f"skip{level}", ResidualSkip(rng, ch[level - 1], opts))
        for s in range(1, cfg.n_mlfc + 1):
            setattr(self, f"mlfc{s}", MlfcBlock(rng, ch[:4], opts))
        skip_mult = 2 if cfg.decoder_skip == "mlfc+encoder" and cfg.uses_skip_blocks else 1
        for level in range(4, 0, -1):
            setattr(self, f"dec{level}", _DecoderLevel(
                rng, cfg, f"dec{level}", ch[level], skip_mult * ch[level - 1], ch[level - 1], level))
        self.head = Conv2d(rng, ch[0], cfg.out_channels, 1, bias=True, slope=cfg.leaky_slope)

    # -- structure helpers
    def _enc(self, level):
        return getattr(self, f"enc{level}")

    def _dec(self, level):
        return getattr(self, f"dec{level}")

    def check_input(self, shape) -> None:
        if len(shape) != 4:
            raise ShapeError(f"expected input (n, c, h, w), got shape {tuple(shape)}")
        if shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected {self.cfg.in_channels} input channels, got {shape[1]}")
        m = self.cfg.required_multiple()
        for dim, size in (("height", shape[2]), ("width", shape[3])):
            if size % m:
                raise DivisibilityError(f"input {dim} {size} is not a multiple of {m}")

    def _skip_path(self, feats: list, forward: bool = True, tr=None):
        cfg = self.cfg

        def residual(items):
            if not cfg.uses_skip_blocks:
                return items
            if forward:
                return [getattr(self, f"skip{L}")(x) for L, x in enumerate(items, start=1)]
            return [getattr(self, f"skip{L}").trace(s, tr, f"skip{L}")
                    for L, s in enumerate(items, start=1)]

        def mlfc(items):
            for s in range(1, cfg.n_mlfc + 1):
                block = getattr(self, f"mlfc{s}")
                items = block(items) if forward else block.trace(items, tr, f"mlfc{s}")
            return items

        if cfg.skip_order == "res_first":
            return mlfc(residual(feats))
        return residual(mlfc(feats))

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x.shape)
        feats = []
        h = x
        for level in range(1, 5):
            h = self._enc(level)(h)
            feats.append(h)
            h = ops.pool2d(h, "max", 2, f"enc{level} downsample")
        h = self._enc(5)(h)
        skips = self._skip_path(feats)
        concat = self.cfg.concat
        for level in range(4, 0, -1):
            dec = self._dec(level)
            parts = [skips[level - 1], dec.up(h)]
            if self.cfg.decoder_skip == "mlfc+encoder" and self.cfg.uses_skip_blocks:
                parts.insert(1, feats[level - 1])
            h = dec(ops.concat_channels(parts, concat))
        return self.head(h)

    def trace(self, shape, tr: Trace = None, name: str = "") -> tuple:
        tr = tr if tr is not None else Trace()
        self.check_input(shape)
        feats = []
        s = tuple(shape)
        for level in range(1, 5):
            s = self._enc(level).trace(s, tr, f"enc{level}")
            feats.append(s)
            s = (s[0], s[1], s[2] // 2, s[3] // 2)
            tr.add(f"enc{level}.downsample", "maxpool", s, 0, math.prod(s))
        s = self._enc(5).trace(s, tr, "enc5")
        skips = self._skip_path(feats, forward=False, tr=tr)
        for level in range(4, 0, -1):
            dec = self._dec(level)
            up = dec.up.trace(s, tr, f"dec{level}.up")
            c = skips[level - 1][1] + up[1]
            if self.cfg.decoder_skip == "mlfc+encoder" and self.cfg.uses_skip_blocks:
                c += feats[level - 1][1]
            cat = (up[0], c, up[2], up[3])
            tr.add(f"dec{level}.concat", "concat", cat)
            s = dec.trace(cat, tr, f"dec{level}")
        return self.head.trace(s, tr, "head")


def build(cfg: ModelConfig = None, seed: int = 0) -> AccUNet:
    return AccUNet(cfg if cfg is not None else ModelConfig(), seed)


def forward(model: AccUNet, x: Tensor, mode: str = "inference") -> Tensor:
    if mode not in ("training", "inference"):
        raise ValueError(f"mode must be training or inference, got {mode!r}")
    model.train(mode == "training")
    return model(x)


def count_params(model: Module) -> int:
    """Learnable scalars: conv/linear weights and biases, BN gamma/beta."""
    return model.num_params()


def level_of(name: str) -> str:
    head = name.split(".", 2)
    top = head[0]
    if top.startswith("mlfc") and len(head) > 1 and head[1].startswith("lvl"):
        return "level" + head[1][3:]
    for prefix in ("enc", "skip", "dec"):
        if top.startswith(prefix) and top[len(prefix):].isdigit():
            n = top[len(prefix):]
            return "bottleneck" if n == "5" else "level" + n
    return top


def block_of(name: str) -> str:
    parts = name.split(".")
    if parts[0].startswith(("enc", "dec", "mlfc")) and len(parts) > 1:
        return ".".join(parts[:2])
    return parts[0]


@dataclass
class FlopReport:
    total: int
    macs: int
    by_level: dict
    convention: str = FLOPS_CONVENTION


def count_flops(model: AccUNet, shape=(1, 3, 224, 224)) -> FlopReport:
    tr = Trace()
    model.trace(tuple(shape), tr)
    by_level: dict = {}
    for r in tr.rows:
        key = level_of(r.name)
        by_level[key] = by_level.get(key, 0) + r.flops
    return FlopReport(tr.total_flops, sum(r.macs for r in tr.rows), by_level)


@dataclass
class Summary:
    variant: str
    probe: tuple
    rows: list
    total_params: int
    total_flops: int
    total_macs: int

    def blocks(self) -> dict:
        out: dict = {}
        for r in self.rows:
            p, f = out.get(block_of(r.name), (0, 0))
            out[block_of(r.name)] = (p + r.params, f + r.flops)
        return out

    def levels(self) -> dict:
        out: dict = {}
        for r in self.rows:
            p, f = out.get(level_of(r.name), (0, 0))
            out[level_of(r.name)] = (p + r.params, f + r.flops)
        return out

    def to_text(self) -> str:
        lines = [f"# ACC-UNet summary  variant={self.variant}  probe={self.probe}",
                 f"# FLOPs convention: {FLOPS_CONVENTION}", ""]
        w = max(len(r.name) for r in self.rows)
        lines.append(f"{'layer':<{w}}  {'kind':<10} {'output':<22} {'params':>10} {'FLOPs':>14}")
        for r in self.rows:
            shape = "x".join(str(d) for d in r.out_shape)
            lines.append(f"{r.name:<{w}}  {r.kind:<10} {shape:<22} {r.params:>10} {r.flops:>14}")
        lines += ["", f"{'block':<16} {'params':>10} {'FLOPs':>14}"]
        for name, (p, f) in self.blocks().items():
            lines.append(f"{name:<16} {p:>10} {f:>14}")
        lines += ["", f"{'level':<16} {'params':>10} {'FLOPs':>14}"]
        for name, (p, f) in self.levels().items():
            lines.append(f"{name:<16} {p:>10} {f:>14}")
        lines += ["",
                  f"total params  {self.total_params}  ({self.total_params / 1e6:.6g} M)",
                  f"total FLOPs   {self.total_flops}  ({self.total_flops / 1e9:.6g} G)",
                  f"total MACs    {self.total_macs}  ({self.total_macs / 1e9:.6g} G)"]
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        items = {
            "variant": self.variant,
            "probe": ",".join(map(str, self.probe)),
            "flops_convention": FLOPS_CONVENTION,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "total_macs": self.total_macs,
        }
        if self.variant in REPORTED_PARAMS:
            ref = REPORTED_PARAMS[self.variant]
            items["reported_params"] = f"{ref:.6g}"
            items["params_rel_diff"] = f"{(self.total_params - ref) / ref:.6g}"
        if self.variant == "full":
            items["reported_flops"] = f"{REPORTED_FLOPS:.6g}"
            items["flops_rel_diff"] = f"{(self.total_flops - REPORTED_FLOPS) / REPORTED_FLOPS:.6g}"
            items["macs_rel_diff"] = f"{(self.total_macs - REPORTED_FLOPS) / REPORTED_FLOPS:.6g}"
        for name, (p, f) in self.levels().items():
            items[f"level.{name}.params"] = p
            items[f"level.{name}.flops"] = f
        for name, (p, f) in self.blocks().items():
            items[f"block.{name}.params"] = p
        return "".join(f"{k}={v}\n" for k, v in items.items())


def summary(model: AccUNet, probe=(1, 3, 224, 224)) -> Summary:
    tr = Trace()
    model.trace(tuple(probe), tr)
    total_params = count_params(model)
    if tr.total_params != total_params:
        raise AssertionError(
            f"trace saw {tr.total_params} parameters but the model holds {total_params}")
    return Summary(model.cfg.variant, tuple(probe), tr.rows, total_params,
                   tr.total_flops, sum(r.macs for r in tr.rows))
