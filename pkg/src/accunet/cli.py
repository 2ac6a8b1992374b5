"""``accunet`` command-line entry point.

Exit codes: 0 success, 1 contract error (bad input, config or files),
2 verification failure (gradcheck or bench-concat outside tolerance).
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from accunet import checkpoint, ops, verify
from accunet.config import ConfigError, format_kv, from_kv, parse_kv, to_kv
from accunet.data import DataConfig, SplitSpec, gen_synthetic, load_dataset, load_image, \
    read_ids, save_dataset, split
from accunet.model import VARIANTS, ModelConfig, build, summary
from accunet.pgm import write_pgm
from accunet.tensor import Tensor
from accunet.training import TrainConfig, evaluate, predict_probs, restore, train, \
    write_history

EXIT_OK, EXIT_CONTRACT, EXIT_VERIFY = 0, 1, 2


class VerificationFailure(Exception):
    pass


@dataclass(frozen=True)
class Resolved:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig

    def to_kv(self) -> dict:
        return {**to_kv(self.model, "model"), **to_kv(self.train, "train"),
                **to_kv(self.data, "data")}


def resolve(args) -> Resolved:
    values: dict = {}
    if args.config and args.config != "default":
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        values.update(parse_kv(path.read_text()))
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = value.strip()
    unknown = sorted(k for k in values if k.partition(".")[0] not in ("model", "train", "data"))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r} (use model.*, train.* or data.*)")
    if args.variant:
        values["model.variant"] = args.variant
    if args.seed is not None:
        values["train.seed"] = values["data.seed"] = str(args.seed)
    try:
        return Resolved(from_kv(ModelConfig, values, "model"), from_kv(TrainConfig, values, "train"),
                        from_kv(DataConfig, values, "data"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _g(x: float) -> str:
    return f"{x:.6g}"


def _need(value, flag: str):
    if value is None:
        raise ConfigError(f"this subcommand requires {flag}")
    return value


# ------------------------------------------------------------- subcommands

def cmd_summary(args, cfg: Resolved) -> int:
    probe = tuple(int(v) for v in args.probe.split(","))
    model = build(cfg.model, cfg.train.seed)
    report = summary(model, probe)
    text = report.to_text()
    print(text, end="")
    print(report.to_kv(), end="")
    if args.out:
        Path(args.out).write_text(text + report.to_kv())
    return EXIT_OK


def cmd_gradcheck(args, cfg: Resolved) -> int:
    seed = cfg.train.seed
    checks = [*verify.primitive_checks(seed), *verify.block_checks(seed)]
    if not args.skip_network:
        checks.append(verify.network_check(seed))
    checks.append(verify.loss_check(seed))
    failed = 0
    for r in checks:
        status = "ok" if r.ok else "FAIL"
        failed += not r.ok
        print(f"{r.name:<32} max_rel_err={_g(r.error):<12} tol={_g(r.tol):<8} {status}")
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    if failed:
        raise VerificationFailure(f"{failed} gradient check(s) exceeded tolerance")
    return EXIT_OK


def _dataset(args, cfg: Resolved):
    if args.data:
        return load_dataset(args.data)
    d = cfg.data
    return gen_synthetic(d.n, d.hw, d.seed, d.difficulty, d.channels)


def _splits(args, cfg: Resolved):
    d = cfg.data
    return split(_dataset(args, cfg), SplitSpec((d.train_frac, d.val_frac, d.test_frac), d.seed))


def cmd_gen_data(args, cfg: Resolved) -> int:
    out = Path(_need(args.out, "--out"))
    d = cfg.data
    ds = gen_synthetic(d.n, d.hw, d.seed, d.difficulty, d.channels)
    save_dataset(ds, out)
    fg = [float(s.mask.mean()) for s in ds]
    print(f"wrote {len(ds)} samples of {d.hw}x{d.hw} to {out}  "
          f"(foreground fraction {_g(min(fg))}..{_g(max(fg))})")
    return EXIT_OK


def cmd_train(args, cfg: Resolved) -> int:
    out = Path(_need(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    train_set, val_set, _ = _splits(args, cfg)
    model = build(cfg.model, cfg.train.seed)
    t0 = time.perf_counter()

    def report(row, _model):
        print(f"epoch {row.epoch:4d}  loss {_g(row.train_loss):<10}  val_dice "
              f"{_g(row.val_dice):<10}  lr {_g(row.lr):<10}  {_g(time.perf_counter() - t0)} s",
              flush=True)

    best, history = train(model, train_set, val_set, cfg.train, on_epoch=report)
    checkpoint.save(best, out / "checkpoint.ckpt")
    write_history(out / "history.csv", history)
    print(f"best epoch {best.epoch}  val_dice {_g(best.best_val_dice)}  "
          f"checkpoint {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def _load_model(args, cfg: Resolved):
    ckpt = checkpoint.load(_need(args.checkpoint, "--checkpoint"))
    model = build(ckpt.config if ckpt.config is not None else cfg.model)
    restore(model, ckpt)
    return model.eval()


def cmd_predict(args, cfg: Resolved) -> int:
    model = _load_model(args, cfg)
    data = Path(_need(args.data, "--data"))
    out = Path(_need(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    ids = read_ids(data)
    for sid in ids:
        probs = predict_probs(model, load_image(data, sid))
        write_pgm((probs[0, 0] > 0.5).astype(np.float64), out / f"{sid}.pgm")
    print(f"wrote {len(ids)} predicted masks to {out}")
    return EXIT_OK


def cmd_eval(args, cfg: Resolved) -> int:
    model = _load_model(args, cfg)
    if args.split == "all":
        samples = _dataset(args, cfg)
    else:
        samples = dict(zip(("train", "val", "test"), _splits(args, cfg)))[args.split]
    mean, scores = evaluate(model, samples)
    rows = [(s.id, d) for s, d in zip(samples, scores)]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "dice"])
            w.writerows((sid, _g(d)) for sid, d in rows)
    for sid, d in rows:
        print(f"{sid},{_g(d)}")
    print(f"mean_dice={_g(mean)}  n={len(rows)}  split={args.split}")
    return EXIT_OK


def concat_shapes(hw: int, channels=(32, 64, 128, 256)) -> list:
    """Concat calls of one forward pass at a probe size: HANC stacks and MLFC stacks."""
    calls = []
    for level, (c, k) in enumerate(zip(channels, (3, 3, 3, 2))):
        s = hw >> level
        calls.append([(1, 3 * c, s, s)] * (2 * k - 1))
        calls.append([(1, cj, s, s) for cj in channels])
    return calls


def cmd_bench_concat(args, cfg: Resolved) -> int:
    rng = np.random.default_rng(cfg.train.seed)
    calls = [[Tensor(rng.standard_normal(s, dtype=np.float32)) for s in shapes]
             for shapes in concat_shapes(args.hw)]
    times = {"naive": [], "prealloc": []}
    identical = True
    for _ in range(args.trials):
        for strategy in ("naive", "prealloc"):
            t0 = time.perf_counter()
            outs = [ops.concat_channels(xs, strategy) for xs in calls]
            times[strategy].append(time.perf_counter() - t0)
            if strategy == "naive":
                ref = outs
            else:
                identical &= all(np.array_equal(a.data, b.data) for a, b in zip(ref, outs))
    med = {k: statistics.median(v) for k, v in times.items()}
    ratio = med["prealloc"] / med["naive"]
    print(f"calls={len(calls)}  hw={args.hw}  trials={args.trials}")
    print(f"naive_median_s={_g(med['naive'])}  prealloc_median_s={_g(med['prealloc'])}")
    print(f"ratio_prealloc_over_naive={_g(ratio)}  bit_identical={identical}")
    if not identical:
        raise VerificationFailure("prealloc and naive concat outputs differ")
    if ratio > 1.1:
        raise VerificationFailure(f"prealloc slower than naive beyond noise (ratio {_g(ratio)})")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file, or 'default'")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a model.*, train.* or data.* key (repeatable)")
    common.add_argument("--seed", type=int, help="sets train.seed and data.seed")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--data", help="dataset directory")
    common.add_argument("--out", help="output path")
    common.add_argument("--checkpoint", help="checkpoint file")

    parser = argparse.ArgumentParser(prog="accunet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("summary", parents=[common], help="per-layer params and FLOPs")
    p.add_argument("--probe", default="1,3,224,224", help="input shape n,c,h,w")
    p.set_defaults(func=cmd_summary)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference oracle suite")
    p.add_argument("--skip-network", action="store_true", help="skip the whole-network check")
    p.set_defaults(func=cmd_gradcheck)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset") \
        .set_defaults(func=cmd_gen_data)
    sub.add_parser("train", parents=[common], help="train; writes checkpoint and history") \
        .set_defaults(func=cmd_train)
    sub.add_parser("predict", parents=[common], help="write predicted masks") \
        .set_defaults(func=cmd_predict)
    p = sub.add_parser("eval", parents=[common], help="dice on a split")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("bench-concat", parents=[common], help="naive vs prealloc concat timing")
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--hw", type=int, default=224)
    p.set_defaults(func=cmd_bench_concat)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        print("# resolved config")
        print("".join(f"# {line}\n" for line in format_kv(cfg.to_kv()).splitlines()), end="")
        return args.func(args, cfg)
    except VerificationFailure as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ValueError, KeyError, OSError, ArithmeticError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"ERROR: {msg}".replace("\n", " "), file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
