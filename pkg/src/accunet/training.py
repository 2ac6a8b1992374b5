"""Loss, optimizer, schedule, augmentation and the train/evaluate loops."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from accunet import ops
from accunet.nn import Module
from accunet.tensor import NumericError, ShapeError, Tape, Tensor


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 12
    max_epochs: int = 200
    patience: int = 100
    lr0: float = 1e-3
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    w_ce: float = 0.5
    w_dice: float = 0.5
    dice_smooth: float = 1.0
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError(f"patience must be in [1, max_epochs={self.max_epochs}], "
                             f"got {self.patience}")
        if self.w_ce < 0 or self.w_dice < 0 or abs(self.w_ce + self.w_dice - 1.0) > 1e-12:
            raise ValueError(f"loss weights must be non-negative and sum to 1, "
                             f"got w_ce={self.w_ce}, w_dice={self.w_dice}")


# ------------------------------------------------------------------- loss

def _as_mask(target, like: np.ndarray) -> np.ndarray:
    g = target.data if isinstance(target, Tensor) else np.asarray(target)
    if g.shape != like.shape:
        raise ShapeError(f"target shape {g.shape} does not match logits {like.shape}")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("target mask must be binary (values in {0, 1})")
    return g.astype(like.dtype, copy=False)


def combined_loss(logits: Tensor, target, w_ce: float = 0.5, w_dice: float = 0.5,
                  smooth: float = 1.0) -> Tensor:
    """``w_ce * BCE + w_dice * (1 - soft dice)`` on raw logits.

    BCE is the pixel mean of ``max(z, 0) - z*g + log1p(exp(-|z|))``. The dice
    term pools every pixel of the batch into one overlap ratio. Forward and
    backward are fused into a single tape node.
    """
    z = logits.data
    g = _as_mask(target, z)
    need = ops._needs(logits)
    n = z.size
    p = ops._sigmoid(z)
    bce = float(np.mean(np.maximum(z, 0) - z * g + np.log1p(np.exp(-np.abs(z)))))
    inter = float(np.sum(p * g))
    denom = float(np.sum(p)) + float(np.sum(g)) + smooth
    dice = 1.0 - (2 * inter + smooth) / denom
    out = np.asarray(w_ce * bce + w_dice * dice, dtype=z.dtype).reshape(1)

    def backward(go):
        d_dice_dp = -(2 * g * denom - (2 * inter + smooth)) / denom ** 2
        gz = w_ce * (p - g) / n + w_dice * d_dice_dp * p * (1 - p)
        return (gz * go.reshape(()),)

    return ops._emit("combined_loss", out, (logits,), need, backward)


def dice_score(probs, target, threshold: float = 0.5) -> float:
    """Hard dice of ``probs > threshold`` against a binary target; 1.0 if both are empty."""
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs) > threshold
    g = np.asarray(target.data if isinstance(target, Tensor) else target) > 0.5
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} does not match target {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


# -------------------------------------------------------------- optimizer

def cosine_lr(t: float, total: int, lr0: float = 1e-3, lr_min: float = 1e-5) -> float:
    if total <= 0:
        raise ValueError(f"cosine schedule needs total > 0, got {total}")
    if not 0 <= t <= total:
        raise ValueError(f"epoch {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * t / total))


class Adam:
    """Bias-corrected Adam keyed by parameter name."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        missing = [k for k in self.params if grads.get(k) is None]
        if missing:
            raise KeyError(f"no gradient for {len(missing)} parameter(s), first: {missing[0]}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        out = {f"adam.m.{k}": a for k, a in self.m.items()}
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return out

    def load_state(self, tensors: dict, step: int) -> None:
        for k in self.params:
            self.m[k] = np.array(tensors[f"adam.m.{k}"], dtype=self.m[k].dtype)
            self.v[k] = np.array(tensors[f"adam.v.{k}"], dtype=self.v[k].dtype)
        self.t = step


# ------------------------------------------------------------ augmentation

def flip_rotate(a: np.ndarray, hflip: bool, vflip: bool, k: int) -> np.ndarray:
    """Flip the last axis, then the second-to-last, then rotate by k*90 degrees."""
    if hflip:
        a = a[..., ::-1]
    if vflip:
        a = a[..., ::-1, :]
    return np.ascontiguousarray(np.rot90(a, k % 4, axes=(-2, -1)))


def undo_flip_rotate(a: np.ndarray, hflip: bool, vflip: bool, k: int) -> np.ndarray:
    a = np.rot90(a, -(k % 4), axes=(-2, -1))
    if vflip:
        a = a[..., ::-1, :]
    if hflip:
        a = a[..., ::-1]
    return np.ascontiguousarray(a)


def draw_transform(rng: np.random.Generator) -> tuple:
    return bool(rng.random() < 0.5), bool(rng.random() < 0.5), int(rng.integers(4))


def augment(sample, rng: np.random.Generator):
    """Apply one random flip/rotation to image and mask alike."""
    t = draw_transform(rng)
    return type(sample)(sample.id, flip_rotate(sample.image, *t), flip_rotate(sample.mask, *t))


# ------------------------------------------------------------------ loops

@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_dice: float
    lr: float


@dataclass
class Checkpoint:
    config: object
    tensors: dict
    epoch: int
    best_val_dice: float
    adam_step: int = 0
    meta: dict = field(default_factory=dict)


def snapshot(model: Module, opt: Optional[Adam], epoch: int, best: float) -> Checkpoint:
    tensors = {k: p.data.copy() for k, p in model.named_parameters()}
    tensors.update({k: b.copy() for k, b in model.named_buffers()})
    if opt is not None:
        tensors.update({k: a.copy() for k, a in opt.state().items()})
    return Checkpoint(getattr(model, "cfg", None), tensors, epoch, best,
                      opt.t if opt is not None else 0)


def restore(model: Module, ckpt: Checkpoint, opt: Optional[Adam] = None) -> None:
    for k, p in model.named_parameters():
        p.data = np.array(ckpt.tensors[k], dtype=p.dtype)
    for k, buf in model.named_buffers():
        buf[...] = ckpt.tensors[k]
    if opt is not None:
        opt.load_state(ckpt.tensors, ckpt.adam_step)


def stack(samples: Sequence) -> tuple:
    return (np.concatenate([s.image for s in samples]).astype(np.float32, copy=False),
            np.concatenate([s.mask for s in samples]).astype(np.float32, copy=False))


def predict_probs(model: Module, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        logits = model(Tensor(images[i:i + batch_size]))
        out.append(ops._sigmoid(logits.data))
    return np.concatenate(out)


def evaluate(model: Module, dataset: Sequence, batch_size: int = 8) -> tuple:
    """Mean dice and per-sample dice in inference mode."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    images, masks = stack(dataset)
    probs = predict_probs(model, images, batch_size)
    scores = [dice_score(probs[i], masks[i]) for i in range(len(dataset))]
    return float(np.mean(scores)), scores


EpochHook = Callable[[HistoryRow, Module], Optional[bool]]


def train(model: Module, train_set: Sequence, val_set: Sequence, cfg: TrainConfig,
          on_epoch: Optional[EpochHook] = None, score_fn=None) -> tuple:
    """Train with early stopping on validation dice.

    Returns ``(best_checkpoint, history)``. ``on_epoch`` sees each history row
    and may return True to stop early. ``score_fn(model, val_set)`` replaces
    the validation metric (mean dice by default).
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    score_fn = score_fn or (lambda m, ds: evaluate(m, ds)[0])
    params = model.param_store()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history: list = []
    best: Optional[Checkpoint] = None
    best_epoch = 0
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = cosine_lr(epoch - 1, cfg.max_epochs, cfg.lr0, cfg.lr_min)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        model.train()
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            step += 1
            batch = []
            for idx in order[start:start + cfg.batch_size]:
                s = train_set[idx]
                if cfg.augment:
                    s = augment(s, np.random.default_rng([cfg.seed, epoch, int(idx)]))
                batch.append(s)
            x, y = stack(batch)
            try:
                with Tape() as tape:
                    loss = combined_loss(model(Tensor(x)), y, cfg.w_ce, cfg.w_dice,
                                         cfg.dice_smooth)
                    grads = tape.backward(loss)
            except NumericError as exc:
                raise DivergenceError(f"non-finite values at epoch {epoch}, step {step}: "
                                      f"{exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.step({k: grads.get(p.id) for k, p in params.items()}, lr)
            losses.append(value * len(batch))
        val = float(score_fn(model, val_set))
        row = HistoryRow(epoch, sum(losses) / len(train_set), val, lr)
        history.append(row)
        if best is None or val > best.best_val_dice:
            best = snapshot(model, opt, epoch, val)
            best_epoch = epoch
        if on_epoch is not None and on_epoch(row, model):
            break
        if epoch - best_epoch >= cfg.patience:
            break
    return best, history


def write_history(path, history: Sequence[HistoryRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_dice", "lr"])
        for r in history:
            w.writerow([r.epoch, f"{r.train_loss:.6g}", f"{r.val_dice:.6g}", f"{r.lr:.6g}"])
