"""Synthetic segmentation data, dataset directories and splits."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from accunet.pgm import read_pgm, write_pgm


@dataclass(frozen=True)
class Sample:
    """An image in [0, 1] of shape (1, c, h, w) and its binary (1, 1, h, w) mask."""

    id: str
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.image.ndim != 4 or self.image.shape[0] != 1:
            raise ValueError(f"{self.id}: image must be (1, c, h, w), got {self.image.shape}")
        if self.mask.shape != (1, 1) + self.image.shape[2:]:
            raise ValueError(f"{self.id}: mask shape {self.mask.shape} does not match "
                             f"image {self.image.shape}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError(f"{self.id}: mask is not binary")


Dataset = list


@dataclass(frozen=True)
class DataConfig:
    n: int = 32
    hw: int = 64
    channels: int = 3
    difficulty: float = 0.3
    seed: int = 0
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2


# --------------------------------------------------------------- synthetic

def _texture(rng, hw: int) -> np.ndarray:
    yy, xx = np.mgrid[0:hw, 0:hw] / hw
    tex = np.zeros((hw, hw))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 4.0, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        tex += np.sin(2 * math.pi * (fy * yy + fx * xx) + phase)
    return tex / 3


def _blobs(rng, hw: int) -> np.ndarray:
    yy, xx = np.mgrid[0:hw, 0:hw] + 0.5
    mask = np.zeros((hw, hw), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.2 * hw, 0.8 * hw, size=2)
        ry, rx = rng.uniform(0.08 * hw, 0.22 * hw, size=2)
        theta = rng.uniform(0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        mask |= (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    return mask


def synth_sample(seed: int, index: int, hw: int, difficulty: float, channels: int = 3) -> Sample:
    rng = np.random.default_rng([seed, index])
    while True:
        mask = _blobs(rng, hw)
        frac = mask.mean()
        if 0 < frac < 0.6:
            break
    contrast = 0.45 * (1 - 0.7 * difficulty)
    sigma = 0.03 + 0.15 * difficulty
    tex = _texture(rng, hw)
    image = np.empty((channels, hw, hw))
    for c in range(channels):
        base = rng.uniform(0.3, 0.5)
        sign = rng.choice((-1.0, 1.0)) if c else 1.0
        image[c] = base + 0.1 * tex + sign * contrast * mask
    image += rng.normal(0, sigma, size=image.shape)
    image = np.clip(image, 0, 1).astype(np.float32)
    return Sample(f"s{index:04d}", image[None], mask[None, None].astype(np.float32))


def gen_synthetic(n: int, hw: int, seed: int, difficulty: float = 0.3,
                  channels: int = 3) -> Dataset:
    """``n`` images of 1-3 ellipses on a sinusoidal texture with Gaussian noise.

    ``difficulty`` in [0, 1] lowers foreground contrast and raises the noise.
    Each sample draws from its own ``(seed, index)`` stream.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if hw < 16 or hw % 16:
        raise ValueError(f"hw must be a positive multiple of 16, got {hw}")
    if not 0 <= difficulty <= 1:
        raise ValueError(f"difficulty must be in [0, 1], got {difficulty}")
    return [synth_sample(seed, i, hw, difficulty, channels) for i in range(n)]


# ------------------------------------------------------------------ splits

@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ValueError(f"need three non-negative fractions, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(self.fractions)}")


def split(dataset: Sequence[Sample], spec: SplitSpec = SplitSpec()) -> tuple:
    """Seeded shuffle, then train/val take floor(f*n) and test gets the rest."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(math.floor(spec.fractions[0] * n + 1e-9))
    n_val = int(math.floor(spec.fractions[1] * n + 1e-9))
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    for name, idx in zip(("train", "val", "test"), parts):
        if len(idx) == 0:
            raise ValueError(f"{name} split is empty for n={n} and fractions {spec.fractions}")
    return tuple([dataset[i] for i in idx] for idx in parts)


# -------------------------------------------------------------- directories

def save_dataset(dataset: Sequence[Sample], root: str | os.PathLike) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in dataset:
        for k, chan in enumerate(s.image[0]):
            write_pgm(chan, root / "images" / f"{s.id}_c{k}.pgm")
        write_pgm(s.mask[0, 0], root / "masks" / f"{s.id}.pgm")
    (root / "index.txt").write_text("".join(f"{s.id}\n" for s in dataset))


def read_ids(root: str | os.PathLike) -> list:
    index = Path(root) / "index.txt"
    if not index.exists():
        raise FileNotFoundError(f"no index.txt in dataset directory {root}")
    return [line.strip() for line in index.read_text().splitlines() if line.strip()]


def load_image(root: str | os.PathLike, sid: str) -> np.ndarray:
    root = Path(root)
    chans = []
    while (root / "images" / f"{sid}_c{len(chans)}.pgm").exists():
        chans.append(read_pgm(root / "images" / f"{sid}_c{len(chans)}.pgm"))
    if not chans:
        raise FileNotFoundError(f"no image channels for {sid!r} under {root / 'images'}")
    return np.stack(chans)[None]


def load_dataset(root: str | os.PathLike) -> Dataset:
    """Read a dataset directory; masks binarize at 127.5 of 255."""
    root = Path(root)
    out = []
    for sid in read_ids(root):
        mask = read_pgm(root / "masks" / f"{sid}.pgm") * 255 > 127.5
        out.append(Sample(sid, load_image(root, sid), mask[None, None].astype(np.float32)))
    return out
