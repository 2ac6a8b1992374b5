"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"ACCUCKPT"                 magic, 8 bytes
    version                     currently 1
    header_len, header          UTF-8 ``key = value`` lines: model.* config,
                                meta.epoch, meta.best_val_dice, meta.adam_step
    count                       number of tensors
    count x tensor record:
        name_len, name          UTF-8 tensor name
        rank, dims[rank]
        data                    prod(dims) little-endian float32 values

Tensor names are parameter names (``enc1.hanc1.expand.conv.weight``), BN
buffer names (``...bn.running_mean``) and Adam moments (``adam.m.<param>``,
``adam.v.<param>``). Floats in the header use ``repr`` so they round-trip.
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

from accunet.config import format_kv, from_kv, parse_kv, to_kv
from accunet.model import ModelConfig
from accunet.training import Checkpoint

MAGIC = b"ACCUCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _u32(fh, value: int) -> None:
    fh.write(struct.pack("<I", value))


def _read(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def _read_u32(fh) -> int:
    return struct.unpack("<I", _read(fh, 4))[0]


def dumps(ckpt: Checkpoint) -> bytes:
    header = dict(to_kv(ckpt.config, "model")) if ckpt.config is not None else {}
    header.update({"meta.epoch": str(ckpt.epoch), "meta.best_val_dice": repr(ckpt.best_val_dice),
                   "meta.adam_step": str(ckpt.adam_step)})
    text = format_kv(header).encode("utf-8")
    fh = io.BytesIO()
    fh.write(MAGIC)
    _u32(fh, VERSION)
    _u32(fh, len(text))
    fh.write(text)
    _u32(fh, len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        _u32(fh, len(raw))
        fh.write(raw)
        arr = np.asarray(arr)
        _u32(fh, arr.ndim)
        for d in arr.shape:
            _u32(fh, d)
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return fh.getvalue()


def loads(data: bytes) -> Checkpoint:
    fh = io.BytesIO(data)
    magic = _read(fh, len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint: magic {magic!r}")
    version = _read_u32(fh)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = parse_kv(_read(fh, _read_u32(fh)).decode("utf-8"))
    tensors = {}
    for _ in range(_read_u32(fh)):
        name = _read(fh, _read_u32(fh)).decode("utf-8")
        shape = tuple(_read_u32(fh) for _ in range(_read_u32(fh)))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(_read(fh, 4 * count), dtype="<f4").reshape(shape).copy()
    if fh.read(1):
        raise CheckpointError("trailing bytes after the last tensor")
    has_model = any(k.startswith("model.") for k in header)
    cfg = from_kv(ModelConfig, header, "model") if has_model else None
    try:
        return Checkpoint(cfg, tensors, int(header["meta.epoch"]),
                          float(header["meta.best_val_dice"]), int(header["meta.adam_step"]))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint header lacks {exc.args[0]}") from None


def save(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def load(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
