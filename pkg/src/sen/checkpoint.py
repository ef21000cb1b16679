"""SENC checkpoints: named little-endian tensors plus a trailing JSON metadata blob.

Layout::

    b"SENC" | version u32 | count u32
    count x ( name_len u32 | name utf-8 | dtype u8 | rank u8 | extents u64 x rank | payload )
    meta_len u32 | metadata JSON (utf-8)

dtype 0 is float64, 1 is float32. Everything is little-endian and row-major,
so a reader can list the tensors without knowing the config.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import SENConfig, parse_config
from .network import SEN
from .training import OptimizerState, TaskHead, TrainState, make_head, named_training_params

MAGIC = b"SENC"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAGS = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class CheckpointError(ValueError):
    """Malformed, truncated or inconsistent checkpoint."""


class CheckpointDigestError(CheckpointError):
    pass


def encode_senc(entries: list, metadata: dict) -> bytes:
    """Serialise ``[(name, ndarray)]`` and ``metadata`` into SENC bytes."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        if arr.ndim > 255:
            raise CheckpointError(f"{name}: rank {arr.ndim} does not fit in a byte")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    blob = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} "
                                  f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_senc(buf: bytes) -> tuple:
    """Inverse of :func:`encode_senc`: ``(entries, metadata)``."""
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}: not a SENC checkpoint")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported SENC version {version} (reader supports {VERSION})")
    entries = []
    for i in range(count):
        (n,) = r.unpack("<I", f"entry {i} name length")
        try:
            name = r.take(n, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"entry {i}: name is not UTF-8") from exc
        tag, rank = r.unpack("<BB", f"{name} dtype/rank")
        if tag not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}Q", f"{name} extents")
        dt = _DTYPES[tag]
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = r.take(size * dt.itemsize, f"{name} payload")
        arr = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="), copy=True)
        entries.append((name, arr))
    (mlen,) = r.unpack("<I", "metadata length")
    try:
        metadata = json.loads(r.take(mlen, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"metadata blob is not valid JSON: {exc}") from exc
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after metadata")
    return entries, metadata


def write_senc(path, entries: list, metadata: dict) -> None:
    data = encode_senc(entries, metadata)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_senc(path) -> tuple:
    with open(path, "rb") as fh:
        return decode_senc(fh.read())


# ---------------------------------------------------------------- model checkpoints


@dataclass
class Restored:
    sen: SEN
    head: TaskHead
    state: TrainState
    config: SENConfig
    seed: int
    metadata: dict


def save_checkpoint(path, sen: SEN, head: TaskHead, state: TrainState, seed: int,
                    extra: Optional[dict] = None) -> None:
    """Trainable tensors, optimiser moments and run metadata. Encoders are stored by seed only."""
    cfg = sen.config
    if cfg is None:
        raise CheckpointError("checkpointing needs a SEN built from a config")
    named = named_training_params(sen, head)
    entries = [(n, t.data) for n, t in named]
    entries += [(f"opt.m.{n}", m) for (n, _), m in zip(named, state.opt.m)]
    entries += [(f"opt.v.{n}", v) for (n, _), v in zip(named, state.opt.v)]
    meta = {
        "format": "SENC",
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "encoder_seeds": [n.seed for n in sen.neurons],
        "encoder_digest": sen.encoder_digest(),
        "n_modalities": sen.n_modalities,
        "seed": seed,
        "step": state.step,
        "opt_step": state.opt.step,
        "loss_window": [state.loss_sum, state.loss_count],
    }
    if extra:
        meta["extra"] = extra
    write_senc(path, entries, meta)


def load_checkpoint(path) -> Restored:
    """Rebuild the model, head and optimiser state saved by :func:`save_checkpoint`."""
    from .experiments import build_model, build_task

    entries, meta = read_senc(path)
    for key in ("config", "config_digest", "encoder_seeds", "seed", "step"):
        if key not in meta:
            raise CheckpointError(f"metadata lacks {key!r}")
    cfg = parse_config(meta["config"])
    if cfg.digest() != meta["config_digest"]:
        raise CheckpointDigestError("config digest mismatch: metadata config was altered")
    if meta["encoder_seeds"] != cfg.encoder_seeds()[:len(meta["encoder_seeds"])]:
        raise CheckpointDigestError("stored encoder seeds disagree with the config")
    seed = meta["seed"]
    sen = build_model(cfg, seed, meta.get("n_modalities"))
    if "encoder_digest" in meta and sen.encoder_digest() != meta["encoder_digest"]:
        raise CheckpointDigestError("rebuilt encoders do not match the stored digest")
    head = make_head(build_task(cfg, seed), sen.d, seed)
    named = named_training_params(sen, head)
    table = dict(entries)
    if len(table) != len(entries):
        raise CheckpointError("duplicate tensor names")
    expected = {n for n, _ in named} | {f"opt.{b}.{n}" for n, _ in named for b in "mv"}
    if set(table) != expected:
        missing = sorted(expected - set(table))
        unknown = sorted(set(table) - expected)
        raise CheckpointError(f"tensor set mismatch; missing={missing[:5]} unknown={unknown[:5]}")
    for n, t in named:
        arr = table[n]
        if arr.shape != t.shape:
            raise CheckpointError(f"{n}: stored shape {arr.shape} vs model {t.shape}")
        t.data[...] = arr
    t = cfg.training
    opt = OptimizerState(base_lr=t.base_lr, total_steps=max(t.steps, 1), beta1=t.beta1, beta2=t.beta2,
                         weight_decay=t.weight_decay, schedule=t.schedule, step=meta.get("opt_step", meta["step"]))
    opt.m = [np.array(table[f"opt.m.{n}"], dtype=np.float64) for n, _ in named]
    opt.v = [np.array(table[f"opt.v.{n}"], dtype=np.float64) for n, _ in named]
    loss_sum, loss_count = meta.get("loss_window", [0.0, 0])
    state = TrainState(meta["step"], opt, loss_sum, loss_count)
    return Restored(sen, head, state, cfg, seed, meta)


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def tensor_table(path) -> list:
    """``(name, dtype, shape)`` for every entry, read without any config."""
    entries, _ = read_senc(path)
    return [(n, str(a.dtype), tuple(a.shape)) for n, a in entries]


__all__ = ["CheckpointError", "CheckpointDigestError", "MAGIC", "VERSION", "Restored", "decode_senc",
           "encode_senc", "file_digest", "load_checkpoint", "read_senc", "save_checkpoint",
           "tensor_table", "write_senc"]
