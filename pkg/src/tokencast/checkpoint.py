"""Sectioned binary snapshots of a forecaster.

Layout, all integers little-endian:

    magic    4 bytes  b"DLF1"
    version  u32      currently 1
    header   u32 length + UTF-8 JSON: config dict, seed, step, prng_state
    count    u32      number of tensor records
    record   u16 name length + name bytes
             u8 ndim, then ndim * u32 dims
             u64 payload length, then float64 LE payload

Every trainable and frozen tensor of the model is stored by its stable
name, so load(save(model)) reproduces forward outputs bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .config import RunConfig
from .model import Forecaster

MAGIC = b"DLF1"
VERSION = 1


class CheckpointError(Exception):
    pass


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: expected {n} bytes for {what}")
    return buf


def save_checkpoint(path, model: Forecaster, *, step: int = 0,
                    prng_state: dict | None = None) -> None:
    header = {
        "config": dataclasses.asdict(model.cfg),
        "seed": model.cfg.seed,
        "step": int(step),
        "prng_state": prng_state,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = model.named_parameters()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            data = tensors[name].data
            payload = np.ascontiguousarray(data, dtype="<f8").tobytes()
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def _open_checkpoint(path):
    try:
        return open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


def read_header(path) -> dict:
    """Header JSON only; cheap way to inspect a checkpoint's config."""
    with _open_checkpoint(path) as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise CheckpointError(
                f"not a checkpoint file: bad magic {magic!r}, expected {MAGIC!r}"
            )
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version}, this build reads {VERSION}"
            )
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        return json.loads(_read_exact(fh, hlen, "header").decode("utf-8"))


def load_checkpoint(path) -> tuple[Forecaster, dict]:
    """Rebuild the model a checkpoint describes and restore every tensor."""
    with _open_checkpoint(path) as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MAGIC:
            raise CheckpointError(
                f"not a checkpoint file: bad magic {magic!r}, expected {MAGIC!r}"
            )
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version}, this build reads {VERSION}"
            )
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        header = json.loads(_read_exact(fh, hlen, "header").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))

        model = Forecaster(RunConfig(**header["config"]))
        tensors = model.named_parameters()
        seen = set()
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "tensor name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "shape"))
            (plen,) = struct.unpack("<Q", _read_exact(fh, 8, "payload length"))
            payload = _read_exact(fh, plen, f"tensor '{name}'")
            if name in seen:
                raise CheckpointError(f"duplicate tensor '{name}' in checkpoint")
            seen.add(name)
            if name not in tensors:
                raise CheckpointError(
                    f"unknown tensor '{name}' not present in the rebuilt model"
                )
            target = tensors[name]
            if tuple(shape) != target.shape:
                raise CheckpointError(
                    f"tensor '{name}' shape {tuple(shape)} does not match "
                    f"model shape {target.shape}"
                )
            arr = np.frombuffer(payload, dtype="<f8")
            if arr.size != target.size:
                raise CheckpointError(f"tensor '{name}' payload size mismatch")
            target.data[...] = arr.reshape(shape)
        missing = sorted(set(tensors) - seen)
        if missing:
            raise CheckpointError(f"checkpoint is missing tensors: {missing[:5]}")
    meta = {k: header[k] for k in ("seed", "step", "prng_state")}
    return model, meta
