"""Binary checkpoint format.

Layout: ``b"MNER"``, format version (u16 LE), header length (u32 LE), a
UTF-8 JSON header (model config, vocabulary, questions, step, RNG state
and the ordered parameter manifest), then every parameter as a
little-endian IEEE-754 array in manifest order.  The header also stores
the payload size and CRC32 so truncation and corruption are detected.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .model import ModelConfig, MultiNER
from .tensor import Tensor

MAGIC = b"MNER"
VERSION = 1


class CheckpointError(Exception):
    pass


class VersionError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Dict[str, np.ndarray]
    step: int = 0
    rng_state: Optional[dict] = None
    vocab: List[str] = field(default_factory=list)
    questions: Dict[str, str] = field(default_factory=dict)
    max_len: int = 128
    version: int = VERSION

    def model(self) -> MultiNER:
        return MultiNER(self.config, {n: Tensor(a.copy(), requires_grad=True, name=n)
                                      for n, a in self.params.items()})

    @classmethod
    def from_model(cls, model: MultiNER, **kw) -> "Checkpoint":
        return cls(model.cfg, {n: p.data.copy() for n, p in model.params.items()}, **kw)


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_bytes(ckpt: Checkpoint) -> bytes:
    manifest, chunks = [], []
    for name, arr in ckpt.params.items():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str})
        chunks.append(le.tobytes())
    payload = b"".join(chunks)
    header = {
        "config": ckpt.config.to_dict(),
        "vocab": list(ckpt.vocab),
        "questions": dict(ckpt.questions),
        "max_len": int(ckpt.max_len),
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "params": manifest,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<HI", ckpt.version, len(hb)) + hb + payload


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 10 or data[:4] != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {VERSION}")
    if len(data) < 10 + hlen:
        raise IntegrityError("truncated header")
    try:
        header = json.loads(data[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"corrupt header: {exc}") from None
    payload = data[10 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise IntegrityError(f"payload has {len(payload)} bytes, header says "
                             f"{header['payload_bytes']}")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise IntegrityError("payload checksum mismatch")
    params, pos = {}, 0
    for entry in header["params"]:
        dt = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(payload[pos:pos + n], dtype=dt).reshape(entry["shape"])
        params[entry["name"]] = arr.astype(dt.newbyteorder("="))
        pos += n
    cfg = ModelConfig.from_dict(header["config"])
    return Checkpoint(cfg, params, header["step"], header["rng_state"], header["vocab"],
                      header["questions"], header["max_len"], version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write_bytes(path, to_bytes(ckpt))


def load_checkpoint(path, expect: Optional[ModelConfig] = None) -> Checkpoint:
    with open(path, "rb") as f:
        ckpt = from_bytes(f.read())
    if expect is not None and expect.to_dict() != ckpt.config.to_dict():
        raise ConfigMismatchError("checkpoint config differs from the expected config")
    return ckpt


def load_into(model: MultiNER, ckpt: Checkpoint) -> None:
    """Copy checkpoint parameters into an existing model of the same shape."""
    if model.cfg.types != ckpt.config.types or model.cfg.mode != ckpt.config.mode:
        raise ConfigMismatchError(
            f"model expects types {model.cfg.types} in mode {model.cfg.mode}, checkpoint has "
            f"{ckpt.config.types} in mode {ckpt.config.mode}")
    for name, p in model.params.items():
        arr = ckpt.params.get(name)
        if arr is None or arr.shape != p.shape:
            raise ConfigMismatchError(f"parameter {name} missing or misshapen in checkpoint")
    for name, p in model.params.items():
        p.data = ckpt.params[name].astype(p.dtype, copy=True)
