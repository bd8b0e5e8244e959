"""Binary checkpoint container.

Layout, all integers little-endian::

    b"DLCK"                       magic
    u32   version                 (1)
    u64   config length, then that many UTF-8 bytes
    u32   array count
    per array:
      u32 name length, UTF-8 name
      u32 ndim, then ndim x u64 dims
      float32 payload, row-major
"""

from __future__ import annotations

import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DLCK"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class Checkpoint:
    config_text: str
    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def flatten_models(models: dict) -> "OrderedDict[str, np.ndarray]":
    """``{"prior": module, "gmm.means": array, ...}`` -> flat name -> array map."""
    out = OrderedDict()
    for key, obj in models.items():
        if hasattr(obj, "named_parameters"):
            for name, arr in obj.named_parameters(key + "."):
                out[name] = arr
        else:
            out[key] = np.asarray(obj)
    return out


def select(arrays: dict, prefix: str) -> dict:
    """Arrays under ``prefix.`` with the prefix stripped, ready for ``load_parameters``."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}


def encode(arrays: dict, config_text: str = "") -> bytes:
    cfg = config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(cfg)), cfg,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        a = np.array(arr, dtype="<f4", order="C")
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", a.ndim),
                  struct.pack(f"<{a.ndim}Q", *a.shape), a.tobytes()]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(what, f"truncated (need {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("magic", "not a DLCK checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError("version", f"unsupported format version {version}")
    (n_cfg,) = r.unpack("<Q", "config length")
    try:
        config_text = r.take(n_cfg, "config").decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointError("config", "invalid UTF-8") from e
    (count,) = r.unpack("<I", "array count")
    arrays = OrderedDict()
    for i in range(count):
        (n_name,) = r.unpack("<I", f"array[{i}] name length")
        name = r.take(n_name, f"array[{i}] name").decode("utf-8")
        (ndim,) = r.unpack("<I", f"{name} ndim")
        dims = r.unpack(f"<{ndim}Q", f"{name} dims")
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * size, f"{name} payload")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError("trailer", f"{len(buf) - r.pos} unexpected trailing bytes")
    return Checkpoint(config_text, arrays)


def atomic_write(path, data: bytes | str):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, models: dict, config_text: str = ""):
    atomic_write(path, encode(flatten_models(models), config_text))


def load_checkpoint(path) -> Checkpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        return decode(f.read())
