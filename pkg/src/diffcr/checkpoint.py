"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DCR1"                 magic
    u32  version
    u32  config length, then the INI config text (utf-8)
    u32  array count
    per array:
        u16  name length, name (utf-8)
        2s   element type ("f8", "f4", "i8")
        u8   ndim, then ndim x u64 dims
        payload, little-endian, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig

MAGIC = b"DCR1"
VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "f4": np.dtype("<f4"), "i8": np.dtype("<i8")}


class CheckpointFormatError(ValueError):
    pass


class ConfigMismatchError(ValueError):
    pass


@dataclass
class Checkpoint:
    version: int
    config: RunConfig
    arrays: dict

    def manifest(self) -> list[tuple[str, str, tuple]]:
        return [(name, _code(arr), arr.shape) for name, arr in self.arrays.items()]


def _code(arr: np.ndarray) -> str:
    for code, dt in _DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return code
    raise CheckpointFormatError(f"unsupported array dtype {arr.dtype}")


def dumps(config: RunConfig, arrays: dict) -> bytes:
    cfg = config.to_ini().encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr)
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + code.encode())
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, "
                                        f"file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, cfg_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"checkpoint format version {version}, this reader supports {VERSION}")
    config = RunConfig.from_ini(r.take(cfg_len).decode())
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code = r.take(2).decode()
        if code not in _DTYPES:
            raise CheckpointFormatError(f"{name}: unknown element type {code!r}")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).copy()
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after last array")
    return Checkpoint(version, config, arrays)


def save_checkpoint(path, config: RunConfig, arrays: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = dumps(config, arrays)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected: Optional[RunConfig] = None) -> Checkpoint:
    ckpt = loads(Path(path).read_bytes())
    if expected is not None:
        diff = ckpt.config.diff(expected)
        if diff:
            raise ConfigMismatchError(f"checkpoint config differs in: {', '.join(diff)}")
    return ckpt


def save_estimator(path, config: RunConfig, estimator) -> Path:
    return save_checkpoint(path, config, estimator.state_arrays())


def load_estimator(path, expected: Optional[RunConfig] = None):
    """(estimator restored from the checkpoint, its RunConfig)."""
    ckpt = load_checkpoint(path, expected)
    est = ckpt.config.estimator()
    est.load_state_arrays(ckpt.arrays)
    return est, ckpt.config
