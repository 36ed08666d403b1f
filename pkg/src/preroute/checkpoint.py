"""Versioned binary container for named float64 parameter blobs.

Layout (all little-endian)::

    magic            raw bytes (b"MOEC" for models, b"GRTC-CKPT" for grouters)
    version          u16
    config_len       u32, then config_len bytes of UTF-8 JSON
    num_params       u32
    per parameter:
        name_len     u16, then name_len bytes of UTF-8
        ndim         u8, then ndim x u32 dims
        data         prod(dims) x f64, row-major
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MOE_MAGIC = b"MOEC"
GROUTER_MAGIC = b"GRTC-CKPT"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def dumps(magic: bytes, config: dict, arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(config, sort_keys=True).encode()
    buf.write(magic)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(len(magic))) != magic:
        raise CheckpointFormatError(f"bad magic, expected {magic!r}")
    version, cfg_len = struct.unpack("<HI", take(6))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    try:
        config = json.loads(bytes(take(cfg_len)).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt config header: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(bytes(take(8 * n)), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointFormatError("trailing bytes after last parameter")
    return config, arrays


def save(path: str | Path, magic: bytes, config: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(magic, config, arrays))


def load(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), magic)


def save_model(path: str | Path, model, extra: dict | None = None) -> None:
    cfg = {"model": model.config.to_dict(), **(extra or {})}
    save(path, MOE_MAGIC, cfg, model.snapshot())


def load_model(path: str | Path):
    from .moe import MoeConfig, MoeModel

    cfg, arrays = load(path, MOE_MAGIC)
    model = MoeModel(MoeConfig.from_dict(cfg["model"]))
    model.load_snapshot(arrays)
    return model, cfg
