"""Versioned binary checkpoint: header + named float64 tensor table + CRC32.

Layout (all integers little-endian):

    magic     8 bytes  b"EVFLOCKP"
    version   uint32
    cfg_len   uint32, then cfg_len bytes of UTF-8 JSON:
              {"model": ModelConfig fields, "extra": free-form metadata}
    n_tensors uint32
    per tensor:
        name_len uint16, name UTF-8
        ndim     uint8, then ndim * uint32 dims
        data     float64 little-endian, prod(dims) values
    crc32     uint32 over every preceding byte

Model tensors are written first in their canonical config order; auxiliary
tensors (optimizer moments for resume, named "adam.m.*"/"adam.v.*") follow.
Loading rebuilds shapes from the stored config and verifies every model
tensor against them.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .denoiser import DenoiserParams, ModelConfig, init_params
from .errors import DataError

MAGIC = b"EVFLOCKP"
CHECKPOINT_VERSION = 1


def _pack_tensor(name: str, data: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    arr = np.ascontiguousarray(data, dtype="<f8")
    out = [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim)]
    for dim in arr.shape:
        out.append(struct.pack("<I", dim))
    out.append(arr.tobytes())
    return b"".join(out)


def save_checkpoint(
    path: str | Path,
    params: DenoiserParams,
    extra_tensors: dict[str, np.ndarray] | None = None,
    extra_config: dict | None = None,
) -> None:
    cfg = {
        "model": json.loads(params.config.to_json()),
        "extra": extra_config or {},
    }
    cfg_bytes = json.dumps(cfg, sort_keys=True).encode("utf-8")
    tensors: list[tuple[str, np.ndarray]] = [
        (name, t.data) for name, t in params.tensors.items()
    ]
    for name, arr in (extra_tensors or {}).items():
        tensors.append((name, np.asarray(arr, dtype=np.float64)))
    body = [
        MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", len(cfg_bytes)),
        cfg_bytes,
        struct.pack("<I", len(tensors)),
    ]
    for name, arr in tensors:
        body.append(_pack_tensor(name, arr))
    blob = b"".join(body)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError(f"checkpoint truncated at byte offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(
    path: str | Path,
) -> tuple[DenoiserParams, dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (params, auxiliary tensors, extra config).

    Validates magic, version, CRC, and every model tensor's shape against the
    stored config.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12:
        raise DataError(f"checkpoint truncated at byte offset {len(raw)}")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise DataError(
            f"checkpoint CRC mismatch: stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x}"
        )
    r = _Reader(raw[:-4])
    if r.take(len(MAGIC)) != MAGIC:
        raise DataError("bad checkpoint magic")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise DataError(
            f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    cfg_len = r.u32()
    try:
        cfg = json.loads(r.take(cfg_len).decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"malformed checkpoint config JSON: {e}") from e
    try:
        config = ModelConfig.from_dict(cfg["model"])
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"invalid model config in checkpoint: {e}") from e
    n_tensors = r.u32()
    loaded: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name = r.take(r.u16()).decode("utf-8")
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(count * 8), dtype="<f8").reshape(shape)
        loaded[name] = data.astype(np.float64)
    if r.pos != len(r.buf):
        raise DataError(f"trailing bytes in checkpoint at offset {r.pos}")

    params = init_params(config, seed=0)
    extra: dict[str, np.ndarray] = {}
    for name, arr in loaded.items():
        if name in params.tensors:
            want = params.tensors[name].data.shape
            if arr.shape != want:
                raise DataError(
                    f"tensor {name!r} shape {arr.shape} != expected {want}"
                )
            params.tensors[name].data = arr.copy()
        else:
            extra[name] = arr
    missing = [n for n in params.tensors if n not in loaded]
    if missing:
        raise DataError(f"checkpoint missing tensors: {missing[:5]}")
    return params, extra, cfg.get("extra", {})
