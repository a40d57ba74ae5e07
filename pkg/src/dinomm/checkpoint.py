"""Versioned, CRC-protected binary checkpoints.

Layout (little-endian)::

    b"DMCK" | u16 version | u32 header_len | header (UTF-8 JSON)
    | float64 tensor blob | u32 CRC32 of everything before it

The JSON header carries configs, scalars and a tensor index
``[name, shape, element offset]`` into the blob.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

MAGIC = b"DMCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_CRC = struct.Struct("<I")


class ConfigMismatchError(ContractError):
    """Resuming under a configuration different from the one saved."""

    def __init__(self, diffs: list[str]):
        self.diffs = diffs
        super().__init__("checkpoint config differs from the requested run:\n  " + "\n  ".join(diffs))


def config_hash(configs: dict) -> str:
    blob = json.dumps(configs, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def config_diff(saved: dict, requested: dict, prefix: str = "") -> list[str]:
    out = []
    for key in sorted(set(saved) | set(requested)):
        a, b = saved.get(key, "<missing>"), requested.get(key, "<missing>")
        if isinstance(a, dict) and isinstance(b, dict):
            out += config_diff(a, b, f"{prefix}{key}.")
        elif a != b:
            out.append(f"{prefix}{key}: saved={a!r} requested={b!r}")
    return out


@dataclass
class Checkpoint:
    student: dict
    teacher: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    center: np.ndarray
    center_momentum: float
    step: int
    configs: dict  # {"vit": ..., "aug": ..., "train": ...}
    stats_mean: np.ndarray
    stats_std: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.configs)

    def check_configs(self, configs: dict) -> None:
        diffs = config_diff(self.configs, configs)
        if diffs:
            raise ConfigMismatchError(diffs)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for group in ("student", "teacher", "adam_m", "adam_v"):
            for k, v in getattr(self, group).items():
                out[f"{group}/{k}"] = v
        out["center"] = self.center
        out["stats/mean"] = self.stats_mean
        out["stats/std"] = self.stats_std
        return out

    def equals(self, other: "Checkpoint") -> bool:
        return to_bytes(self) == to_bytes(other)


def to_bytes(ckpt: Checkpoint) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors().items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        index.append([name, list(arr.shape), offset])
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {
        "adam_t": ckpt.adam_t,
        "center_momentum": ckpt.center_momentum,
        "step": ckpt.step,
        "configs": ckpt.configs,
        "config_hash": ckpt.config_hash,
        "meta": ckpt.meta,
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)
    return body + _CRC.pack(zlib.crc32(body))


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < _PREFIX.size + _CRC.size:
        raise FormatError("truncated", "shorter than the fixed prefix")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError("bad magic", repr(magic))
    if version != VERSION:
        raise FormatError("bad version", str(version))
    if len(raw) < _PREFIX.size + head_len + _CRC.size:
        raise FormatError("truncated", "header extends past end of file")
    body = raw[:-_CRC.size]
    (crc,) = _CRC.unpack(raw[-_CRC.size:])
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        header = None
    if header is None:
        raise FormatError("bad checksum" if zlib.crc32(body) != crc else "bad header")
    blob_start = _PREFIX.size + head_len
    total = sum(int(np.prod(shape, dtype=np.int64)) for _, shape, _ in header["tensors"])
    if len(body) - blob_start < total * 8:
        raise FormatError("truncated", f"tensor blob needs {total * 8} bytes")
    if len(body) - blob_start > total * 8:
        raise FormatError("trailing data")
    if zlib.crc32(body) != crc:
        raise FormatError("bad checksum")
    blob = np.frombuffer(body, dtype="<f8", offset=blob_start, count=total)
    groups: dict[str, dict] = {"student": {}, "teacher": {}, "adam_m": {}, "adam_v": {}}
    singles = {}
    for name, shape, off in header["tensors"]:
        size = int(np.prod(shape, dtype=np.int64))
        arr = blob[off:off + size].astype(np.float64).reshape(shape)
        group, _, key = name.partition("/")
        if group in groups:
            groups[group][key] = arr
        else:
            singles[name] = arr
    ckpt = Checkpoint(
        student=groups["student"],
        teacher=groups["teacher"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        adam_t=int(header["adam_t"]),
        center=singles["center"],
        center_momentum=float(header["center_momentum"]),
        step=int(header["step"]),
        configs=header["configs"],
        stats_mean=singles["stats/mean"],
        stats_std=singles["stats/std"],
        meta=header.get("meta", {}),
    )
    if ckpt.config_hash != header.get("config_hash"):
        raise FormatError("bad config hash")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
