"""Synthetic SAR-optical scenes, the DMM1 container format, normalisation, batching."""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .resample import resize_2d

MAGIC = b"DMM1"
VERSION = 1
_HEADER = struct.Struct("<4sHHIHHHH")
_CRC = struct.Struct("<I")

C_OPTICAL = 12
C_SAR = 2


@dataclass
class MultimodalSample:
    pixels: np.ndarray  # [C, H, W], optical first
    labels: np.ndarray  # multi-hot, uint8
    id: int


@dataclass
class MultimodalDataset:
    pixels: np.ndarray  # [n, C, H, W] float64
    labels: np.ndarray  # [n, num_classes] uint8
    ids: np.ndarray  # [n] uint64
    c_optical: int = C_OPTICAL

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        n = len(self.pixels)
        if self.pixels.ndim != 4 or self.labels.shape[0] != n or self.ids.shape != (n,):
            raise DimensionError(
                f"inconsistent dataset arrays: pixels {self.pixels.shape}, labels {self.labels.shape}, ids {self.ids.shape}")
        if not 0 < self.c_optical <= self.pixels.shape[1]:
            raise DimensionError(f"optical split {self.c_optical} outside [1, {self.pixels.shape[1]}]")

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, i: int) -> MultimodalSample:
        return MultimodalSample(self.pixels[i], self.labels[i], int(self.ids[i]))

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def c_total(self) -> int:
        return self.pixels.shape[1]

    @property
    def c_sar(self) -> int:
        return self.c_total - self.c_optical

    @property
    def size(self) -> int:
        return self.pixels.shape[-1]

    def subset(self, idx) -> "MultimodalDataset":
        idx = np.asarray(idx)
        return MultimodalDataset(self.pixels[idx], self.labels[idx], self.ids[idx], self.c_optical)

    def equals(self, other: "MultimodalDataset") -> bool:
        return (self.c_optical == other.c_optical
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.labels, other.labels)
                and self.pixels.shape == other.pixels.shape
                and self.pixels.tobytes() == other.pixels.tobytes())


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class _ClassMotif:
    angle: float
    freq: float
    spectrum: np.ndarray  # optical response, [C_OPTICAL]
    backscatter: np.ndarray  # SAR response, [C_SAR]


def _class_motifs(num_classes: int, rng: np.random.Generator) -> list[_ClassMotif]:
    motifs = []
    for k in range(num_classes):
        spectrum = rng.normal(0.0, 1.0, C_OPTICAL)
        spectrum /= np.linalg.norm(spectrum)
        sar = rng.normal(0.0, 1.0, C_SAR)
        sar /= np.linalg.norm(sar)
        motifs.append(_ClassMotif(
            angle=np.pi * k / num_classes,
            freq=0.12 + 0.1 * (k % 3),
            spectrum=spectrum,
            backscatter=sar,
        ))
    return motifs


def _smooth_field(rng: np.random.Generator, size: int, cells: int = 4) -> np.ndarray:
    return resize_2d(rng.normal(0.0, 1.0, (cells, cells)), size, size)


def generate_synthetic(n: int, num_classes: int = 8, size: int = 64, seed: int = 0,
                       label_rate: float = 0.25, world_seed: int = 0) -> MultimodalDataset:
    """Multi-label scenes where each active class paints a textured region.

    A class has an oriented grating texture, an optical spectrum and a SAR
    backscatter signature. Its region is drawn into both modalities, so
    either one alone carries the class, each with independent noise.
    Class definitions depend only on ``world_seed``, so splits drawn with
    different ``seed`` values share them.
    """
    if num_classes < 1:
        raise ConfigError(f"num_classes must be >= 1, got {num_classes}")
    if n < num_classes:
        raise ConfigError(f"n ({n}) must be >= num_classes ({num_classes})")
    if size < 16:
        raise ConfigError(f"size must be >= 16, got {size}")
    if not 0 < label_rate < 1:
        raise ConfigError(f"label_rate must be in (0, 1), got {label_rate}")

    motif_rng = np.random.default_rng([world_seed, 0x5EED])
    motifs = _class_motifs(num_classes, motif_rng)
    rng = np.random.default_rng([seed, 1])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base_spectrum = np.abs(motif_rng.normal(1.0, 0.3, C_OPTICAL))

    pixels = np.empty((n, C_OPTICAL + C_SAR, size, size))
    labels = np.zeros((n, num_classes), dtype=np.uint8)
    for i in range(n):
        y = (rng.random(num_classes) < label_rate).astype(np.uint8)
        if not y.any():
            y[rng.integers(num_classes)] = 1
        labels[i] = y
        optical = base_spectrum[:, None, None] * (0.5 * _smooth_field(rng, size))
        sar = 0.3 * _smooth_field(rng, size)[None] * np.ones((C_SAR, 1, 1))
        for k in np.flatnonzero(y):
            m = motifs[k]
            cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
            radius = rng.uniform(0.25 * size, 0.45 * size)
            mask = 1.0 / (1.0 + np.exp((np.hypot(yy - cy, xx - cx) - radius) / 1.5))
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.cos(m.freq * (np.cos(m.angle) * xx + np.sin(m.angle) * yy) + phase)
            amp = rng.uniform(0.6, 1.4)
            texture = mask * (0.5 + wave) * amp
            optical = optical + m.spectrum[:, None, None] * texture
            sar = sar + m.backscatter[:, None, None] * texture
        optical = optical + rng.normal(0.0, 0.3, optical.shape)
        sar = sar + rng.normal(0.0, 0.45, sar.shape)
        pixels[i, :C_OPTICAL] = optical
        pixels[i, C_OPTICAL:] = sar
    # stored as f32 on disk; keep memory bit-compatible with a round trip
    pixels = pixels.astype(np.float32).astype(np.float64)
    return MultimodalDataset(pixels, labels, np.arange(n, dtype=np.uint64), C_OPTICAL)


# ---------------------------------------------------------------------------
# DMM1 container


def _record_dtype(num_classes: int, c: int, h: int, w: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("labels", "u1", (num_classes,)), ("pixels", "<f4", (c, h, w))])


def to_bytes(dataset: MultimodalDataset) -> bytes:
    n, c, h, w = dataset.pixels.shape
    header = _HEADER.pack(MAGIC, VERSION, dataset.num_classes, n, c, dataset.c_optical, w, h)
    records = np.empty(n, dtype=_record_dtype(dataset.num_classes, c, h, w))
    records["id"] = dataset.ids
    records["labels"] = dataset.labels
    records["pixels"] = dataset.pixels
    body = header + records.tobytes()
    return body + _CRC.pack(zlib.crc32(body))


def from_bytes(raw: bytes) -> MultimodalDataset:
    if len(raw) < _HEADER.size + _CRC.size:
        raise FormatError("truncated", f"{len(raw)} bytes is shorter than the header")
    magic, version, k, n, c, c_opt, w, h = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError("bad magic", repr(magic))
    if version != VERSION:
        raise FormatError("bad version", str(version))
    if not 0 < c_opt <= c:
        raise FormatError("bad channel split", f"{c_opt} of {c}")
    dtype = _record_dtype(k, c, h, w)
    expected = _HEADER.size + n * dtype.itemsize + _CRC.size
    if len(raw) < expected:
        raise FormatError("truncated", f"expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise FormatError("trailing data", f"expected {expected} bytes, got {len(raw)}")
    body = raw[:-_CRC.size]
    (crc,) = _CRC.unpack(raw[-_CRC.size:])
    if zlib.crc32(body) != crc:
        raise FormatError("bad checksum")
    records = np.frombuffer(body, dtype=dtype, offset=_HEADER.size, count=n)
    labels = records["labels"].copy()
    if labels.size and labels.max() > 1:
        raise FormatError("bad labels", "label bytes must be 0 or 1")
    return MultimodalDataset(records["pixels"].astype(np.float64), labels, records["id"].copy(), c_opt)


def save(dataset: MultimodalDataset, path) -> None:
    Path(path).write_bytes(to_bytes(dataset))


def load(path) -> MultimodalDataset:
    return from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# normalisation and batching


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def channel_stats(dataset: MultimodalDataset) -> ChannelStats:
    if len(dataset) == 0:
        raise ConfigError("cannot normalise an empty dataset")
    mean = dataset.pixels.mean(axis=(0, 2, 3))
    std = dataset.pixels.std(axis=(0, 2, 3))
    flat = std <= 1e-12
    if flat.any():
        warnings.warn(f"zero-variance channels {np.flatnonzero(flat).tolist()}; using std 1", RuntimeWarning,
                      stacklevel=3)
        std = np.where(flat, 1.0, std)
    return ChannelStats(mean, std)


def apply_stats(dataset: MultimodalDataset, stats: ChannelStats) -> MultimodalDataset:
    px = (dataset.pixels - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]
    return MultimodalDataset(px, dataset.labels, dataset.ids, dataset.c_optical)


def normalize(dataset: MultimodalDataset) -> tuple[MultimodalDataset, ChannelStats]:
    """Standardise each channel with statistics of this (training) split."""
    stats = channel_stats(dataset)
    return apply_stats(dataset, stats), stats


def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch, 0xBA7C]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(dataset: MultimodalDataset, batch_size: int, seed: int, epoch: int = 0) -> Iterator[MultimodalDataset]:
    """One shuffled epoch; the last batch may be short."""
    for idx in batch_indices(len(dataset), batch_size, seed, epoch):
        yield dataset.subset(idx)
