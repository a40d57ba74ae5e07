"""Seeded multi-crop view generation with RandomSensorDrop.

All transforms act on float arrays shaped [C, H, W] (channel first, width on
the last axis). Photometric ops are generalised from RGB to any channel
count. Sensor drop always runs last so nothing can refill zeroed channels.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, InputError
from .resample import bilinear_matrix, gaussian_matrix


class DropMode(str, enum.Enum):
    """Which modality survives in a view (labels follow the S/O/M table)."""

    SAR_DROPPED = "O"  # optical only
    OPTICAL_DROPPED = "S"  # SAR only
    NONE = "M"  # both


DROP_ORDER = (DropMode.SAR_DROPPED, DropMode.OPTICAL_DROPPED, DropMode.NONE)


@dataclass(frozen=True)
class AugConfig:
    global_crop_size: int = 32
    local_crop_size: int = 16
    local_crop_count: int = 8
    global_scale_range: tuple[float, float] = (0.4, 1.0)
    local_scale_range: tuple[float, float] = (0.05, 0.4)
    ratio_range: tuple[float, float] = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 1.0)
    solarize_prob: float = 0.2
    solarize_threshold: float = 1.0
    solarize_max: float = 2.0
    # (p_drop_sar, p_drop_optical, p_keep_both)
    sensor_drop_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    optical_channels: tuple[int, int] = (0, 12)
    sar_channels: tuple[int, int] = (12, 14)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        probs = self.sensor_drop_probs
        if len(probs) != 3 or min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError(f"sensor_drop_probs must be 3 non-negative values summing to 1, got {probs}")
        o0, o1 = self.optical_channels
        s0, s1 = self.sar_channels
        if not (0 <= o0 < o1 and 0 <= s0 < s1):
            raise ConfigError("channel ranges must be non-empty")
        spans = sorted([(o0, o1), (s0, s1)])
        if spans[0][0] != 0 or spans[0][1] != spans[1][0]:
            raise ConfigError(f"optical {self.optical_channels} and SAR {self.sar_channels} must tile [0, C)")
        for name in ("global_scale_range", "local_scale_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi <= 1:
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        lo, hi = self.ratio_range
        if not 0 < lo <= hi:
            raise ConfigError(f"ratio_range must satisfy 0 < lo <= hi, got {(lo, hi)}")
        for name in ("hflip_prob", "jitter_prob", "grayscale_prob", "blur_prob", "solarize_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be a probability")
        if self.local_crop_count < 0 or self.global_crop_size < 1 or self.local_crop_size < 1:
            raise ConfigError("crop sizes must be positive and local_crop_count >= 0")
        if not 0 < self.blur_sigma_range[0] <= self.blur_sigma_range[1]:
            raise ConfigError(f"blur_sigma_range must be positive, got {self.blur_sigma_range}")

    @property
    def num_channels(self) -> int:
        return max(self.optical_channels[1], self.sar_channels[1])

    @property
    def num_views(self) -> int:
        return 2 + self.local_crop_count


@dataclass
class ViewRecord:
    image: np.ndarray
    is_global: bool
    drop_mode: DropMode
    crop: tuple[int, int, int, int, bool]  # x, y, w, h, flipped
    draws: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# geometric


def sample_crop_box(height: int, width: int, scale_range, ratio_range, rng: np.random.Generator):
    """Pick (x, y, w, h) the way torchvision's RandomResizedCrop does."""
    area = height * width
    log_lo, log_hi = math.log(ratio_range[0]), math.log(ratio_range[1])
    for _ in range(10):
        target = area * rng.uniform(scale_range[0], scale_range[1])
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            y = int(rng.integers(0, height - h + 1))
            x = int(rng.integers(0, width - w + 1))
            return x, y, w, h
    # fall back to a centred crop at the nearest admissible aspect ratio
    in_ratio = width / height
    if in_ratio < ratio_range[0]:
        w, h = width, int(round(width / ratio_range[0]))
    elif in_ratio > ratio_range[1]:
        h, w = height, int(round(height * ratio_range[1]))
    else:
        w, h = width, height
    return (width - w) // 2, (height - h) // 2, w, h


def crop_resize(img: np.ndarray, box, out_size: int) -> np.ndarray:
    x, y, w, h = box
    src_h, src_w = img.shape[-2:]
    rows = bilinear_matrix(src_h, out_size, y, h)
    cols = bilinear_matrix(src_w, out_size, x, w)
    return rows @ img @ cols.T


def random_resized_crop(img, scale_range, out_size: int, rng: np.random.Generator, ratio_range=(3 / 4, 4 / 3)):
    img = np.asarray(img, dtype=np.float64)
    if min(img.shape[-2:]) < 2:
        raise InputError(f"cannot crop an image of spatial size {img.shape[-2:]}")
    box = sample_crop_box(img.shape[-2], img.shape[-1], scale_range, ratio_range, rng)
    return crop_resize(img, box, out_size)


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[..., ::-1])


# ---------------------------------------------------------------------------
# photometric


def channel_jitter(img: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    c = img.shape[0]
    gain = rng.uniform(1.0 - strength, 1.0 + strength, size=c)
    offset = rng.uniform(-strength, strength, size=c)
    return img * gain[:, None, None] + offset[:, None, None]


def channel_grayscale(img: np.ndarray) -> np.ndarray:
    return np.broadcast_to(img.mean(axis=0, keepdims=True), img.shape).copy()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    h, w = img.shape[-2:]
    return gaussian_matrix(h, sigma) @ img @ gaussian_matrix(w, sigma).T


def solarize(img: np.ndarray, threshold: float, max_val: float) -> np.ndarray:
    return np.where(img >= threshold, max_val - img, img)


# ---------------------------------------------------------------------------
# sensor drop


def apply_drop(img: np.ndarray, mode: DropMode, config: AugConfig) -> np.ndarray:
    """Zero one modality; channel axis is third from last, so batches work too."""
    mode = DropMode(mode)
    if mode is DropMode.NONE:
        return img
    lo, hi = config.sar_channels if mode is DropMode.SAR_DROPPED else config.optical_channels
    out = np.array(img, dtype=np.float64)
    out[..., lo:hi, :, :] = 0.0
    return out


def sample_drop_mode(config: AugConfig, rng: np.random.Generator) -> DropMode:
    u = rng.random()
    p_sar, p_opt, _ = config.sensor_drop_probs
    if u < p_sar:
        return DropMode.SAR_DROPPED
    if u < p_sar + p_opt:
        return DropMode.OPTICAL_DROPPED
    return DropMode.NONE


def random_sensor_drop(img: np.ndarray, config: AugConfig, rng: np.random.Generator):
    mode = sample_drop_mode(config, rng)
    return apply_drop(img, mode, config), mode


# ---------------------------------------------------------------------------
# full chain


def augment_view(img: np.ndarray, config: AugConfig, rng: np.random.Generator, is_global: bool) -> ViewRecord:
    size = config.global_crop_size if is_global else config.local_crop_size
    scale = config.global_scale_range if is_global else config.local_scale_range
    draws = []
    x, y, w, h = sample_crop_box(img.shape[-2], img.shape[-1], scale, config.ratio_range, rng)
    out = crop_resize(img, (x, y, w, h), size)
    flip = bool(rng.random() < config.hflip_prob)
    draws.append(("crop", (x, y, w, h)))
    if flip:
        out = hflip(out)
    if rng.random() < config.jitter_prob:
        out = channel_jitter(out, config.jitter_strength, rng)
        draws.append(("jitter", True))
    if rng.random() < config.grayscale_prob:
        out = channel_grayscale(out)
        draws.append(("grayscale", True))
    if rng.random() < config.blur_prob:
        sigma = float(rng.uniform(*config.blur_sigma_range))
        out = gaussian_blur(out, sigma)
        draws.append(("blur", sigma))
    if rng.random() < config.solarize_prob:
        out = solarize(out, config.solarize_threshold, config.solarize_max)
        draws.append(("solarize", True))
    out, mode = random_sensor_drop(out, config, rng)
    draws.append(("drop", mode.value))
    return ViewRecord(out, is_global, mode, (x, y, w, h, flip), draws)


def make_views(sample, config: AugConfig, rng: np.random.Generator) -> list[ViewRecord]:
    """2 global crops followed by ``local_crop_count`` local crops of one sample."""
    pixels = np.asarray(getattr(sample, "pixels", sample), dtype=np.float64)
    if pixels.ndim != 3 or pixels.shape[0] != config.num_channels:
        raise DimensionError(f"sample of shape {pixels.shape} does not match {config.num_channels} channels")
    if min(pixels.shape[-2:]) < 2:
        raise InputError(f"cannot crop an image of spatial size {pixels.shape[-2:]}")
    views = [augment_view(pixels, config, rng, True) for _ in range(2)]
    views += [augment_view(pixels, config, rng, False) for _ in range(config.local_crop_count)]
    return views


def view_rng(seed: int, epoch: int, sample_id: int) -> np.random.Generator:
    """Counter-based stream dedicated to one (sample, epoch)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch, sample_id])))
