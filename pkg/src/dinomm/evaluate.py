"""Linear probing of a frozen teacher backbone and mean average precision."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import AugConfig, DropMode, apply_drop
from .checkpoint import Checkpoint
from .data import ChannelStats, MultimodalDataset, apply_stats, channel_stats
from .errors import ConfigError, ContractError, DimensionError
from .networks import ViTConfig, encode, init_params
from .resample import resize_2d


class Modality(str, enum.Enum):
    S1 = "S1"  # SAR only
    S2 = "S2"  # optical only
    S1S2 = "S1+S2"


_MODALITY_DROP = {Modality.S1: DropMode.OPTICAL_DROPPED, Modality.S2: DropMode.SAR_DROPPED,
                  Modality.S1S2: DropMode.NONE}


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    # tiny label subsets get one step per epoch; extend the run to at least this many steps
    min_steps: int = 1000
    label_fraction: float = 1.0
    modality: str = "S1+S2"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.label_fraction <= 1:
            raise ConfigError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        try:
            Modality(self.modality)
        except ValueError:
            raise ConfigError(f"unknown modality {self.modality!r}") from None
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs, batch_size and lr must be positive")
        if self.min_steps < 0:
            raise ConfigError(f"min_steps must be >= 0, got {self.min_steps}")


@dataclass
class ProbeResult:
    per_class_ap: list  # None for classes without positives
    mAP: float
    config: dict = field(default_factory=dict)
    modality: str = "S1+S2"

    def to_dict(self) -> dict:
        return {"mAP": self.mAP, "per_class_ap": self.per_class_ap, "modality": self.modality,
                "config": self.config}


# ---------------------------------------------------------------------------
# features


def mask_modality(pixels: np.ndarray, modality, aug: AugConfig) -> np.ndarray:
    """Zero the channels of the modality not selected (same code path as sensor drop)."""
    return apply_drop(pixels, _MODALITY_DROP[Modality(modality)], aug)


def extract_features(params, dataset: MultimodalDataset, modality, vit: ViTConfig, aug: AugConfig,
                     stats: ChannelStats | None = None, chunk: int = 128) -> np.ndarray:
    """Teacher-backbone features [n, embed_dim] with one modality optionally masked.

    Images are standardised with ``stats`` and resized to the backbone's
    native resolution; nothing is recorded for reverse accumulation.
    """
    if dataset.c_total != vit.in_channels:
        raise DimensionError(f"dataset has {dataset.c_total} channels, backbone expects {vit.in_channels}")
    modality = Modality(modality)
    lo, hi = aug.sar_channels if modality is Modality.S1 else aug.optical_channels
    if hi > dataset.c_total:
        raise ConfigError(f"modality {modality.value} channels {lo}:{hi} absent from dataset")
    data = apply_stats(dataset, stats) if stats is not None else dataset
    feats = []
    with T.no_grad():
        for i in range(0, len(data), chunk):
            px = resize_2d(data.pixels[i:i + chunk], vit.image_size, vit.image_size)
            px = mask_modality(px, modality, aug)
            feats.append(encode(params, px, vit).data)
    return np.concatenate(feats, axis=0) if feats else np.zeros((0, vit.embed_dim))


# ---------------------------------------------------------------------------
# probe


def soft_margin_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Multi-label soft-margin loss: mean over samples of the class-averaged BCE on logits."""
    y = labels.astype(np.float64)
    # -log sigma(z) = softplus(-z)
    per = y * np.logaddexp(0.0, -logits) + (1.0 - y) * np.logaddexp(0.0, logits)
    return float(per.mean())


def _soft_margin_grad(x: np.ndarray, y: np.ndarray, w: np.ndarray, b: np.ndarray):
    z = x @ w.T + b
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    dz = (sig - y) / z.size
    return dz.T @ x, dz.sum(axis=0)


@dataclass
class LinearProbe:
    weight: np.ndarray  # [C, D]
    bias: np.ndarray  # [C]
    mean: np.ndarray
    scale: np.ndarray
    losses: list = field(default_factory=list)

    def scores(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.mean) / self.scale) @ self.weight.T + self.bias

    def loss(self, features: np.ndarray, labels: np.ndarray) -> float:
        return soft_margin_loss(self.scores(features), labels)


def stratified_subset(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """max(1, round(fraction*n)) sample indices, seeded, stratified per class.

    Iterative multi-label stratification: the subset and the remainder each
    want a share of every class's positives proportional to their size. The
    class with the fewest unassigned positives is settled first, each of its
    samples going to whichever side still wants more of that class. Every
    class with positives asks for at least one in the subset.
    """
    labels = np.asarray(labels).astype(bool)
    n = len(labels)
    target = max(1, int(round(fraction * n)))
    if target >= n:
        return np.arange(n)
    rng = np.random.default_rng([seed, 0x1AB])
    order = rng.permutation(n)
    labels = labels[order]
    counts = labels.sum(axis=0).astype(float)
    want = np.stack([np.maximum(fraction * counts, np.minimum(counts, 1.0)), counts])
    want[1] -= want[0]
    room = np.array([target, n - target], dtype=float)
    side = np.full(n, -1)
    pending = labels.copy()
    while pending.any():
        remaining = pending.sum(axis=0)
        c = int(np.argmin(np.where(remaining > 0, remaining, n + 1)))
        for i in np.flatnonzero(pending[:, c]):
            if room[0] <= 0 or room[1] <= 0:
                s = int(room[1] > 0)
            elif want[0, c] != want[1, c]:
                s = int(want[1, c] > want[0, c])
            else:
                s = int(room[1] / (n - target) > room[0] / target)
            side[i] = s
            room[s] -= 1
            want[s] -= labels[i]
            pending[i] = False
    # unlabeled samples fill whatever room is left
    for i in np.flatnonzero(side < 0):
        s = int(room[0] <= 0)
        side[i] = s
        room[s] -= 1
    return np.sort(order[side == 0])


def train_probe(features: np.ndarray, labels: np.ndarray, config: ProbeConfig) -> LinearProbe:
    """SGD with momentum and a per-step cosine-decayed rate on the soft-margin loss.

    Runs ``config.epochs`` epochs, or more when that would be fewer than
    ``config.min_steps`` updates.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ContractError("probe features must be finite")
    n, d = x.shape
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    xs = (x - mean) / scale
    c = y.shape[1]
    w = np.zeros((c, d))
    b = np.zeros(c)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    rng = np.random.default_rng([config.seed, 0x9B0])
    spe = math.ceil(n / config.batch_size)
    epochs = max(config.epochs, math.ceil(config.min_steps / spe))
    total = epochs * spe
    losses = []
    step = 0
    for _ in range(epochs):
        perm = rng.permutation(n)
        for i in range(0, n, config.batch_size):
            idx = perm[i:i + config.batch_size]
            lr = 0.5 * config.lr * (1.0 + math.cos(math.pi * step / total))
            gw, gb = _soft_margin_grad(xs[idx], y[idx], w, b)
            vw = config.momentum * vw + gw
            vb = config.momentum * vb + gb
            w = w - lr * vw
            b = b - lr * vb
            step += 1
        losses.append(soft_margin_loss(xs @ w.T + b, y))
    return LinearProbe(w, b, mean, scale, losses)


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float | None:
    pos = int(labels.sum())
    if pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = labels[order].astype(np.float64)
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float((precision * hits).sum() / pos)


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> ProbeResult:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} must be equal 2-D shapes")
    aps = [average_precision(scores[:, c], labels[:, c]) for c in range(scores.shape[1])]
    valid = [a for a in aps if a is not None]
    if not valid:
        raise ContractError("no class has a positive label")
    return ProbeResult(aps, float(np.mean(valid)))


# ---------------------------------------------------------------------------
# end to end


def backbone_from(checkpoint: Checkpoint | None, vit: ViTConfig, seed: int = 0):
    """Teacher parameters of a checkpoint, or a fresh random initialisation."""
    if checkpoint is None:
        return init_params(vit, seed)
    return checkpoint.teacher


def evaluate(checkpoint: Checkpoint | None, train_set: MultimodalDataset, test_set: MultimodalDataset,
             probe: ProbeConfig, vit: ViTConfig, aug: AugConfig, init_seed: int = 0) -> ProbeResult:
    """Extract features, subsample training labels, fit the probe, score the test split."""
    if checkpoint is not None:
        stats = ChannelStats(checkpoint.stats_mean, checkpoint.stats_std)
    else:
        stats = channel_stats(train_set)
    params = backbone_from(checkpoint, vit, init_seed)
    idx = stratified_subset(train_set.labels, probe.label_fraction, probe.seed)
    sub = train_set.subset(idx)
    f_train = extract_features(params, sub, probe.modality, vit, aug, stats)
    f_test = extract_features(params, test_set, probe.modality, vit, aug, stats)
    clf = train_probe(f_train, sub.labels, probe)
    result = mean_average_precision(clf.scores(f_test), test_set.labels)
    result.config = dataclasses.asdict(probe)
    result.modality = probe.modality
    return result


def format_report(grid: dict[str, dict[tuple[str, float], float]]) -> str:
    """Rows are checkpoint tags; columns modality x label fraction."""
    fractions = sorted({f for row in grid.values() for _, f in row}, reverse=True)
    mods = [m.value for m in Modality if any(m.value == k[0] for row in grid.values() for k in row)]
    cols = [(m, f) for f in fractions for m in mods]
    head = ["model"] + [f"{m}@{f * 100:g}%" for m, f in cols]
    width = max(12, max(len(t) for t in grid) + 2)
    lines = ["".join(h.ljust(width) for h in head)]
    for tag, row in grid.items():
        cells = [f"{100 * row[c]:.1f}" if c in row else "--" for c in cols]
        lines.append("".join(x.ljust(width) for x in [tag] + cells))
    return "\n".join(lines)


def report_json(grid: dict[str, dict[tuple[str, float], float]]) -> str:
    rows = {tag: [{"modality": m, "label_fraction": f, "mAP": v} for (m, f), v in row.items()]
            for tag, row in grid.items()}
    return json.dumps(rows, indent=2, sort_keys=True)
