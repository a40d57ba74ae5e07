"""Self-supervised pre-training loop with AdamW and the DINO schedules."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .augment import AugConfig, make_views, view_rng
from .checkpoint import Checkpoint, save_checkpoint
from .data import ChannelStats, MultimodalDataset, apply_stats, batch_indices, channel_stats
from .errors import ConfigError, ContractError, DimensionError, NumericDomainError
from .networks import ViTConfig, as_leaves, copy_params, forward, init_params
from .objective import Center, Temperatures, dino_loss, ema_params, entropy, teacher_probs, update_center

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    base_lr: float = 5e-4
    warmup_epochs: int = 2
    final_lr: float = 1e-6
    weight_decay: float = 0.04
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    tau_s: float = 0.1
    tau_t_start: float = 0.04
    tau_t_end: float = 0.07
    tau_t_warmup_epochs: int = 6
    center_momentum: float = 0.9
    # initial center is center_offset * linspace(0, 1, K); nonzero only for ablations
    center_offset: float = 0.0
    teacher_momentum_start: float = 0.996
    teacher_momentum_end: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if not 0 <= self.tau_t_warmup_epochs:
            raise ConfigError("tau_t_warmup_epochs must be >= 0")
        for name in ("base_lr", "final_lr", "tau_s", "tau_t_start", "tau_t_end", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not (self.tau_t_start < self.tau_s and self.tau_t_end < self.tau_s):
            raise ConfigError("teacher temperatures must stay below tau_s")
        if not 0 <= self.center_momentum <= 1:
            raise ConfigError("center_momentum must lie in [0, 1]")
        if not 0 <= self.teacher_momentum_start <= self.teacher_momentum_end <= 1:
            raise ConfigError("teacher momentum must satisfy 0 <= start <= end <= 1")
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        """100 epochs, batch 256, 10 warmup epochs to 5e-4, tau_t 0.04 -> 0.07 over 30 epochs."""
        return cls(epochs=100, batch_size=256, base_lr=5e-4, warmup_epochs=10, tau_t_warmup_epochs=30)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------------------
# schedules


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to final_lr at the last step."""
    total = config.epochs * steps_per_epoch
    if not 0 <= step < total:
        raise ContractError(f"step {step} outside [0, {total})")
    warm = config.warmup_epochs * steps_per_epoch
    if step < warm:
        return config.base_lr * step / warm
    progress = (step - warm) / max(1, total - 1 - warm)
    return config.final_lr + 0.5 * (config.base_lr - config.final_lr) * (1.0 + math.cos(math.pi * progress))


def tau_t_at(epoch: int, config: TrainConfig) -> float:
    w = config.tau_t_warmup_epochs
    if epoch >= w:
        return config.tau_t_end
    return config.tau_t_start + (config.tau_t_end - config.tau_t_start) * epoch / w


def teacher_momentum_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Cosine ramp from teacher_momentum_start to teacher_momentum_end over all steps."""
    total = config.epochs * steps_per_epoch
    if total <= 1:
        return config.teacher_momentum_end
    start, end = config.teacher_momentum_start, config.teacher_momentum_end
    return end - (end - start) * (math.cos(math.pi * step / (total - 1)) + 1.0) / 2.0


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


def decay_mask(params: Mapping[str, np.ndarray]) -> dict[str, bool]:
    """Weight decay on matrix weights only; the weight-normalised head direction is exempt."""
    return {k: k.endswith(".weight") and np.ndim(v) >= 2 and k != "head.last.weight" for k, v in params.items()}


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], moments: AdamState,
               lr: float, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8,
               mask: Mapping[str, bool] | None = None) -> tuple[dict, AdamState]:
    if params.keys() != grads.keys() or params.keys() != moments.m.keys():
        raise ContractError("adamw_step: params, grads and moments must share keys")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericDomainError(f"non-finite gradient for parameter {k}")
    b1, b2 = betas
    t = moments.t + 1
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if mask is None or mask[k]:
            p = p * (1.0 - lr * weight_decay)
        m = b1 * moments.m[k] + (1.0 - b1) * g
        v = b2 * moments.v[k] + (1.0 - b2) * g * g
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# training loop


class TrainingDiverged(NumericDomainError):
    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict] = field(default_factory=list)


def run_configs(vit: ViTConfig, aug: AugConfig, train: TrainConfig) -> dict:
    a = dataclasses.asdict(aug)
    return {"vit": vit.to_dict(), "aug": json.loads(json.dumps(a)), "train": train.to_dict()}


def initial_checkpoint(vit: ViTConfig, aug: AugConfig, cfg: TrainConfig, stats: ChannelStats) -> Checkpoint:
    student = init_params(vit, cfg.seed)
    adam = AdamState.zeros_like(student)
    center = cfg.center_offset * np.linspace(0.0, 1.0, vit.out_dim)
    return Checkpoint(student=student, teacher=copy_params(student), adam_m=adam.m, adam_v=adam.v,
                      adam_t=0, center=center, center_momentum=cfg.center_momentum, step=0,
                      configs=run_configs(vit, aug, cfg), stats_mean=stats.mean, stats_std=stats.std)


def stack_views(batch: MultimodalDataset, aug: AugConfig, seed: int, epoch: int):
    """View-major stacks: globals [2B, C, g, g] and locals [L*B, C, l, l]."""
    per_sample = [make_views(batch[i], aug, view_rng(seed, epoch, int(batch.ids[i]))) for i in range(len(batch))]
    glob = np.stack([s[v].image for v in range(2) for s in per_sample])
    local = None
    if aug.local_crop_count:
        local = np.stack([s[v].image for v in range(2, aug.num_views) for s in per_sample])
    return glob, local, per_sample


def _split(x: T.Tensor, n: int) -> list[T.Tensor]:
    b = x.shape[0] // n
    return [x[i * b:(i + 1) * b] for i in range(n)]


def train(dataset: MultimodalDataset, vit: ViTConfig, aug: AugConfig, cfg: TrainConfig, *,
          resume: Checkpoint | None = None, stop_after: int | None = None,
          checkpoint_path=None, metrics_path=None, checkpoint_every: int | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Pre-train a student/teacher pair; deterministic given ``cfg.seed``.

    ``stop_after`` ends the run after that many steps *in this call* (used to
    emulate an interruption); the checkpoint then resumes exactly.
    """
    if dataset.c_total != aug.num_channels or dataset.c_total != vit.in_channels:
        raise DimensionError(f"dataset has {dataset.c_total} channels; aug expects {aug.num_channels}, "
                             f"vit expects {vit.in_channels}")
    if (0, dataset.c_optical) != tuple(aug.optical_channels):
        raise DimensionError(f"dataset optical split {dataset.c_optical} does not match aug {aug.optical_channels}")
    configs = run_configs(vit, aug, cfg)
    if resume is None:
        ckpt = initial_checkpoint(vit, aug, cfg, channel_stats(dataset))
    else:
        resume.check_configs(configs)
        ckpt = resume
    stats = ChannelStats(ckpt.stats_mean, ckpt.stats_std)
    data = apply_stats(dataset, stats)

    spe = math.ceil(len(data) / cfg.batch_size)
    total = cfg.epochs * spe
    student, teacher = copy_params(ckpt.student), copy_params(ckpt.teacher)
    adam = AdamState(copy_params(ckpt.adam_m), copy_params(ckpt.adam_v), ckpt.adam_t)
    center = Center(np.array(ckpt.center), ckpt.center_momentum)
    mask = decay_mask(student)
    metrics: list[dict] = []
    metrics_file = open(metrics_path, "a") if metrics_path else None

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(student=copy_params(student), teacher=copy_params(teacher), adam_m=copy_params(adam.m),
                          adam_v=copy_params(adam.v), adam_t=adam.t, center=center.c.copy(),
                          center_momentum=center.momentum, step=step, configs=configs,
                          stats_mean=stats.mean, stats_std=stats.std, meta={"total_steps": total})

    step = ckpt.step
    done = 0
    order = None
    order_epoch = -1
    try:
        while step < total and (stop_after is None or done < stop_after):
            epoch, pos = divmod(step, spe)
            if epoch != order_epoch:
                order, order_epoch = batch_indices(len(data), cfg.batch_size, cfg.seed, epoch), epoch
            batch = data.subset(order[pos])
            b = len(batch)
            glob, local, _ = stack_views(batch, aug, cfg.seed, epoch)
            tau_t = tau_t_at(epoch, cfg)
            temps = Temperatures(cfg.tau_s, tau_t)

            leaves = as_leaves(student)
            s_logits = _split(forward(leaves, glob, vit), 2)
            if local is not None:
                s_logits += _split(forward(leaves, local, vit), aug.local_crop_count)
            with T.no_grad():
                t_all = forward(teacher, glob, vit)
            t_logits = _split(t_all, 2)
            loss = dino_loss(s_logits, t_logits, temps, center)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                last = snapshot(step)
                if checkpoint_path:
                    save_checkpoint(last, checkpoint_path)
                raise TrainingDiverged(f"non-finite loss at step {step}", last)
            T.backward(loss)
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

            lr = lr_at(step, cfg, spe)
            student, adam = adamw_step(student, grads, adam, lr, cfg.weight_decay, cfg.betas, cfg.adam_eps, mask)
            lam = teacher_momentum_at(step, cfg, spe)
            teacher = ema_params(teacher, student, lam)
            t_entropy = entropy(teacher_probs(t_all.data, center, tau_t).data)
            center = update_center(center, t_all.data)

            record = {"step": step, "epoch": epoch, "loss": loss_val, "lr": lr, "tau_t": tau_t,
                      "teacher_momentum": lam, "teacher_entropy": t_entropy, "batch_size": b}
            metrics.append(record)
            if metrics_file:
                metrics_file.write(json.dumps(record) + "\n")
                metrics_file.flush()
            if on_step:
                on_step(record)
            step += 1
            done += 1
            if checkpoint_path and checkpoint_every and step % checkpoint_every == 0:
                save_checkpoint(snapshot(step), checkpoint_path)
            if pos == spe - 1:
                log.info("epoch %d  loss %.4f  teacher entropy %.3f", epoch, loss_val, t_entropy)
    finally:
        if metrics_file:
            metrics_file.close()
    final = snapshot(step)
    if checkpoint_path:
        save_checkpoint(final, checkpoint_path)
    return TrainResult(final, metrics)


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
