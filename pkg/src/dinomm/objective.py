"""Self-distillation objective: centring, sharpening, multi-view cross-entropy, EMAs.

The center ``c`` is stored exactly as the EMA of raw teacher batch means and
is *subtracted* from teacher logits before the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParameterError
from .tensor import Tensor


@dataclass
class Center:
    c: np.ndarray
    momentum: float = 0.9

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.c.ndim != 1:
            raise DimensionError(f"center must be a vector, got shape {self.c.shape}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ParameterError(f"center momentum must lie in [0, 1], got {self.momentum}")

    @classmethod
    def zeros(cls, k: int, momentum: float = 0.9) -> "Center":
        return cls(np.zeros(k), momentum)


@dataclass(frozen=True)
class Temperatures:
    tau_s: float
    tau_t: float

    def __post_init__(self):
        if not (self.tau_s > 0 and self.tau_t > 0):
            raise ParameterError(f"temperatures must be positive, got {self.tau_s}, {self.tau_t}")
        if not self.tau_t < self.tau_s:
            raise ParameterError(f"teacher temperature {self.tau_t} must be below student {self.tau_s}")


@dataclass
class DinoState:
    student: dict
    teacher: dict
    center: Center
    temperatures: Temperatures
    teacher_momentum: float = 0.996
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_same_keys(self.student, self.teacher)


def _check_same_keys(a: Mapping, b: Mapping) -> None:
    if a.keys() != b.keys():
        missing = sorted(set(a) ^ set(b))
        raise ContractError(f"student/teacher parameter keys differ: {missing[:5]}")
    for k in a:
        if np.shape(a[k]) != np.shape(b[k]):
            raise ContractError(f"shape mismatch for {k}: {np.shape(a[k])} vs {np.shape(b[k])}")


def _raw(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def teacher_probs(logits, center: Center, tau_t: float) -> Tensor:
    """softmax((logits - c) / tau_t); refuses logits still attached to a graph."""
    if isinstance(logits, Tensor) and logits.requires_grad:
        raise ContractError("teacher logits must be detached before computing targets")
    z = _raw(logits)
    if z.shape[-1] != center.c.shape[0]:
        raise DimensionError(f"logits have {z.shape[-1]} outputs, center has {center.c.shape[0]}")
    return T.softmax(z - center.c, temperature=tau_t, axis=-1)


def view_pairs(n_teacher: int, n_student: int) -> list[tuple[int, int]]:
    """(teacher view, student view) pairs, skipping a view compared with itself."""
    return [(t, s) for t in range(n_teacher) for s in range(n_student) if s != t]


def dino_loss(
    student_logits: Sequence[Tensor],
    teacher_logits: Sequence,
    temps: Temperatures,
    center: Center,
) -> Tensor:
    """Mean over view pairs of the batch-mean cross-entropy H(P_teacher, P_student)."""
    pairs = view_pairs(len(teacher_logits), len(student_logits))
    if not pairs:
        raise ContractError("dino_loss: no (teacher, student) view pairs to compare")
    targets = [teacher_probs(t, center, temps.tau_t).data for t in teacher_logits]
    log_ps = [T.log_softmax(s, temperature=temps.tau_s, axis=-1) for s in student_logits]
    total = None
    for t, s in pairs:
        ce = T.mean(T.tsum(T.mul(targets[t], log_ps[s]), axis=-1))
        total = ce if total is None else total + ce
    return total * (-1.0 / len(pairs))


def update_center(center: Center, teacher_logits_batch) -> Center:
    """c <- m c + (1 - m) * mean of the raw teacher outputs over the batch."""
    z = _raw(teacher_logits_batch)
    if z.ndim != 2 or z.shape[1] != center.c.shape[0]:
        raise DimensionError(f"teacher batch {z.shape} does not match center of size {center.c.shape[0]}")
    m = center.momentum
    return Center(m * center.c + (1.0 - m) * z.mean(axis=0), m)


def ema_params(teacher: Mapping[str, np.ndarray], student: Mapping[str, np.ndarray], lam: float) -> dict:
    _check_same_keys(teacher, student)
    return {k: lam * np.asarray(teacher[k]) + (1.0 - lam) * _raw(student[k]) for k in teacher}


def update_teacher(state: DinoState, lam: float) -> DinoState:
    """theta_t <- lam * theta_t + (1 - lam) * theta_s for every parameter."""
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"teacher momentum must lie in [0, 1], got {lam}")
    return replace(state, teacher=ema_params(state.teacher, state.student, lam), teacher_momentum=lam)


def entropy(probs: np.ndarray) -> float:
    """Mean per-row Shannon entropy in nats."""
    p = np.asarray(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=-1)
    return float(h.mean())
