"""Finite-difference checks for every differentiable op and the full model.

Ops are looked up on the ``tensor`` module at call time, so a patched op is
what gets checked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import networks as N
from . import objective as O
from . import tensor as T

OP_TOLERANCE = 1e-5
COMPOSITE_TOLERANCE = 1e-4

TINY = N.ViTConfig(image_size=8, patch_size=4, in_channels=4, embed_dim=8, depth=1, num_heads=2, mlp_ratio=2.0,
                   head_hidden_dim=8, head_bottleneck_dim=4, head_layers=3, out_dim=6)


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _n(shape):
    return lambda r: r.normal(size=shape)


# name -> (function of the checked input and a seeded rng, input sampler)
OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda x, r: T.add(x, r.normal(size=(1, 4))), _n((3, 4))),
    "sub": (lambda x, r: T.sub(r.normal(size=(4,)), x), _n((3, 4))),
    "mul": (lambda x, r: T.mul(x, T.exp(x)), _n((3, 4))),
    "div": (lambda x, r: T.div(x, T.add(T.mul(x, x), 1.0)), _n((5,))),
    "exp": (lambda x, r: T.exp(x), _n((5,))),
    "log": (lambda x, r: T.log(x), lambda r: r.uniform(0.5, 2.0, size=(5,))),
    "gelu": (lambda x, r: T.gelu(x), _n((3, 4))),
    "sum": (lambda x, r: T.tsum(x, axis=1, keepdims=True), _n((2, 3, 2))),
    "mean": (lambda x, r: T.mean(x, axis=0), _n((3, 4))),
    "matmul": (lambda x, r: T.matmul(x, r.normal(size=(4, 2))), _n((2, 3, 4))),
    "matmul_right": (lambda x, r: T.matmul(r.normal(size=(2, 3, 4)), x), _n((4, 2))),
    "softmax": (lambda x, r: T.softmax(x, 0.3, axis=-1), _n((2, 5))),
    "log_softmax": (lambda x, r: T.log_softmax(x, 0.1, axis=-1), _n((3, 4))),
    "layer_norm": (lambda x, r: T.layer_norm(x, r.normal(size=4), r.normal(size=4), 1e-6), _n((3, 4))),
    "layer_norm_gain": (lambda g, r: T.layer_norm(r.normal(size=(3, 4)), g, np.zeros(4), 1e-6), _n((4,))),
    "l2_normalize": (lambda x, r: T.l2_normalize(x, axis=-1), _n((3, 4))),
    "reshape": (lambda x, r: T.reshape(x, (6, 2)), _n((3, 4))),
    "transpose": (lambda x, r: T.transpose(x, (2, 0, 1)), _n((2, 3, 4))),
    "getitem": (lambda x, r: T.getitem(x, (slice(1, None), slice(None, None, 2))), _n((3, 4))),
    "concat": (lambda x, r: T.concat([x, T.mul(x, 2.0)], axis=1), _n((2, 3))),
}


def check_op(name: str, seed: int, step: float = 1e-5) -> float:
    fn, sample = OPS[name]
    rng = np.random.default_rng([seed, 0x6C])
    x = sample(rng)

    # constants inside fn are redrawn identically on every evaluation
    def op(t):
        return fn(t, np.random.default_rng([seed, 0xC0]))

    w = rng.normal(size=op(T.Tensor(x)).shape)
    return T.grad_check(lambda t: T.tsum(T.mul(op(t), w)), x, step)


def composite_loss(config: N.ViTConfig, seed: int):
    """Tiny ViT + head + DINO loss as a function of the student parameters."""
    rng = np.random.default_rng([seed, 0xD1])
    views = [rng.normal(size=(2, config.in_channels, config.image_size, config.image_size)) for _ in range(3)]
    teacher = [rng.normal(size=(2, config.out_dim)) for _ in range(2)]
    center = O.Center(rng.normal(0, 0.1, config.out_dim))
    temps = O.Temperatures(0.1, 0.04)

    def loss(params):
        logits = [N.forward(params, v, config) for v in views]
        return O.dino_loss(logits, teacher, temps, center)

    return loss


def check_composite(seed: int, step: float = 1e-5, max_coords: int = 3) -> float:
    rng = np.random.default_rng([seed, 0xA5])
    # leave the symmetric zero init so every path carries gradient
    params = {k: v + rng.normal(0, 0.05, v.shape) for k, v in N.init_params(TINY, seed).items()}
    return T.parameters_grad_check(composite_loss(TINY, seed), params, step, max_coords=max_coords, seed=seed)


def run_suite(seeds=range(10), tolerance: float = OP_TOLERANCE,
              composite_tolerance: float = COMPOSITE_TOLERANCE, ops=None) -> list[CheckResult]:
    seeds = list(seeds)
    results = []
    for name in ops or sorted(OPS):
        t0 = time.perf_counter()
        err = max(check_op(name, s) for s in seeds)
        results.append(CheckResult(name, err, tolerance, len(seeds), time.perf_counter() - t0))
    t0 = time.perf_counter()
    err = max(check_composite(s) for s in seeds)
    results.append(CheckResult("vit+head+dino_loss", err, composite_tolerance, len(seeds), time.perf_counter() - t0))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<22} max rel err {r.max_error:.3e}  (tol {r.tolerance:.0e})  {status}")
    return "\n".join(lines)
