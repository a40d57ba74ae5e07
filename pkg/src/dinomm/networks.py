"""ViT encoder and DINO projection head on top of the autodiff core.

Parameters live in a flat ``dict`` from dotted path to float64 array, e.g.
``blocks.0.attn.qkv.weight``. Linear weights are stored ``[out, in]``.
Forward functions accept either raw arrays (treated as constants) or
Tensors (so a training step can mark the student's leaves as differentiable).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .resample import bilinear_matrix
from .tensor import Tensor

ParameterSet = dict  # str -> np.ndarray
Params = Mapping[str, Union[np.ndarray, Tensor]]


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    in_channels: int = 14
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    head_hidden_dim: int = 128
    head_bottleneck_dim: int = 64
    # linear layers in the head, counting the weight-normalised output layer;
    # 1 means l2-normalise the representation and project
    head_layers: int = 4
    out_dim: int = 256
    ln_eps: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("image_size", "patch_size", "in_channels", "embed_dim", "depth", "num_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.head_layers < 1:
            raise ConfigError(f"head_layers must be >= 1, got {self.head_layers}")
        if self.out_dim < 2:
            raise ConfigError(f"out_dim must be >= 2, got {self.out_dim}")
        if self.mlp_ratio <= 0 or self.ln_eps <= 0:
            raise ConfigError("mlp_ratio and ln_eps must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @classmethod
    def full_scale(cls, in_channels: int = 14) -> "ViTConfig":
        """ViT-S/8 with a 3-layer 2048-wide MLP head and 65,536 outputs."""
        return cls(image_size=120, patch_size=8, in_channels=in_channels, embed_dim=384, depth=12,
                   num_heads=6, head_hidden_dim=2048, head_bottleneck_dim=256, head_layers=4,
                   out_dim=65536)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _head_dims(cfg: ViTConfig) -> list[tuple[int, int]]:
    """(in, out) for the MLP part of the head, excluding the output layer."""
    n = cfg.head_layers - 1
    if n == 0:
        return []
    if n == 1:
        return [(cfg.embed_dim, cfg.head_bottleneck_dim)]
    dims = [cfg.embed_dim] + [cfg.head_hidden_dim] * (n - 1) + [cfg.head_bottleneck_dim]
    return list(zip(dims[:-1], dims[1:]))


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    # resample anything beyond two standard deviations
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(config: ViTConfig, seed: int) -> ParameterSet:
    config.validate()
    rng = np.random.default_rng(seed)
    d, p = config.embed_dim, config.patch_size
    params: ParameterSet = {}

    def linear(name, n_in, n_out):
        params[f"{name}.weight"] = _trunc_normal(rng, (n_out, n_in))
        params[f"{name}.bias"] = np.zeros(n_out)

    def norm(name, n):
        params[f"{name}.weight"] = np.ones(n)
        params[f"{name}.bias"] = np.zeros(n)

    linear("patch_embed", config.in_channels * p * p, d)
    params["cls_token"] = np.zeros((1, 1, d))
    params["pos_embed"] = np.zeros((1, 1 + config.grid**2, d))
    for i in range(config.depth):
        pre = f"blocks.{i}"
        norm(f"{pre}.norm1", d)
        linear(f"{pre}.attn.qkv", d, 3 * d)
        linear(f"{pre}.attn.proj", d, d)
        norm(f"{pre}.norm2", d)
        linear(f"{pre}.mlp.fc1", d, config.mlp_hidden)
        linear(f"{pre}.mlp.fc2", config.mlp_hidden, d)
    norm("norm", d)
    dims = _head_dims(config)
    for j, (n_in, n_out) in enumerate(dims):
        linear(f"head.mlp.{j}", n_in, n_out)
    last_in = dims[-1][1] if dims else d
    params["head.last.weight"] = _trunc_normal(rng, (config.out_dim, last_in))
    return params


def copy_params(params: Mapping[str, np.ndarray]) -> ParameterSet:
    return {k: np.array(v, dtype=np.float64) for k, v in params.items()}


def as_leaves(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Fresh differentiable leaves for one forward/backward pass."""
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


def last_layer_weight(params: Params) -> np.ndarray:
    """The effective output-layer weight: unit-norm rows of the stored direction."""
    v = np.asarray(params["head.last.weight"].data if isinstance(params["head.last.weight"], Tensor)
                   else params["head.last.weight"])
    return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)


# ---------------------------------------------------------------------------
# building blocks


def _t(x) -> Tensor:
    return T.as_tensor(x)


def linear(x: Tensor, weight, bias=None) -> Tensor:
    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x
    out = T.matmul(flat, T.transpose(_t(weight)))
    if bias is not None:
        out = out + _t(bias)
    return out.reshape(*lead, out.shape[-1]) if x.ndim != 2 else out


def patchify(images, patch_size: int) -> Tensor:
    """[B, C, W, H] -> [B, N, C*p*p]; patches row-major, channel-major inside."""
    images = _t(images)
    if images.ndim != 4:
        raise DimensionError(f"patchify expects [B, C, W, H], got {images.shape}")
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image extents {h}x{w} are not divisible by patch size {p}")
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // p) * (w // p), c * p * p)


def unpatchify(patches, patch_size: int, channels: int, height: int, width: int) -> Tensor:
    patches = _t(patches)
    b = patches.shape[0]
    p = patch_size
    x = patches.reshape(b, height // p, width // p, channels, p, p)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, height, width)


def interpolate_pos_embed(pos, target_grid: int) -> Tensor:
    """Bilinearly resample the grid part of [1, 1+G*G, D] position embeddings."""
    pos = _t(pos)
    n = pos.shape[1] - 1
    g = math.isqrt(n)
    if g * g != n or n < 1:
        raise DimensionError(f"position embedding grid of length {n} is not square")
    if target_grid < 1:
        raise DimensionError(f"target grid must be >= 1, got {target_grid}")
    if target_grid == g:
        return pos
    r = bilinear_matrix(g, target_grid)
    weights = np.kron(r, r)
    grid = T.matmul(weights, pos[:, 1:, :])
    return T.concat([pos[:, :1, :], grid], axis=1)


def attention(x: Tensor, params: Params, prefix: str, num_heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // num_heads
    qkv = linear(x, params[f"{prefix}.qkv.weight"], params[f"{prefix}.qkv.bias"])
    qkv = qkv.reshape(b, n, 3, num_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    out = T.matmul(T.softmax(scores, axis=-1), v)
    out = out.transpose(0, 2, 1, 3).reshape(b, n, d)
    return linear(out, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])


def block(x: Tensor, params: Params, prefix: str, cfg: ViTConfig) -> Tensor:
    h = T.layer_norm(x, params[f"{prefix}.norm1.weight"], params[f"{prefix}.norm1.bias"], cfg.ln_eps)
    x = x + attention(h, params, f"{prefix}.attn", cfg.num_heads)
    h = T.layer_norm(x, params[f"{prefix}.norm2.weight"], params[f"{prefix}.norm2.bias"], cfg.ln_eps)
    h = T.gelu(linear(h, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"]))
    return x + linear(h, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])


# ---------------------------------------------------------------------------
# f, h and g = h o f


def embed_tokens(params: Params, images: Tensor, config: ViTConfig) -> Tensor:
    """[classification token; patch embeddings] plus (resampled) position embeddings."""
    b, _, h, _ = images.shape
    tokens = linear(patchify(images, config.patch_size), params["patch_embed.weight"], params["patch_embed.bias"])
    cls = T.add(np.zeros((b, 1, config.embed_dim)), _t(params["cls_token"]))
    x = T.concat([cls, tokens], axis=1)
    return x + interpolate_pos_embed(params["pos_embed"], h // config.patch_size)


def encode(params: Params, images, config: ViTConfig) -> Tensor:
    """Backbone: images [B, C, W, H] -> classification-token state [B, embed_dim]."""
    images = _t(images)
    if images.ndim != 4:
        raise DimensionError(f"encode expects [B, C, W, H], got {images.shape}")
    b, c, h, w = images.shape
    if c != config.in_channels:
        raise DimensionError(f"expected {config.in_channels} channels, got {c}")
    if h != w:
        raise DimensionError(f"encode expects square images, got {h}x{w}")
    x = embed_tokens(params, images, config)
    for i in range(config.depth):
        x = block(x, params, f"blocks.{i}", config)
    x = T.layer_norm(x, params["norm.weight"], params["norm.bias"], config.ln_eps)
    return x[:, 0, :]


def project(params: Params, rep, config: ViTConfig) -> Tensor:
    """Head: MLP -> l2 normalisation -> weight-normalised linear map to K logits."""
    z = _t(rep)
    dims = _head_dims(config)
    for j in range(len(dims)):
        z = linear(z, params[f"head.mlp.{j}.weight"], params[f"head.mlp.{j}.bias"])
        if j < len(dims) - 1:
            z = T.gelu(z)
    z = T.l2_normalize(z, axis=-1)
    direction = T.l2_normalize(_t(params["head.last.weight"]), axis=1)
    return T.matmul(z, T.transpose(direction))


def forward(params: Params, images, config: ViTConfig) -> Tensor:
    return project(params, encode(params, images, config), config)
