import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dinomm import networks as N
from dinomm import tensor as T
from dinomm.errors import ConfigError, DimensionError

TINY = N.ViTConfig(image_size=8, patch_size=4, in_channels=4, embed_dim=8, depth=1, num_heads=2,
                   mlp_ratio=2.0, head_hidden_dim=8, head_bottleneck_dim=4, head_layers=3, out_dim=5)


def expected_keys(cfg: N.ViTConfig) -> set[str]:
    keys = {"patch_embed.weight", "patch_embed.bias", "cls_token", "pos_embed", "norm.weight", "norm.bias",
            "head.last.weight"}
    for i in range(cfg.depth):
        for part in ("norm1", "attn.qkv", "attn.proj", "norm2", "mlp.fc1", "mlp.fc2"):
            keys |= {f"blocks.{i}.{part}.weight", f"blocks.{i}.{part}.bias"}
    for j in range(cfg.head_layers - 1):
        keys |= {f"head.mlp.{j}.weight", f"head.mlp.{j}.bias"}
    return keys


def test_init_is_deterministic():
    a, b = N.init_params(N.ViTConfig(), 7), N.init_params(N.ViTConfig(), 7)
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_init_differs_across_seeds():
    a, b = N.init_params(TINY, 0), N.init_params(TINY, 1)
    assert not np.array_equal(a["patch_embed.weight"], b["patch_embed.weight"])


def test_desk_key_set_matches_config():
    cfg = N.ViTConfig(embed_dim=64, depth=2)
    params = N.init_params(cfg, 0)
    assert set(params) == expected_keys(cfg)
    assert params["patch_embed.weight"].shape == (64, 14 * 8 * 8)
    assert params["pos_embed"].shape == (1, 1 + 16, 64)
    assert params["head.last.weight"].shape == (256, cfg.head_bottleneck_dim)


def test_init_distribution():
    params = N.init_params(N.ViTConfig(), 0)
    w = params["blocks.0.mlp.fc1.weight"]
    assert np.abs(w).max() <= 0.04 + 1e-12
    assert abs(w.std() - 0.02) < 0.003
    assert not params["pos_embed"].any() and not params["cls_token"].any()
    assert not params["blocks.0.attn.qkv.bias"].any()
    assert np.all(params["norm.weight"] == 1.0)


def test_same_config_gives_same_shapes():
    a, b = N.init_params(TINY, 0), N.init_params(TINY, 99)
    assert {k: v.shape for k, v in a.items()} == {k: v.shape for k, v in b.items()}


@pytest.mark.parametrize("kwargs", [dict(image_size=33, patch_size=8), dict(embed_dim=10, num_heads=4),
                                    dict(head_layers=0), dict(out_dim=1)])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        N.ViTConfig(**kwargs)


def test_full_scale_config_is_expressible():
    cfg = N.ViTConfig.full_scale()
    assert (cfg.embed_dim, cfg.patch_size, cfg.head_hidden_dim, cfg.out_dim) == (384, 8, 2048, 65536)


# ------------------------------------------------------------------ patchify


def test_patchify_pixel_order():
    img = np.arange(4.0).reshape(1, 1, 2, 2)
    out = N.patchify(img, 1).data
    assert out.shape == (1, 4, 1)
    assert out[0, :, 0].tolist() == [0.0, 1.0, 2.0, 3.0]


def test_patchify_channel_major_within_patch():
    img = np.arange(2 * 2 * 2.0).reshape(1, 2, 2, 2)
    out = N.patchify(img, 2).data
    assert out[0, 0].tolist() == [0, 1, 2, 3, 4, 5, 6, 7]


def test_patchify_shape():
    assert N.patchify(np.zeros((2, 14, 64, 64)), 8).shape == (2, 64, 896)


def test_patchify_indivisible():
    with pytest.raises(DimensionError):
        N.patchify(np.zeros((1, 1, 10, 10)), 4)


def test_unpatchify_round_trip():
    x = np.random.default_rng(0).normal(size=(2, 3, 16, 16))
    p = N.patchify(x, 4)
    assert np.array_equal(N.unpatchify(p, 4, 3, 16, 16).data, x)


# ---------------------------------------------------------- position embeds


def test_interpolate_identity():
    pos = np.random.default_rng(0).normal(size=(1, 1 + 9, 4))
    assert np.array_equal(N.interpolate_pos_embed(pos, 3).data, pos)


@pytest.mark.parametrize("target", [1, 2, 5, 7])
def test_interpolate_preserves_constants(target):
    pos = np.full((1, 1 + 16, 3), 2.5)
    pos[0, 0] = -1.0
    out = N.interpolate_pos_embed(pos, target).data
    assert out.shape == (1, 1 + target * target, 3)
    assert np.array_equal(out[0, 0], [-1.0] * 3)
    assert np.allclose(out[0, 1:], 2.5, atol=1e-14)


def test_interpolate_2x2_to_3x3_center():
    pos = np.zeros((1, 5, 1))
    pos[0, 1:, 0] = [0.0, 1.0, 2.0, 3.0]
    out = N.interpolate_pos_embed(pos, 3).data[0, 1:, 0].reshape(3, 3)
    # centre of 3x3 sits at (0.5, 0.5) on the source grid: mean of all four
    assert out[1, 1] == pytest.approx(1.5, abs=1e-15)
    assert out[0, 0] == pytest.approx(0.0, abs=1e-15)
    assert out[2, 2] == pytest.approx(3.0, abs=1e-15)


def test_interpolate_non_square():
    with pytest.raises(DimensionError):
        N.interpolate_pos_embed(np.zeros((1, 1 + 5, 2)), 2)


# -------------------------------------------------------------------- encode


def test_zero_input_tokens_identical():
    cfg = N.ViTConfig()
    params = N.init_params(cfg, 0)
    x = N.embed_tokens(params, T.Tensor(np.zeros((1, 14, 32, 32))), cfg).data
    patches = x[0, 1:]
    assert np.all(patches == patches[0])


def test_encode_shape_desk():
    cfg = N.ViTConfig()
    params = N.init_params(cfg, 0)
    x = np.random.default_rng(0).normal(size=(2, 14, 32, 32))
    assert N.encode(params, x, cfg).shape == (2, 64)


def test_encode_channel_mismatch():
    with pytest.raises(DimensionError):
        N.encode(N.init_params(TINY, 0), np.zeros((1, 3, 8, 8)), TINY)


def test_encode_input_gradient():
    params = N.init_params(TINY, 1)
    params["pos_embed"] = np.random.default_rng(2).normal(0, 0.1, params["pos_embed"].shape)
    x = np.random.default_rng(3).normal(size=(1, 4, 8, 8))
    assert T.grad_check(lambda t: T.mean(N.encode(params, t, TINY)), x, 1e-5) < 1e-4


def test_encode_batch_permutation_consistent():
    cfg = TINY
    params = N.init_params(cfg, 0)
    x = np.random.default_rng(0).normal(size=(5, 4, 8, 8))
    perm = np.array([3, 0, 4, 1, 2])
    a = N.encode(params, x, cfg).data
    b = N.encode(params, x[perm], cfg).data
    assert np.allclose(a[perm], b, rtol=0, atol=1e-13)


@given(size=st.sampled_from([4, 8, 12, 16, 24]))
@settings(max_examples=10, deadline=None)
def test_encode_any_square_multiple_of_patch(size):
    params = N.init_params(TINY, 0)
    x = np.random.default_rng(size).normal(size=(2, 4, size, size))
    assert N.encode(params, x, TINY).shape == (2, TINY.embed_dim)


def test_encode_deterministic():
    cfg = N.ViTConfig()
    params = N.init_params(cfg, 0)
    x = np.random.default_rng(0).normal(size=(2, 14, 16, 16))
    assert N.encode(params, x, cfg).data.tobytes() == N.encode(params, x, cfg).data.tobytes()


# ------------------------------------------------------------------- project


def test_project_output_shape():
    cfg = N.ViTConfig()
    params = N.init_params(cfg, 0)
    assert N.project(params, np.random.default_rng(0).normal(size=(3, 64)), cfg).shape == (3, 256)


def test_project_normalises_bottleneck():
    cfg = N.ViTConfig(embed_dim=4, num_heads=2, head_layers=1, out_dim=3)
    params = N.init_params(cfg, 0)
    rep = np.array([[3.0, 4.0, 0.0, 0.0]])
    w = params["head.last.weight"]
    w = w / np.linalg.norm(w, axis=1, keepdims=True)
    expected = np.array([[0.6, 0.8, 0.0, 0.0]]) @ w.T
    assert np.allclose(N.project(params, rep, cfg).data, expected, atol=1e-15)


def test_single_layer_head_is_scale_invariant():
    cfg = N.ViTConfig(head_layers=1)
    params = N.init_params(cfg, 0)
    rep = np.random.default_rng(1).normal(size=(4, 64))
    a = N.project(params, rep, cfg).data
    b = N.project(params, 10 * rep, cfg).data
    assert np.allclose(a, b, atol=1e-13)


def test_mlp_head_is_not_scale_invariant():
    cfg = N.ViTConfig()
    params = N.init_params(cfg, 0)
    rep = np.random.default_rng(1).normal(size=(4, 64))
    assert not np.allclose(N.project(params, rep, cfg).data, N.project(params, 10 * rep, cfg).data)


def test_last_layer_rows_unit_norm():
    params = N.init_params(N.ViTConfig(), 0)
    params["head.last.weight"] = params["head.last.weight"] * np.arange(1, 257)[:, None]
    assert np.allclose(np.linalg.norm(N.last_layer_weight(params), axis=1), 1.0, atol=1e-12)


def test_full_model_gradient_check():
    params = N.init_params(TINY, 0)
    rng = np.random.default_rng(5)
    # move off the symmetric zero init so every path carries gradient
    params = {k: v + rng.normal(0, 0.05, v.shape) for k, v in params.items()}
    x = rng.normal(size=(2, 4, 8, 8))
    target = rng.dirichlet(np.ones(TINY.out_dim), size=2)

    def loss(p):
        logits = N.forward(p, x, TINY)
        return T.mul(-1.0, T.mean(T.tsum(T.mul(target, T.log_softmax(logits, 0.1)), axis=-1)))

    assert T.parameters_grad_check(loss, params, 1e-5, max_coords=6) < 1e-4
