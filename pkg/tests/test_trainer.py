import math

import numpy as np
import pytest

from dinomm import checkpoint as C
from dinomm import data as D
from dinomm import networks as N
from dinomm import objective as O
from dinomm import trainer as TR
from dinomm.augment import AugConfig
from dinomm.errors import ConfigError, ContractError, FormatError, NumericDomainError

VIT = N.ViTConfig(image_size=16, patch_size=8, embed_dim=16, depth=1, num_heads=2, head_hidden_dim=16,
                  head_bottleneck_dim=8, out_dim=32)
AUG = AugConfig(global_crop_size=16, local_crop_size=8, local_crop_count=2)


def cfg(**kw):
    base = dict(epochs=2, batch_size=8, warmup_epochs=1, tau_t_warmup_epochs=1, base_lr=1e-3)
    base.update(kw)
    return TR.TrainConfig(**base)


@pytest.fixture(scope="module")
def ds():
    return D.generate_synthetic(20, num_classes=4, size=16, seed=0)


# --------------------------------------------------------------- schedules


def test_full_scale_warmup_end_is_base_lr():
    c = TR.TrainConfig.full_scale()
    spe = 1000
    warm = c.warmup_epochs * spe
    assert TR.lr_at(warm, c, spe) == pytest.approx(5e-4, abs=1e-18)
    # continuity: approaching from the warmup side
    assert TR.lr_at(warm - 1, c, spe) == pytest.approx(5e-4 * (warm - 1) / warm)


def test_lr_starts_at_zero_and_ends_at_final():
    c = cfg(epochs=4, warmup_epochs=1, final_lr=1e-6)
    assert TR.lr_at(0, c, 10) == 0.0
    assert TR.lr_at(39, c, 10) == pytest.approx(1e-6, abs=1e-18)


def test_lr_cosine_midpoint():
    c = cfg(epochs=4, warmup_epochs=1, base_lr=1e-3, final_lr=1e-5)
    # 5 steps per epoch: cosine runs from step 5 to the last step 19, midpoint 12
    assert TR.lr_at(12, c, 5) == pytest.approx((1e-3 + 1e-5) / 2, abs=1e-15)


def test_lr_out_of_range():
    c = cfg()
    with pytest.raises(ContractError):
        TR.lr_at(2 * 5, c, 5)
    with pytest.raises(ContractError):
        TR.lr_at(-1, c, 5)


def test_tau_t_schedule_full_scale():
    c = TR.TrainConfig.full_scale()
    assert TR.tau_t_at(0, c) == 0.04
    assert TR.tau_t_at(15, c) == pytest.approx(0.055, abs=1e-15)
    assert TR.tau_t_at(30, c) == 0.07
    assert TR.tau_t_at(99, c) == 0.07


def test_teacher_momentum_endpoints():
    c = cfg(epochs=3)
    assert TR.teacher_momentum_at(0, c, 10) == pytest.approx(0.996, abs=1e-15)
    assert TR.teacher_momentum_at(29, c, 10) == 1.0
    mid = TR.teacher_momentum_at(14.5, c, 10)
    assert mid == pytest.approx(0.998, abs=1e-15)


@pytest.mark.parametrize("kw", [dict(warmup_epochs=2), dict(tau_t_end=0.2), dict(base_lr=0.0),
                                dict(center_momentum=1.5), dict(weight_decay=-1.0)])
def test_invalid_train_config(kw):
    with pytest.raises(ConfigError):
        cfg(**kw)


# ----------------------------------------------------------------- AdamW


def _adam(params, grads, **kw):
    return TR.adamw_step(params, grads, TR.AdamState.zeros_like(params), **kw)


def test_decay_only_step():
    p = {"a.weight": np.array([[1.0, -2.0]]), "b.bias": np.array([3.0])}
    g = {k: np.zeros_like(v) for k, v in p.items()}
    new, _ = _adam(p, g, lr=0.01, weight_decay=0.1)
    assert np.allclose(new["a.weight"], p["a.weight"] * 0.999, rtol=0, atol=1e-15)
    assert np.allclose(new["b.bias"], p["b.bias"] * 0.999, rtol=0, atol=1e-15)


def test_first_step_is_signed_lr():
    p = {"w": np.array([1.0, 1.0, 1.0])}
    g = {"w": np.array([3.0, -0.5, 1e-3])}
    new, state = _adam(p, g, lr=0.01, weight_decay=0.0, eps=1e-12)
    assert np.allclose(new["w"] - p["w"], -0.01 * np.sign(g["w"]), atol=1e-9)
    assert state.t == 1


def test_adam_beats_gradient_descent_on_bowl():
    # f = 0.5 * sum(h * x^2) with shallow curvature, where descent crawls
    h = np.array([1.0, 0.1])
    lr = 0.01
    f = lambda x: 0.5 * float((h * x * x).sum())
    gd = np.array([1.0, 1.0])
    params, state = {"x": gd.copy()}, TR.AdamState.zeros_like({"x": gd})
    for _ in range(50):
        gd = gd - lr * h * gd
        params, state = TR.adamw_step(params, {"x": h * params["x"]}, state, lr=lr, weight_decay=0.0)
    assert f(params["x"]) < f(gd)


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=3)}
    state = TR.AdamState.zeros_like(p)
    ref_p, m, v = p["w"].copy(), np.zeros(3), np.zeros(3)
    for t in range(1, 6):
        g = rng.normal(size=3)
        p, state = TR.adamw_step(p, {"w": g}, state, lr=0.1, weight_decay=0.05, betas=(0.8, 0.9), eps=1e-6)
        ref_p = ref_p * (1 - 0.1 * 0.05)
        m = 0.8 * m + 0.2 * g
        v = 0.9 * v + 0.1 * g * g
        ref_p = ref_p - 0.1 * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.9**t)) + 1e-6)
        assert np.allclose(p["w"], ref_p, rtol=0, atol=1e-14)


def test_nan_gradient_names_parameter():
    p = {"blocks.0.attn.qkv.weight": np.ones((2, 2))}
    with pytest.raises(NumericDomainError, match="blocks.0.attn.qkv.weight"):
        _adam(p, {"blocks.0.attn.qkv.weight": np.full((2, 2), np.nan)}, lr=0.1, weight_decay=0.0)


def test_decay_mask_excludes_biases_norms_tokens_and_head_direction():
    mask = TR.decay_mask(N.init_params(VIT, 0))
    assert mask["blocks.0.attn.qkv.weight"] and mask["head.mlp.0.weight"] and mask["patch_embed.weight"]
    for k in ("blocks.0.attn.qkv.bias", "norm.weight", "cls_token", "pos_embed", "head.last.weight"):
        assert not mask[k], k


# ------------------------------------------------------------------- train


@pytest.fixture(scope="module")
def one_run(ds, tmp_path_factory):
    path = tmp_path_factory.mktemp("run") / "metrics.jsonl"
    return TR.train(ds, VIT, AUG, cfg(), metrics_path=path), path


def test_step_count(ds):
    res = TR.train(ds, VIT, AUG, cfg(epochs=1, warmup_epochs=0, batch_size=6))
    assert res.checkpoint.step == math.ceil(20 / 6)
    assert [r["batch_size"] for r in res.metrics] == [6, 6, 6, 2]


def test_step_zero_loss_near_ln_k():
    # desk network and views; a fresh head gives near-uniform outputs
    vit, aug = N.ViTConfig(), AugConfig()
    res = TR.train(D.generate_synthetic(8, num_classes=4, seed=0), vit, aug, cfg(batch_size=4), stop_after=1)
    ln_k = math.log(vit.out_dim)
    assert abs(res.metrics[0]["loss"] - ln_k) <= 0.2 * ln_k


def test_metrics_log_fields(one_run):
    res, path = one_run
    rows = TR.read_metrics(path)
    assert rows == res.metrics
    assert set(rows[0]) >= {"step", "epoch", "loss", "lr", "tau_t", "teacher_momentum", "teacher_entropy"}
    assert [r["step"] for r in rows] == list(range(len(rows)))
    assert rows[-1]["teacher_momentum"] == 1.0


def test_weight_norm_direction_rows_stay_unit(one_run):
    res, _ = one_run
    w = N.last_layer_weight(res.checkpoint.student)
    assert np.allclose(np.linalg.norm(w, axis=1), 1.0, atol=1e-12)


def test_run_is_deterministic(ds, one_run):
    again = TR.train(ds, VIT, AUG, cfg())
    assert again.checkpoint.equals(one_run[0].checkpoint)
    assert again.metrics == one_run[0].metrics


def test_different_seed_differs(ds, one_run):
    other = TR.train(ds, VIT, AUG, cfg(seed=1))
    assert not other.checkpoint.equals(one_run[0].checkpoint)


def test_resume_is_bitwise_exact(ds, one_run, tmp_path):
    full, _ = one_run
    path = tmp_path / "part.ckpt"
    part = TR.train(ds, VIT, AUG, cfg(), stop_after=3, checkpoint_path=path)
    assert part.checkpoint.step == 3
    resumed = TR.train(ds, VIT, AUG, cfg(), resume=C.load_checkpoint(path))
    assert resumed.checkpoint.equals(full.checkpoint)
    assert [r["loss"] for r in part.metrics + resumed.metrics] == [r["loss"] for r in full.metrics]


def test_resume_with_altered_config_refused(ds, tmp_path):
    path = tmp_path / "a.ckpt"
    TR.train(ds, VIT, AUG, cfg(), stop_after=1, checkpoint_path=path)
    other = N.ViTConfig(**{**VIT.to_dict(), "depth": 2})
    with pytest.raises(C.ConfigMismatchError, match="vit.depth"):
        TR.train(ds, other, AUG, cfg(), resume=C.load_checkpoint(path))


def test_teacher_is_ema_replay_of_student(ds):
    c = cfg(epochs=2, batch_size=8)
    snaps = []
    TR.train(ds, VIT, AUG, c, stop_after=0)
    # 20 samples / 8 -> 3 steps per epoch, 6 in total; replay 5 of them
    ck = None
    for k in range(5):
        res = TR.train(ds, VIT, AUG, c, resume=ck, stop_after=1)
        ck = res.checkpoint
        snaps.append((res.metrics[0]["teacher_momentum"], N.copy_params(ck.student)))
    teacher = N.init_params(VIT, c.seed)
    for lam, student in snaps:
        teacher = O.ema_params(teacher, student, lam)
    for k in teacher:
        assert np.array_equal(teacher[k], ck.teacher[k]), k


def test_centering_ablation_initial_center(ds):
    res = TR.train(ds, VIT, AUG, cfg(center_momentum=1.0, center_offset=5.0), stop_after=2)
    assert np.array_equal(res.checkpoint.center, 5.0 * np.linspace(0, 1, VIT.out_dim))


def test_channel_split_mismatch_rejected(ds):
    aug = AugConfig(optical_channels=(0, 10), sar_channels=(10, 14), global_crop_size=16, local_crop_size=8)
    with pytest.raises(Exception):
        TR.train(ds, VIT, aug, cfg())


def test_divergence_emits_checkpoint(ds, tmp_path, monkeypatch):
    path = tmp_path / "d.ckpt"
    real = O.dino_loss
    calls = {"n": 0}

    def poisoned(*a, **k):
        calls["n"] += 1
        out = real(*a, **k)
        return out * float("nan") if calls["n"] == 2 else out

    monkeypatch.setattr(TR, "dino_loss", poisoned)
    with pytest.raises(TR.TrainingDiverged) as info:
        TR.train(ds, VIT, AUG, cfg(), checkpoint_path=path)
    assert info.value.checkpoint.step == 1
    assert C.load_checkpoint(path).step == 1


# ------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(one_run, tmp_path):
    ck = one_run[0].checkpoint
    path = tmp_path / "c.ckpt"
    C.save_checkpoint(ck, path)
    back = C.load_checkpoint(path)
    assert back.equals(ck)
    for k, v in ck.tensors().items():
        assert back.tensors()[k].tobytes() == v.tobytes()


def _expect(raw, field):
    with pytest.raises(FormatError) as info:
        C.from_bytes(raw)
    assert info.value.field == field


def test_checkpoint_corruptions(one_run):
    raw = C.to_bytes(one_run[0].checkpoint)
    flipped = bytearray(raw)
    flipped[1] ^= 0xFF
    _expect(bytes(flipped), "bad magic")
    _expect(raw[:-9], "truncated")
    _expect(raw[:5], "truncated")
    payload = bytearray(raw)
    payload[-100] ^= 0x10
    _expect(bytes(payload), "bad checksum")
    _expect(raw + b"\x00" * 8, "trailing data")
