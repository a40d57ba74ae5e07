import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dinomm import augment as A
from dinomm.errors import ConfigError, DimensionError, InputError

CFG = A.AugConfig()


def sample(seed=0, size=24):
    # strictly positive so a zero can only come from a drop
    return np.random.default_rng(seed).uniform(0.5, 1.5, size=(14, size, size))


# ------------------------------------------------------------ sensor drop


def test_drop_modes_zero_the_right_channels():
    img = sample()
    sar_gone = A.apply_drop(img, A.DropMode.SAR_DROPPED, CFG)
    opt_gone = A.apply_drop(img, A.DropMode.OPTICAL_DROPPED, CFG)
    assert not sar_gone[12:].any() and np.array_equal(sar_gone[:12], img[:12])
    assert not opt_gone[:12].any() and np.array_equal(opt_gone[12:], img[12:])
    assert np.array_equal(A.apply_drop(img, A.DropMode.NONE, CFG), img)


def test_drop_works_on_batches():
    batch = np.stack([sample(i) for i in range(3)])
    out = A.apply_drop(batch, A.DropMode.OPTICAL_DROPPED, CFG)
    assert not out[:, :12].any() and np.array_equal(out[:, 12:], batch[:, 12:])


def test_drop_is_idempotent():
    img = sample()
    for mode in A.DropMode:
        once = A.apply_drop(img, mode, CFG)
        assert np.array_equal(A.apply_drop(once, mode, CFG), once)


def test_drop_does_not_mutate_input():
    img = sample()
    before = img.copy()
    A.apply_drop(img, A.DropMode.SAR_DROPPED, CFG)
    assert np.array_equal(img, before)


def test_nine_pair_frequencies_uniform():
    rng = np.random.default_rng(2024)
    n = 100_000
    counts = {}
    for _ in range(n):
        pair = (A.sample_drop_mode(CFG, rng), A.sample_drop_mode(CFG, rng))
        counts[pair] = counts.get(pair, 0) + 1
    assert set(counts) == set(itertools.product(A.DropMode, repeat=2))
    for pair, c in counts.items():
        assert abs(c / n - 1 / 9) <= 0.01, pair


def test_drop_probabilities_are_respected():
    cfg = A.AugConfig(sensor_drop_probs=(0.5, 0.0, 0.5))
    rng = np.random.default_rng(0)
    modes = [A.sample_drop_mode(cfg, rng) for _ in range(20_000)]
    assert A.DropMode.OPTICAL_DROPPED not in modes
    assert abs(modes.count(A.DropMode.SAR_DROPPED) / len(modes) - 0.5) < 0.02


def test_certain_drop():
    cfg = A.AugConfig(sensor_drop_probs=(0.0, 1.0, 0.0))
    views = A.make_views(sample(), cfg, np.random.default_rng(0))
    assert all(v.drop_mode is A.DropMode.OPTICAL_DROPPED for v in views)
    assert all(not v.image[:12].any() for v in views)


@pytest.mark.parametrize("probs", [(0.5, 0.5, 0.5), (-0.1, 0.6, 0.5), (1.0, 0.0)])
def test_bad_drop_probs(probs):
    with pytest.raises(ConfigError):
        A.AugConfig(sensor_drop_probs=probs)


def test_overlapping_channel_ranges_rejected():
    with pytest.raises(ConfigError):
        A.AugConfig(optical_channels=(0, 12), sar_channels=(10, 14))


# ------------------------------------------------------------- full views


@given(seed=st.integers(0, 2**32 - 1), epoch=st.integers(0, 100), sid=st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_zeroing_invariants_on_every_view(seed, epoch, sid):
    views = A.make_views(sample(sid % 7), CFG, A.view_rng(seed, epoch, sid))
    assert len(views) == 10
    for v in views:
        sar, opt = v.image[12:], v.image[:12]
        if v.drop_mode is A.DropMode.SAR_DROPPED:
            assert np.all(sar == 0.0)
        elif v.drop_mode is A.DropMode.OPTICAL_DROPPED:
            assert np.all(opt == 0.0)
        assert v.draws[-1] == ("drop", v.drop_mode.value)


def test_view_shapes():
    views = A.make_views(sample(), CFG, np.random.default_rng(0))
    assert [v.is_global for v in views] == [True, True] + [False] * 8
    assert all(v.image.shape == (14, 32, 32) for v in views[:2])
    assert all(v.image.shape == (14, 16, 16) for v in views[2:])


def test_views_deterministic_per_sample_and_epoch():
    a = A.make_views(sample(), CFG, A.view_rng(3, 1, 42))
    b = A.make_views(sample(), CFG, A.view_rng(3, 1, 42))
    c = A.make_views(sample(), CFG, A.view_rng(3, 2, 42))
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
    assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, c))


def test_view_rng_streams_are_independent_of_call_order():
    # drawing for sample 7 first must not change sample 8's views
    r8 = A.make_views(sample(), CFG, A.view_rng(0, 0, 8))
    A.make_views(sample(), CFG, A.view_rng(0, 0, 7))
    again = A.make_views(sample(), CFG, A.view_rng(0, 0, 8))
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(r8, again))


def test_identity_chain():
    cfg = A.AugConfig(global_scale_range=(1.0, 1.0), ratio_range=(1.0, 1.0), global_crop_size=24,
                      local_crop_count=0, hflip_prob=0, jitter_prob=0, grayscale_prob=0, blur_prob=0,
                      solarize_prob=0, sensor_drop_probs=(0, 0, 1))
    img = sample()
    views = A.make_views(img, cfg, np.random.default_rng(0))
    assert all(np.allclose(v.image, img, atol=1e-12) for v in views)


def test_wrong_channel_count():
    with pytest.raises(DimensionError):
        A.make_views(np.zeros((3, 8, 8)), CFG, np.random.default_rng(0))


def test_degenerate_image_rejected():
    with pytest.raises(InputError):
        A.make_views(np.ones((14, 1, 1)), CFG, np.random.default_rng(0))
    with pytest.raises(InputError):
        A.random_resized_crop(np.ones((2, 1, 5)), (0.5, 1.0), 4, np.random.default_rng(0))


# --------------------------------------------------------- individual ops


@given(h=st.integers(2, 64), w=st.integers(2, 64), seed=st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_crop_box_within_image(h, w, seed):
    x, y, bw, bh = A.sample_crop_box(h, w, (0.05, 1.0), (3 / 4, 4 / 3), np.random.default_rng(seed))
    assert 0 <= x and 0 <= y and 0 < bw and 0 < bh
    assert x + bw <= w and y + bh <= h


def test_crop_box_scale_roughly_respected():
    rng = np.random.default_rng(0)
    areas = [np.prod(A.sample_crop_box(64, 64, (0.4, 1.0), (3 / 4, 4 / 3), rng)[2:]) / 64**2
             for _ in range(2000)]
    # rounding w and h moves the area by at most about one row plus one column
    assert 0.4 - 2 / 64 <= min(areas) and max(areas) <= 1.0
    assert min(areas) < 0.45 and max(areas) > 0.9


def test_full_crop_resize_identity():
    img = sample(size=16)
    assert np.allclose(A.crop_resize(img, (0, 0, 16, 16), 16), img, atol=1e-12)


def test_crop_resize_preserves_constants():
    img = np.full((2, 10, 10), 3.25)
    assert np.allclose(A.crop_resize(img, (2, 1, 5, 7), 13), 3.25, atol=1e-13)


def test_hflip_involution():
    img = sample()
    assert np.array_equal(A.hflip(A.hflip(img)), img)
    assert np.array_equal(A.hflip(img)[..., 0], img[..., -1])


def test_grayscale_equalises_channels():
    g = A.channel_grayscale(sample())
    assert np.all(g == g[0])


def test_blur_preserves_constants():
    img = np.full((1, 12, 12), 2.0)
    assert np.allclose(A.gaussian_blur(img, 0.8), 2.0, atol=1e-13)


def test_solarize_example():
    img = np.array([[[0.5, 1.0, 1.5]]])
    assert A.solarize(img, 1.0, 2.0).tolist() == [[[0.5, 1.0, 0.5]]]


def test_jitter_zero_strength_is_identity():
    img = sample()
    assert np.array_equal(A.channel_jitter(img, 0.0, np.random.default_rng(0)), img)
