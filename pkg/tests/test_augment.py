import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentdistill import augment as A
from latentdistill import tensor as T
from latentdistill.gradcheck import check_gradient


def test_draw_is_deterministic():
    assert A.sample_aug_params(4, 17) == A.sample_aug_params(4, 17)
    assert A.sample_aug_params(4, 17) != A.sample_aug_params(4, 18)


def test_sampling_ranges():
    draws = [A.sample_aug_params(0, i, 32) for i in range(100_000)]
    sx = np.array([d.scale[0] for d in draws])
    rot = np.array([d.rotate for d in draws])
    crop = np.array([d.crop for d in draws])
    bright = np.array([d.brightness for d in draws])
    sat = np.array([d.saturation for d in draws])
    con = np.array([d.contrast for d in draws])
    flips = np.mean([d.flip for d in draws])
    assert 0.8 <= sx.min() and sx.max() <= 1.2
    assert -15 <= rot.min() and rot.max() <= 15
    assert set(np.unique(crop)) == set(range(-4, 5))
    assert -0.5 <= bright.min() and bright.max() <= 0.5
    assert 0 <= sat.min() and sat.max() <= 2
    assert 0.5 <= con.min() and con.max() <= 1.5
    assert abs(flips - 0.5) < 3 * math.sqrt(0.25 / len(draws))
    assert {d.cutout[2] for d in draws} == {16}


def test_single_random_touches_one_op():
    neutral = A.AugParams()
    groups = {"flip": ["flip"], "scale": ["scale"], "rotate": ["rotate"], "crop": ["crop"],
              "color": ["brightness", "saturation", "contrast"], "cutout": ["cutout"]}
    seen = set()
    for i in range(300):
        p = A.sample_aug_params(1, i, 32, "single_random")
        changed = {g for g, fields in groups.items() if any(getattr(p, f) != getattr(neutral, f) for f in fields)}
        assert len(changed) <= 1
        seen |= changed
    assert seen == set(groups)


def test_unknown_strategy_or_op():
    with pytest.raises(ValueError):
        A.sample_aug_params(0, 0, strategy="some")
    with pytest.raises(ValueError):
        A.sample_aug_params(0, 0, ops=("blur",))


def test_identity_is_exact(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    assert np.array_equal(A.apply_aug(x, A.AugParams.identity()).data, x)


def test_flip_twice_is_identity(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    p = A.AugParams(flip=True)
    once = A.apply_aug(x, p).data
    assert np.array_equal(once, x[..., ::-1])
    assert np.array_equal(A.apply_aug(once, p).data, x)


def test_crop_shift_moves_pixels_and_zero_fills(rng):
    x = rng.standard_normal((1, 1, 6, 6))
    out = A.apply_aug(x, A.AugParams(crop=(1, 2))).data[0, 0]
    assert np.array_equal(out[:4, :5], x[0, 0, 2:, 1:])
    assert not np.any(out[4:]) and not np.any(out[:, 5])


def test_color_ops(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    assert np.allclose(A.apply_aug(x, A.AugParams(brightness=0.25)).data, x + 0.25)
    gray = A.apply_aug(x, A.AugParams(saturation=0.0)).data
    assert np.allclose(gray, np.broadcast_to(x.mean(axis=1, keepdims=True), x.shape))
    flat = A.apply_aug(x, A.AugParams(contrast=0.0)).data
    assert np.allclose(flat, np.broadcast_to(x.mean(axis=(1, 2, 3), keepdims=True), x.shape))


def test_cutout_square(rng):
    x = rng.standard_normal((1, 3, 8, 8)) + 5
    out = A.apply_aug(x, A.AugParams(cutout=(4, 4, 4))).data
    assert not np.any(out[..., 2:6, 2:6])
    assert np.count_nonzero(out == 0) == 3 * 16
    edge = A.cutout_mask(8, A.AugParams(cutout=(0, 0, 4)))
    assert edge.sum() == 64 - 4


def test_unit_scale_zero_rotation_grid_is_identity(rng):
    x = rng.standard_normal((1, 3, 8, 8))
    p = A.AugParams(scale=(1.0, 1.0), rotate=1e-300)
    assert np.allclose(A.apply_aug(x, p).data, x, atol=1e-12)


def test_per_image_params_and_capture(rng):
    x = rng.standard_normal((3, 3, 8, 8))
    ps = [A.AugParams(flip=True), A.AugParams()]
    with A.capture_params() as seen:
        out = A.apply_aug(x, ps).data
    assert np.array_equal(out[0], x[0, ..., ::-1]) and np.array_equal(out[1], x[1])
    assert np.array_equal(out[2], x[2, ..., ::-1])
    assert seen == [ps[0], ps[1], ps[0]]


def test_settings_disabled_draws_nothing():
    assert A.AugSettings(enabled=False).draw(0, 0, 32) is None
    assert len(A.AugSettings(per_image=True).draw(0, 0, 32, batch=4)) == 4


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 10_000))
def test_every_draw_is_differentiable(seed, it):
    x = np.random.default_rng(seed).standard_normal((1, 3, 8, 8))
    w = np.random.default_rng(seed + 1).standard_normal((1, 3, 8, 8))
    p = A.sample_aug_params(seed, it, 8)
    assert check_gradient(lambda t: T.tsum(T.mul(A.apply_aug(t, p), w)), x) < 1e-4
