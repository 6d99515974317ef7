import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adamatch import augment as G


def _gen(seed=0):
    return np.random.default_rng(seed)


def test_no_shift_no_mirror_is_identity(rng):
    x = rng.random((4, 32, 32, 3))
    pol = G.AugmentPolicy(shift_fraction=0.0, mirror_x=False)
    assert np.array_equal(G.weak_augment(x, pol, _gen()), x)


def test_mirror_twice_is_identity(rng):
    x = rng.random((4, 8, 8, 1))
    flip = np.ones(4, dtype=bool)
    once = G.mirror(x, flip)
    assert np.array_equal(once, x[:, :, ::-1])
    assert np.array_equal(G.mirror(once, flip), x)


def test_single_pixel_moves_two_columns():
    x = np.zeros((1, 8, 8, 1))
    x[0, 3, 3, 0] = 1.0
    out = G.translate(x, np.array([[0, 2]]))  # (dy, dx)
    assert out[0, 3, 5, 0] == 1.0 and out.sum() == 1.0
    down = G.translate(x, np.array([[-1, 0]]))
    assert down[0, 2, 3, 0] == 1.0


def test_translate_fills_exposed_border():
    x = np.ones((1, 6, 6, 1))
    out = G.translate(x, np.array([[2, -1]]), fill=0.25)
    assert np.all(out[0, :2] == 0.25) and np.all(out[0, :, -1:] == 0.25)
    assert np.all(out[0, 2:, :-1] == 1.0)


def test_cutout_half_side_on_ones():
    x = np.ones((50, 32, 32, 1))
    pol = G.AugmentPolicy(shift_fraction=0.0, cutout_fraction=0.5)
    boxes = []
    out = G.strong_augment(x, pol, _gen(3), boxes_out=boxes)
    for img, (y0, y1, x0, x1) in zip(out, boxes[0]):
        assert y1 - y0 <= 16 and x1 - x0 <= 16
        assert (img == 0).sum() == (y1 - y0) * (x1 - x0)
    full = [(y1 - y0) * (x1 - x0) for y0, y1, x0, x1 in boxes[0]]
    assert max(full) == 256 and min(full) < 256  # clipped near the border


def test_minimal_cutout_changes_at_most_one_pixel(rng):
    x = rng.random((10, 32, 32, 1)) * 0.5 + 0.5
    pol = G.AugmentPolicy(cutout_fraction=1 / 64)
    weak = G.weak_augment(x, pol, _gen(1))
    strong = G.strong_augment(x, pol, _gen(1))
    assert np.all((weak != strong).sum(axis=(1, 2, 3)) <= 1)


def test_strong_deterministic(rng):
    x = rng.random((6, 32, 32, 3))
    a = G.strong_augment(x, G.NATURAL_POLICY, _gen(7))
    assert np.array_equal(a, G.strong_augment(x, G.NATURAL_POLICY, _gen(7)))
    assert not np.array_equal(a, G.strong_augment(x, G.NATURAL_POLICY, _gen(8)))


def test_pair_views_differ_and_replay(rng):
    x = rng.random((8, 32, 32, 3)) * 0.9 + 0.05
    p1 = G.augment_pair(x, G.DIGITS_POLICY, _gen(5))
    p2 = G.augment_pair(x, G.DIGITS_POLICY, _gen(5))
    assert np.array_equal(p1.weak, p2.weak) and np.array_equal(p1.strong, p2.strong)
    assert np.all(np.any(p1.weak != p1.strong, axis=(1, 2, 3)))


def test_policy_validation():
    with pytest.raises(ValueError):
        G.AugmentPolicy(shift_fraction=0.5)
    with pytest.raises(ValueError):
        G.AugmentPolicy(cutout_fraction=0.0)
    assert G.AugmentPolicy(pad_fill=3.0).fill == 1.0
    assert G.AugmentPolicy(pad_fill=-1.0).fill == 0.0


policies = st.builds(G.AugmentPolicy, shift_fraction=st.floats(0, 0.25), mirror_x=st.booleans(),
                     cutout_fraction=st.floats(0.01, 1.0), pad_fill=st.floats(-2, 2))


@settings(max_examples=60, deadline=None)
@given(policies, st.integers(1, 6), st.sampled_from([8, 28, 32]), st.sampled_from([1, 3]),
       st.integers(0, 2**32 - 1))
def test_shapes_and_range_preserved(policy, n, side, c, seed):
    x = np.random.default_rng(seed).random((n, side, side, c)).astype(np.float32)
    pair = G.augment_pair(x, policy, _gen(seed))
    for v in (pair.weak, pair.strong):
        assert v.shape == x.shape and v.dtype == x.dtype
        assert v.min() >= 0.0 and v.max() <= 1.0


@settings(max_examples=60, deadline=None)
@given(policies, st.integers(0, 2**32 - 1))
def test_strong_matches_weak_outside_cutout(policy, seed):
    x = np.random.default_rng(seed).random((5, 32, 32, 1))
    weak = G.weak_augment(x, policy, _gen(seed))
    boxes = []
    strong = G.strong_augment(x, policy, _gen(seed), boxes_out=boxes)
    outside = np.ones(x.shape, dtype=bool)
    for i, (y0, y1, x0, x1) in enumerate(boxes[0]):
        outside[i, y0:y1, x0:x1] = False
    assert np.array_equal(strong[outside], weak[outside])
    assert np.all(strong[~outside] == policy.fill)
