import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtseg.augmentation import (AffineTransform, AugmentConfig, apply_to_frame, apply_to_points,
                                augment_sample, sample_affine, transform_points, warp_pixels)
from vtseg.core_types import GRID, Frame, KeypointSet
from vtseg.heatmap_codec import decode_grids, render_targets


def impulse(r, c):
    img = np.zeros((GRID, GRID))
    img[r, c] = 1.0
    return img


def test_zero_ranges_give_identity(rng):
    T = sample_affine(AugmentConfig.off(), rng)
    assert np.allclose(T.A, np.eye(2)) and np.allclose(T.t, 0)


def test_sampler_is_deterministic():
    a = sample_affine(AugmentConfig(), np.random.default_rng(7))
    b = sample_affine(AugmentConfig(), np.random.default_rng(7))
    assert np.array_equal(a.A, b.A) and np.array_equal(a.t, b.t)


def test_rotation_sampler_mean():
    rng = np.random.default_rng(0)
    cfg = AugmentConfig(scale=(1.0, 1.0), translation_px=0.0, shear_deg=0.0)
    angles = [np.degrees(np.arctan2(T.A[1, 0], T.A[0, 0])) for T in
              (sample_affine(cfg, rng) for _ in range(10000))]
    assert abs(np.mean(angles)) < 0.5
    assert max(np.abs(angles)) <= 10.0


def test_config_invariants():
    with pytest.raises(ValueError):
        AugmentConfig(scale=(1.1, 1.2))
    with pytest.raises(ValueError):
        AugmentConfig(rotation_deg=-1)
    with pytest.raises(ValueError):
        AffineTransform(np.zeros((2, 2)), np.zeros(2))


def test_identity_warp_is_bit_identical(rng):
    f = Frame(rng.random((GRID, GRID)).astype(np.float32), padded=True)
    assert np.array_equal(apply_to_frame(f, AffineTransform.identity()).pixels, f.pixels)


def test_translation_moves_impulse():
    out = warp_pixels(impulse(40, 30), AffineTransform(np.eye(2), [3.0, 0.0]))
    assert np.argwhere(out > 0.5).tolist() == [[40, 33]]


def test_four_quarter_turns_return_to_start(rng):
    img = np.zeros((GRID, GRID))
    img[20:76, 20:76] = rng.random((56, 56))
    T = AffineTransform.from_params(rotation_deg=90.0)
    out = img
    for _ in range(4):
        out = warp_pixels(out, T)
    assert np.abs(out - img).mean() < 1e-3


def test_apply_to_frame_requires_padded():
    with pytest.raises(ValueError):
        apply_to_frame(Frame(np.zeros((84, 84))), AffineTransform.identity())


def test_points_identity_and_out_of_frame(rng):
    kp = KeypointSet(rng.uniform(10, 80, size=(95, 2)))
    same, valid = apply_to_points(kp, AffineTransform.identity())
    assert np.array_equal(same.points, kp.points) and valid.all()
    _, valid = transform_points(kp.points, AffineTransform(np.eye(2), [100.0, 0.0]))
    assert not valid.any()


def test_point_formula_about_centre():
    T = AffineTransform.from_params(rotation_deg=90.0, translation=(1.0, 2.0))
    moved, _ = transform_points(np.array([[58.0, 48.0]]), T)
    # (10, 0) about the centre rotates to (0, 10) in (x, y)
    assert np.allclose(moved, [[49.0, 60.0]])


@given(st.floats(-10, 10), st.floats(0.9, 1.1), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5),
       st.integers(25, 70), st.integers(25, 70))
@settings(max_examples=60, deadline=None)
def test_warped_impulse_lands_on_transformed_point(rot, scale, shear, tx, ty, x, y):
    T = AffineTransform.from_params(rot, scale, shear, (tx, ty))
    moved, _ = transform_points(np.array([x, y], dtype=float), T)
    # a wide blob keeps bilinear sampling from losing the peak
    warped = warp_pixels(render_targets(np.array([x, y], dtype=float)), T)
    assert np.abs(decode_grids(warped, 9216) - moved).max() < 0.5


@given(st.floats(-10, 10), st.floats(0.9, 1.1), st.floats(-5, 5), st.floats(-5, 5),
       st.integers(20, 75), st.integers(20, 75))
@settings(max_examples=60, deadline=None)
def test_warp_and_point_transform_commute(rot, scale, tx, ty, x, y):
    T = AffineTransform.from_params(rot, scale, 0.0, (tx, ty))
    p = np.array([x, y], dtype=float)
    moved, valid = transform_points(p, T)
    warped_peak = np.unravel_index(np.argmax(warp_pixels(render_targets(p), T)), (GRID, GRID))
    target_peak = np.unravel_index(np.argmax(render_targets(moved)), (GRID, GRID))
    assert valid
    assert np.abs(np.subtract(warped_peak, target_peak)).max() <= 1
    assert np.abs(decode_grids(warp_pixels(render_targets(p), T), 25) - moved).max() < 0.5


def test_augment_sample_keeps_points_in_frame(rng):
    pixels = rng.random((GRID, GRID)).astype(np.float32)
    for _ in range(50):
        pts = rng.uniform(2, 93, size=(95, 2))
        out, moved = augment_sample(pixels, pts, AugmentConfig(), rng)
        assert np.all((moved >= 0) & (moved < GRID))
        assert out.min() >= 0 and out.max() <= 1


def test_augment_sample_falls_back_to_identity(rng):
    pixels = rng.random((GRID, GRID)).astype(np.float32)
    pts = np.full((95, 2), 48.0)
    pts[0] = [0.0, 0.0]
    pts[1] = [95.5, 95.5]
    # only translations in [0, 0.5)^2 keep both corners; 10 draws essentially never hit one
    cfg = AugmentConfig(rotation_deg=0, scale=(1.0, 1.0), translation_px=50.0, shear_deg=0)
    out, moved = augment_sample(pixels, pts, cfg, np.random.default_rng(3))
    assert np.array_equal(out, pixels) and np.array_equal(moved, pts)
