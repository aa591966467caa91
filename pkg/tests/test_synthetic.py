import numpy as np
import pytest

from vtseg.core_types import GRID, NATIVE_SIZE, PAD, validate_pair
from vtseg.fusion import extract_pitch_target
from vtseg.synthetic import (BORDER_MARGIN, CHAIN_SIZES, SyntheticSpec, chain_slices,
                             generate_synthetic_clip)


def test_chains_cover_all_points():
    assert sum(CHAIN_SIZES) == 95
    assert chain_slices()[-1].stop == 95


def test_same_seed_is_bit_identical():
    a = generate_synthetic_clip(SyntheticSpec(seed=3, T=20))
    b = generate_synthetic_clip(SyntheticSpec(seed=3, T=20))
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.trajectory.points, b.trajectory.points)
    assert np.array_equal(a.audio.samples, b.audio.samples)


def test_different_seeds_differ():
    a = generate_synthetic_clip(SyntheticSpec(seed=3, T=20))
    b = generate_synthetic_clip(SyntheticSpec(seed=4, T=20))
    assert not np.array_equal(a.trajectory.points, b.trajectory.points)


@pytest.mark.parametrize("seed", range(8))
def test_points_stay_inside_native_area(seed):
    pts = generate_synthetic_clip(SyntheticSpec(seed=seed, T=60)).trajectory.points
    assert pts.min() >= BORDER_MARGIN
    assert pts.max() <= PAD + NATIVE_SIZE - 1 < GRID


def test_shapes_and_lengths(short_clip):
    T = len(short_clip.frames)
    assert short_clip.frames.shape == (T, NATIVE_SIZE, NATIVE_SIZE)
    assert short_clip.frames.min() >= 0 and short_clip.frames.max() <= 1
    assert len(short_clip.audio.samples) == T * 192
    assert validate_pair(short_clip.frames, short_clip.audio) == []


def test_pitch_is_driven_by_pitch_point():
    clip = generate_synthetic_clip(SyntheticSpec(seed=11, T=160))
    y = clip.trajectory.points[:, clip.spec.pitch_point, 1]
    est = extract_pitch_target(clip.audio, 160).f0
    assert abs(np.corrcoef(y, est)[0, 1]) > 0.9
    lo, hi = clip.spec.f0_range
    assert clip.pitch.f0.min() >= lo and clip.pitch.f0.max() <= hi


def test_invisible_chain_leaves_no_trace():
    spec = dict(seed=2, T=4, frame_noise=0.0)
    on = generate_synthetic_clip(SyntheticSpec(**spec))
    off = generate_synthetic_clip(SyntheticSpec(chain_contrast=(1, 1, 1, 1, 1, 0), **spec))
    assert np.array_equal(on.trajectory.points, off.trajectory.points)
    assert not np.array_equal(on.frames, off.frames)


def test_spec_dict_round_trip():
    spec = SyntheticSpec(seed=9, T=30, chain_contrast=(1, 1, 1, 1, 1, 0.5))
    assert SyntheticSpec.from_dict(spec.to_dict()) == spec
    assert generate_synthetic_clip(SyntheticSpec(seed=9, T=2)).trajectory.clip_id == "synth_00009"
