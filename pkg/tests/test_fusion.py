import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vtseg.core_types import FRAME_RATE, SAMPLE_RATE, AudioClip
from vtseg.fusion import (FusionConfig, FusionSample, FusionTrainConfig, StubExtractor, align_features,
                          build_fusion, evaluate_fusion, extract_audio_features, extract_pitch_target,
                          fuse_forward, get_extractor, mel_filterbank, train_fusion)
from vtseg.losses import LossConfig, multitask_weighted_l1

TINY = dict(width=16, depth=1, heads=2)


def tone(hz, seconds, amp=0.5, sr=SAMPLE_RATE):
    t = np.arange(int(round(seconds * sr))) / sr
    return AudioClip(amp * np.sin(2 * np.pi * hz * t))


def test_one_second_gives_about_fifty_feature_frames():
    feats = extract_audio_features(tone(100, 1.0))
    assert abs(feats.shape[0] - 50) <= 1
    assert feats.shape[1] == StubExtractor().dim == 41


def test_silence_features_are_finite():
    feats = extract_audio_features(AudioClip(np.zeros(16000)))
    assert np.isfinite(feats).all()


def test_stationary_tone_gives_constant_features():
    feats = extract_audio_features(tone(100, 1.0))
    assert np.abs(feats - feats.mean(axis=0)).max() < 0.05


def test_mel_filterbank_shape_and_peaks():
    fb = mel_filterbank(40, 512, SAMPLE_RATE, 50, 4000)
    assert fb.shape == (40, 257)
    assert fb.max() <= 1 and fb.min() >= 0
    assert np.all(np.diff(fb.argmax(axis=1)) >= 0)


def test_extractor_selection():
    assert get_extractor("stub").name == "stub"
    assert get_extractor("real").name == "real"  # lazy: no weights loaded here
    with pytest.raises(ValueError):
        get_extractor("other")


def test_alignment_identity_when_rates_match(rng):
    f = rng.normal(size=(30, 5))
    assert np.allclose(align_features(f, 30, feature_rate=FRAME_RATE), f, rtol=0, atol=1e-12)


def test_sixty_feature_frames_to_hundred_video_frames(rng):
    out = align_features(rng.normal(size=(60, 7)), 100)
    assert out.shape == (100, 7)
    assert round(1.2 * FRAME_RATE) == 100


def test_linear_feature_stays_linear():
    n = np.arange(60)
    f = np.stack([0.3 * n / 50.0 + 1.0, -2.0 * n / 50.0], axis=1)
    out = align_features(f, 95)
    t = np.arange(95) / FRAME_RATE
    assert np.allclose(out, np.stack([0.3 * t + 1.0, -2.0 * t], axis=1), rtol=0, atol=1e-9)


def test_alignment_clamps_ends(rng):
    f = rng.normal(size=(10, 3))
    out = align_features(f, 40)  # video runs past the last feature time
    assert np.array_equal(out[-1], f[-1])


def test_alignment_needs_two_frames():
    with pytest.raises(ValueError):
        align_features(np.zeros((1, 3)), 5)


@given(st.integers(2, 80), st.integers(1, 200), st.integers(1, 6))
@settings(max_examples=60, deadline=None)
def test_alignment_shape_property(N, T, D):
    out = align_features(np.ones((N, D)), T)
    assert out.shape == (T, D)


def test_pitch_of_pure_tone():
    f0 = extract_pitch_target(tone(220, 1.2), 100).f0
    assert len(f0) == 100
    assert np.abs(f0[5:-5] - 220).max() < 2


def test_pitch_of_silence_is_zero():
    assert not extract_pitch_target(AudioClip(np.zeros(19200)), 100).f0.any()
    assert extract_pitch_target(AudioClip(np.zeros(0)), 7).f0.tolist() == [0.0] * 7


def test_pitch_of_noise_is_mostly_unvoiced(rng):
    f0 = extract_pitch_target(AudioClip(np.clip(rng.normal(0, 0.3, 19200), -1, 1)), 100).f0
    assert (f0 == 0).mean() > 0.8


def test_pitch_tracks_synthetic_contour(short_clip):
    est = extract_pitch_target(short_clip.audio, len(short_clip.frames)).f0
    assert np.abs(est[2:-2] - short_clip.pitch.f0[2:-2]).mean() < 2.0


def test_config_invariants():
    with pytest.raises(ValueError):
        FusionConfig(conv_blocks=2)
    with pytest.raises(ValueError):
        FusionConfig(modalities="video")
    with pytest.raises(ValueError):
        FusionConfig(width=30, heads=4)
    with pytest.raises(ValueError):
        FusionConfig(visual_dim=64)
    FusionConfig(visual_input="unet_features", visual_dim=64)


def test_forward_shapes_and_pitch_nonnegative(rng):
    torch.manual_seed(0)
    model = build_fusion(FusionConfig(**TINY))
    traj, pitch = fuse_forward(model, rng.uniform(20, 70, (33, 95, 2)), rng.normal(size=(33, 41)))
    assert traj.points.shape == (33, 95, 2)
    assert pitch.f0.shape == (33,) and (pitch.f0 >= 0).all()


def test_fresh_model_returns_input_keypoints(rng):
    torch.manual_seed(0)
    kp = rng.uniform(20, 70, (12, 95, 2))
    traj, _ = fuse_forward(build_fusion(FusionConfig(**TINY)), kp, rng.normal(size=(12, 41)))
    assert np.allclose(traj.points, kp, atol=1e-4)


def test_forward_is_deterministic(rng):
    torch.manual_seed(0)
    model = build_fusion(FusionConfig(**TINY))
    kp, au = rng.uniform(20, 70, (20, 95, 2)), rng.normal(size=(20, 41))
    a, b = fuse_forward(model, kp, au), fuse_forward(model, kp, au)
    assert np.array_equal(a[0].points, b[0].points) and np.array_equal(a[1].f0, b[1].f0)


def test_frame_count_mismatch(rng):
    model = build_fusion(FusionConfig(**TINY))
    with pytest.raises(ValueError):
        fuse_forward(model, rng.uniform(20, 70, (10, 95, 2)), rng.normal(size=(9, 41)))


@pytest.mark.parametrize("modalities", ["keypoints", "audio"])
def test_ablation_modalities(rng, modalities):
    torch.manual_seed(0)
    model = build_fusion(FusionConfig(modalities=modalities, **TINY))
    traj, pitch = fuse_forward(model, rng.uniform(20, 70, (8, 95, 2)), rng.normal(size=(8, 41)))
    assert np.isfinite(traj.points).all() and np.isfinite(pitch.f0).all()


def test_keypoint_only_model_ignores_audio(rng):
    torch.manual_seed(0)
    model = build_fusion(FusionConfig(modalities="keypoints", **TINY))
    with torch.no_grad():
        model.traj_head.weight.normal_()
    kp = rng.uniform(20, 70, (8, 95, 2))
    a = fuse_forward(model, kp, rng.normal(size=(8, 41)))[0].points
    b = fuse_forward(model, kp, rng.normal(size=(8, 41)))[0].points
    assert np.array_equal(a, b)


def test_unet_feature_input(rng):
    torch.manual_seed(0)
    model = build_fusion(FusionConfig(visual_input="unet_features", visual_dim=24, **TINY))
    traj, _ = fuse_forward(model, rng.normal(size=(9, 24)), rng.normal(size=(9, 41)))
    assert traj.points.shape == (9, 95, 2)


def _samples(rng, n=3, T=40):
    out = []
    for i in range(n):
        target = rng.uniform(20, 70, (T, 95, 2))
        out.append(FusionSample(f"c{i}", target + rng.normal(0, 1, target.shape),
                                rng.normal(size=(T, 41)), target, rng.uniform(100, 200, T)))
    return out


def test_pitch_head_gets_no_gradient_without_pitch_weight(rng):
    torch.manual_seed(0)
    model = build_fusion(FusionConfig(**TINY))
    s = _samples(rng, 1)[0]
    f = lambda a: torch.as_tensor(a, dtype=torch.float32)[None]
    traj, pitch = model(f(s.keypoints.reshape(40, -1)), f(s.audio_feats))
    loss = multitask_weighted_l1(traj, f(s.target_traj.reshape(40, -1)), pitch, f(s.target_pitch),
                                 LossConfig(lambda_pitch=0.0))
    loss.backward()
    assert model.pitch_head.weight.grad is None or not model.pitch_head.weight.grad.any()


def test_overfit_single_clip():
    rng = np.random.default_rng(0)
    samples = _samples(rng, 1, T=32)
    torch.manual_seed(0)
    model = build_fusion(FusionConfig(width=64, depth=2, heads=4))
    cfg = FusionTrainConfig(epochs=1, steps_per_epoch=400, batch_size=4, window=32, lr=3e-3, seed=0)
    model, hist = train_fusion(model, samples, cfg)
    before = multitask_weighted_l1(samples[0].keypoints, samples[0].target_traj,
                                   np.zeros(32), samples[0].target_pitch, LossConfig()).item()
    after = evaluate_fusion(model, samples)
    assert after["traj_l1"] < 0.2 * np.abs(samples[0].keypoints - samples[0].target_traj).mean()
    assert hist["train_loss"][-1] < 0.2 * before


def test_training_reproducible_and_validation_improves(tmp_path):
    rng = np.random.default_rng(1)
    samples = _samples(rng, 3)
    cfg = FusionTrainConfig(epochs=2, steps_per_epoch=10, batch_size=2, window=16, lr=1e-3, seed=3)
    finals = []
    for _ in range(2):
        torch.manual_seed(3)
        model, hist = train_fusion(build_fusion(FusionConfig(**TINY)), samples, cfg, samples,
                                   checkpoint_path=tmp_path / "f.npz")
        finals.append(hist["train_loss"][-1])
    assert abs(finals[0] - finals[1]) < 1e-6
    assert hist["val_loss"][-1] < hist["initial_val_loss"]
    assert (tmp_path / "f.npz").exists()


def test_audio_normalization_stored_as_buffers():
    rng = np.random.default_rng(2)
    samples = _samples(rng, 2)
    model = build_fusion(FusionConfig(**TINY))
    train_fusion(model, samples, FusionTrainConfig(epochs=1, steps_per_epoch=1, batch_size=1, window=8))
    feats = np.concatenate([s.audio_feats for s in samples])
    assert np.allclose(model.audio_mean.numpy(), feats.mean(axis=0), atol=1e-5)
    assert "audio_mean" in dict(model.named_buffers())


def test_zero_audio_changes_output_of_audio_model(rng):
    torch.manual_seed(0)
    model = build_fusion(FusionConfig(**TINY))
    with torch.no_grad():
        model.traj_head.weight.normal_()
    kp, au = rng.uniform(20, 70, (8, 95, 2)), rng.normal(size=(8, 41)) + 3
    a = fuse_forward(model, kp, au)[0].points
    b = fuse_forward(model, kp, au, zero_audio=True)[0].points
    assert not np.allclose(a, b)
