import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vtseg.core_types import ArticulatorWeights
from vtseg.heatmap_codec import render_targets
from vtseg.losses import (LossConfig, apply_articulatory_weighting, heatmap_loss, load_weights_csv,
                          multitask_weighted_l1, pixel_kl, pixel_kl_grad, pixel_mse, pixel_mse_grad,
                          weights_from_config, write_weights_csv)


def random_distribution(rng, shape, sparsity=0.3):
    t = rng.random(shape) * (rng.random(shape) > sparsity)
    t[..., 0, 0] += 1e-3  # never all zero
    return t / t.sum(axis=(-2, -1), keepdims=True)


def central_difference(f, x, h=1e-3):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_kl_hand_case_is_ln2():
    target = np.array([[0.5, 0.5], [0.0, 0.0]])
    assert pixel_kl(np.zeros((2, 2)), target).item() == pytest.approx(math.log(2), abs=1e-12)


def test_kl_zero_when_softmax_matches_target(rng):
    t = random_distribution(rng, (95, 12, 12), sparsity=0.0)
    logits = np.log(t) + 3.7
    assert pixel_kl(logits, t).abs().max().item() < 1e-9


def test_kl_of_rendered_target_with_zero_pixels():
    t = render_targets(np.array([[3.0, 4.0], [50.0, 60.0]]))
    logits = np.log(np.maximum(t, 1e-300))
    assert pixel_kl(logits, t).abs().max().item() < 1e-9


def test_kl_nonnegative_over_random_pairs(rng):
    t = random_distribution(rng, (10000, 4, 4))
    logits = rng.normal(scale=3.0, size=(10000, 4, 4))
    assert pixel_kl(logits, t).min().item() >= -1e-12


def test_kl_positive_when_distributions_differ(rng):
    t = random_distribution(rng, (50, 6, 6), sparsity=0.0)
    logits = np.log(t) + rng.normal(scale=0.1, size=t.shape)
    assert pixel_kl(logits, t).min().item() > 0


def test_kl_validates_inputs():
    with pytest.raises(ValueError):
        pixel_kl(np.full((2, 2), np.nan), np.full((2, 2), 0.25))
    with pytest.raises(ValueError):
        pixel_kl(np.zeros((2, 2)), np.full((2, 2), 0.3))
    with pytest.raises(ValueError):
        pixel_kl(np.zeros((2, 2)), np.full((3, 3), 1 / 9))


def test_mse_examples(rng):
    t = render_targets(rng.uniform(10, 80, size=(95, 2)))
    assert np.all(pixel_mse(t, t).numpy() == 0)
    assert np.allclose(pixel_mse(t + 0.1, t).numpy(), 0.01)


@pytest.mark.parametrize("seed", range(3))
def test_kl_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(3, 8, 8))
    t = random_distribution(rng, (3, 8, 8))
    fd = central_difference(lambda x: pixel_kl(x, t).sum().item(), z)
    assert rel_err(pixel_kl_grad(z, t), fd) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_mse_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(3, 8, 8))
    t = random_distribution(rng, (3, 8, 8))
    fd = central_difference(lambda x: pixel_mse(x, t).sum().item(), p)
    assert rel_err(pixel_mse_grad(p, t), fd) < 1e-4


def test_closed_form_gradients_match_autograd(rng):
    z = torch.tensor(rng.normal(size=(4, 8, 8)), requires_grad=True)
    t = random_distribution(rng, (4, 8, 8))
    pixel_kl(z, t).sum().backward()
    assert np.allclose(z.grad.numpy(), pixel_kl_grad(z.detach().numpy(), t), atol=1e-12)
    p = torch.tensor(rng.normal(size=(4, 8, 8)), requires_grad=True)
    pixel_mse(p, t).sum().backward()
    assert np.allclose(p.grad.numpy(), pixel_mse_grad(p.detach().numpy(), t), atol=1e-12)


def test_pixel_losses_permutation_equivariant(rng):
    z = rng.normal(size=(95, 8, 8))
    t = random_distribution(rng, (95, 8, 8))
    perm = rng.permutation(95)
    for f in (pixel_kl, pixel_mse):
        assert np.allclose(f(z[perm], t[perm]).numpy(), f(z, t).numpy()[perm], rtol=0, atol=1e-15)


def test_uniform_weighting_is_plain_mean(rng):
    per_point = rng.random(95)
    got = apply_articulatory_weighting(per_point, ArticulatorWeights.uniform()).item()
    assert got == pytest.approx(per_point.mean(), rel=1e-15)


def test_single_nonzero_weight_selects_point(rng):
    per_point = rng.random(95)
    imp = np.zeros(95)
    imp[17] = 3.0
    got = apply_articulatory_weighting(per_point, ArticulatorWeights(imp, np.full(95, 0.5))).item()
    assert got == per_point[17]


def test_doubling_importance_doubles_contribution(rng):
    per_point = rng.random(95)
    imp, std = rng.random(95) + 0.1, rng.random(95) + 0.1
    w1 = ArticulatorWeights(imp, std)
    imp2 = imp.copy()
    imp2[4] *= 2
    w2 = ArticulatorWeights(imp2, std)
    assert w2.combined[4] * per_point[4] == pytest.approx(2 * w1.combined[4] * per_point[4])


def test_all_zero_weights_rejected():
    with pytest.raises(ValueError):
        ArticulatorWeights(np.zeros(95), np.ones(95))


def test_heatmap_loss_uniform_weighting_matches_unweighted(rng):
    z = torch.tensor(rng.normal(size=(2, 95, 8, 8)))
    t = torch.tensor(random_distribution(rng, (2, 95, 8, 8)))
    plain = heatmap_loss(z, t, LossConfig())
    weighted = heatmap_loss(z, t, LossConfig(use_articulatory_weighting=True))
    assert weighted.item() == pytest.approx(plain.item(), rel=1e-14)


def test_multitask_examples(rng):
    traj = rng.normal(size=(10, 95, 2))
    pitch = rng.uniform(100, 200, size=10)
    cfg = LossConfig()
    assert multitask_weighted_l1(traj, traj, pitch, pitch, cfg).item() == 0
    assert multitask_weighted_l1(traj + 1, traj, pitch, pitch, cfg).item() == pytest.approx(1.0)
    # pitch in units of 100 Hz, lambda 0.1
    assert multitask_weighted_l1(traj, traj, pitch + 50, pitch, cfg).item() == pytest.approx(0.05)
    no_pitch = LossConfig(lambda_pitch=0.0)
    assert multitask_weighted_l1(traj + 2, traj, pitch + 50, pitch, no_pitch).item() == pytest.approx(2.0)


def test_multitask_length_mismatch(rng):
    with pytest.raises(ValueError):
        multitask_weighted_l1(np.zeros((5, 190)), np.zeros((4, 190)), np.zeros(5), np.zeros(5), LossConfig())
    with pytest.raises(ValueError):
        multitask_weighted_l1(np.zeros((5, 190)), np.zeros((5, 190)), np.zeros(4), np.zeros(4), LossConfig())


def test_loss_config_invariants():
    with pytest.raises(ValueError):
        LossConfig(objective="l2")
    with pytest.raises(ValueError):
        LossConfig(lambda_traj=0, lambda_pitch=0)
    cfg = LossConfig()
    assert (cfg.lambda_traj, cfg.lambda_pitch) == (1.0, 0.1)


def test_weights_csv_round_trip(tmp_path, rng):
    w = ArticulatorWeights(rng.random(95), rng.random(95))
    write_weights_csv(tmp_path / "w.csv", w)
    back = load_weights_csv(tmp_path / "w.csv")
    assert np.array_equal(back.combined, w.combined)


def test_weights_fallback_and_missing(tmp_path):
    assert np.all(weights_from_config(None).combined == 1)
    with pytest.raises(FileNotFoundError):
        weights_from_config(tmp_path / "absent.csv")


@given(arrays(np.float64, 95, elements=st.floats(0, 10)), st.floats(0.1, 10))
@settings(max_examples=50, deadline=None)
def test_weighting_is_scale_free(per_point, c):
    rng = np.random.default_rng(0)
    w = ArticulatorWeights(rng.random(95) + 0.1, rng.random(95) + 0.1)
    w_scaled = ArticulatorWeights(c * w.importance, w.movement_std)
    a = apply_articulatory_weighting(per_point, w).item()
    b = apply_articulatory_weighting(per_point, w_scaled).item()
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)
