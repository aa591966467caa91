"""Training objectives for the heatmap U-Net and the fusion model.

Pixel losses return one value per keypoint channel (shape ``(..., 95)``) so
that articulatory weighting can be applied afterwards.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core_types import N_POINTS, ArticulatorWeights

LOG_EPS = math.log(1e-12)
PITCH_UNIT_HZ = 100.0


@dataclass
class LossConfig:
    objective: str = "kl"
    use_articulatory_weighting: bool = False
    weights: ArticulatorWeights = field(default_factory=ArticulatorWeights.uniform)
    lambda_traj: float = 1.0
    lambda_pitch: float = 0.1

    def __post_init__(self):
        if self.objective not in ("mse", "kl"):
            raise ValueError(f"objective must be 'mse' or 'kl', got {self.objective!r}")
        if self.lambda_traj < 0 or self.lambda_pitch < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_traj + self.lambda_pitch <= 0:
            raise ValueError("lambda_traj + lambda_pitch must be positive")


def _tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def pixel_mse(pred, target):
    pred = _tensor(pred)
    target = _tensor(target, pred)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean(dim=(-2, -1))


def pixel_kl(pred_logits, target, check: bool = True):
    """KL(target || softmax(logits)) per grid, computed with log-softmax."""
    logits = _tensor(pred_logits)
    target = _tensor(target, logits)
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(target.shape)}")
    if check:
        if not torch.isfinite(logits).all():
            raise ValueError("logits must be finite")
        sums = target.sum(dim=(-2, -1))
        if (sums - 1).abs().max() > 1e-5 or (target < 0).any():
            raise ValueError("target grids must be distributions summing to 1")
    flat = logits.flatten(-2)
    t = target.flatten(-2)
    log_q = torch.log_softmax(flat, dim=-1)
    log_t = torch.log(t.clamp_min(1e-12)).clamp_min(LOG_EPS)
    return torch.where(t > 0, t * (log_t - log_q), torch.zeros_like(t)).sum(dim=-1)


def pixel_mse_grad(pred, target) -> np.ndarray:
    """Closed-form gradient of the per-point MSE summed over points."""
    pred = np.asarray(pred, dtype=np.float64)
    n = pred.shape[-1] * pred.shape[-2]
    return 2.0 * (pred - np.asarray(target, dtype=np.float64)) / n


def pixel_kl_grad(pred_logits, target) -> np.ndarray:
    """Closed-form gradient of the per-point KL summed over points: q - p."""
    z = np.asarray(pred_logits, dtype=np.float64)
    flat = z.reshape(z.shape[:-2] + (-1,))
    q = np.exp(flat - flat.max(axis=-1, keepdims=True))
    q /= q.sum(axis=-1, keepdims=True)
    t = np.asarray(target, dtype=np.float64).reshape(flat.shape)
    return (q * t.sum(axis=-1, keepdims=True) - t).reshape(z.shape)


def apply_articulatory_weighting(per_point, w: ArticulatorWeights):
    """Weighted mean over the point axis, normalized by the weight sum."""
    per_point = _tensor(per_point)
    combined = torch.tensor(w.combined, dtype=per_point.dtype, device=per_point.device)
    if per_point.shape[-1] != combined.shape[0]:
        raise ValueError(f"expected {combined.shape[0]} per-point losses, got {per_point.shape[-1]}")
    total = combined.sum()
    if total <= 0:
        raise ValueError("all-zero articulatory weights")
    return (per_point * combined).sum(dim=-1) / total


def heatmap_loss(output, target, cfg: LossConfig):
    """Scalar batch loss for U-Net outputs of shape (B, 95, H, W)."""
    if cfg.objective == "kl":
        per_point = pixel_kl(output, target, check=False)
    else:
        per_point = pixel_mse(output, target)
    if cfg.use_articulatory_weighting:
        return apply_articulatory_weighting(per_point, cfg.weights).mean()
    return per_point.mean()


def multitask_weighted_l1(pred_traj, target_traj, pred_pitch, target_pitch, cfg: LossConfig):
    """lambda_traj * mean|traj error| + lambda_pitch * mean|pitch error| / 100 Hz.

    Trajectories are (..., T, 95, 2) or (..., T, 190); pitch is (..., T) in Hz.
    """
    pt = _tensor(pred_traj)
    tt = _tensor(target_traj, pt)
    pp = _tensor(pred_pitch, pt)
    tp = _tensor(target_pitch, pt)
    if pt.shape != tt.shape:
        raise ValueError(f"trajectory length mismatch: {tuple(pt.shape)} vs {tuple(tt.shape)}")
    if pp.shape != tp.shape:
        raise ValueError(f"pitch length mismatch: {tuple(pp.shape)} vs {tuple(tp.shape)}")
    if pt.shape[-1] != 2:
        pt = pt.reshape(pt.shape[:-1] + (-1, 2))
        tt = tt.reshape(tt.shape[:-1] + (-1, 2))
    if pt.shape[-3] != pp.shape[-1]:
        raise ValueError("trajectory and pitch have different frame counts")
    err = (pt - tt).abs()
    if cfg.use_articulatory_weighting:
        per_point = err.mean(dim=-1).flatten(0, -2).mean(dim=0)
        traj_term = apply_articulatory_weighting(per_point, cfg.weights)
    else:
        traj_term = err.mean()
    pitch_term = (pp - tp).abs().mean() / PITCH_UNIT_HZ
    return cfg.lambda_traj * traj_term + cfg.lambda_pitch * pitch_term


def load_weights_csv(path) -> ArticulatorWeights:
    """Read ``point_id,importance,movement_std`` rows; missing ids get weight 0."""
    imp = np.zeros(N_POINTS)
    std = np.zeros(N_POINTS)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            i = int(row["point_id"])
            if not 0 <= i < N_POINTS:
                raise ValueError(f"point_id {i} out of range in {path}")
            imp[i] = float(row["importance"])
            std[i] = float(row["movement_std"])
    return ArticulatorWeights(imp, std)


def write_weights_csv(path, w: ArticulatorWeights) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["point_id", "importance", "movement_std"])
        for i in range(N_POINTS):
            out.writerow([i, repr(float(w.importance[i])), repr(float(w.movement_std[i]))])


def weights_from_config(path) -> ArticulatorWeights:
    if path is None:
        return ArticulatorWeights.uniform()
    if not Path(path).exists():
        raise FileNotFoundError(f"weights file not found: {path}")
    return load_weights_csv(path)
