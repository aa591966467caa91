"""Attention-gated U-Net producing 95 heatmap logits per 96x96 frame."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import heatmap_codec
from .augmentation import AugmentConfig, augment_sample
from .core_types import FRAME_RATE, GRID, N_POINTS, Trajectory
from .heatmap_codec import CodecConfig
from .losses import LossConfig, heatmap_loss
from .temporal_filter import FilterConfig, smooth_array

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class UNetConfig:
    depth: int = 4
    base_channels: int = 32
    attention: bool = True
    out_channels: int = N_POINTS

    def __post_init__(self):
        if not 1 <= self.depth <= 5:
            raise ValueError("depth must be between 1 and 5 for 96x96 inputs")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.out_channels != N_POINTS:
            raise ValueError(f"out_channels must be {N_POINTS}")


@dataclass
class TrainConfig:
    epochs: int = 6
    batch_size: int = 8
    lr: float = 1e-3
    optimizer: str = "adam"
    weight_decay: float = 0.0
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("adam", "adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def _groups(channels: int) -> int:
    return math.gcd(channels, 8)


class ConvBlock(nn.Module):
    """Two 3x3 conv + group-norm layers with a residual shortcut."""

    def __init__(self, ch_in, ch_out):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch_in, ch_out, 3, padding=1),
            nn.GroupNorm(_groups(ch_out), ch_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(ch_out, ch_out, 3, padding=1),
            nn.GroupNorm(_groups(ch_out), ch_out),
        )
        self.shortcut = nn.Identity() if ch_in == ch_out else nn.Conv2d(ch_in, ch_out, 1)

    def forward(self, x):
        return F.relu(self.body(x) + self.shortcut(x))


class AttentionGate(nn.Module):
    """Additive attention: mask = sigmoid(psi(relu(W_s skip + W_g gating)))."""

    def __init__(self, skip_channels, gating_channels, inter_channels):
        super().__init__()
        self.w_skip = nn.Conv2d(skip_channels, inter_channels, 1)
        self.w_gate = nn.Conv2d(gating_channels, inter_channels, 1)
        self.psi = nn.Conv2d(inter_channels, 1, 1)
        self.last_mask = None

    def forward(self, skip, gating):
        s = self.w_skip(skip)
        g = self.w_gate(gating)
        if s.shape[-2:] != g.shape[-2:]:
            raise ValueError(f"gating size {tuple(g.shape[-2:])} does not match skip {tuple(s.shape[-2:])}")
        mask = torch.sigmoid(self.psi(F.relu(s + g)))
        self.last_mask = mask.detach()
        return skip * mask


class AttentionUNet(nn.Module):
    def __init__(self, cfg: UNetConfig = UNetConfig()):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
        self.encoders = nn.ModuleList([ConvBlock(1, widths[0])])
        self.encoders.extend(ConvBlock(widths[i - 1], widths[i]) for i in range(1, cfg.depth + 1))
        self.ups = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.ups.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2))
            if cfg.attention:
                self.gates.append(AttentionGate(widths[i], widths[i], max(widths[i] // 2, 1)))
            self.decoders.append(ConvBlock(2 * widths[i], widths[i]))
        self.head = nn.Conv2d(widths[0], cfg.out_channels, 1)

    def forward(self, x):
        if x.shape[-2:] != (GRID, GRID):
            raise ValueError(f"expected padded {GRID}x{GRID} input, got {tuple(x.shape[-2:])}")
        if x.dim() == 3:
            x = x.unsqueeze(1)
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        x = skips.pop()
        for j, (up, dec) in enumerate(zip(self.ups, self.decoders)):
            x = up(x)
            skip = skips.pop()
            if self.cfg.attention:
                skip = self.gates[j](skip, x)
            x = dec(torch.cat([skip, x], dim=1))
        return self.head(x)

    def bottleneck(self, x):
        """Spatially pooled deepest features, one vector per frame."""
        if x.dim() == 3:
            x = x.unsqueeze(1)
        for i, enc in enumerate(self.encoders):
            x = enc(x if i == 0 else F.max_pool2d(x, 2))
        return x.mean(dim=(-2, -1))

    def attention_masks(self) -> list:
        return [g.last_mask for g in self.gates]


def build(cfg: UNetConfig = UNetConfig()) -> AttentionUNet:
    return AttentionUNet(cfg)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def forward(model: AttentionUNet, frames) -> np.ndarray:
    """Inference-mode logits (B, 95, 96, 96) for a batch of padded frames."""
    x = torch.as_tensor(np.asarray(frames, dtype=np.float32))
    if x.dim() == 2:
        x = x[None]
    model.eval()
    with torch.no_grad():
        return model(x).numpy()


def frame_features(model: AttentionUNet, frames, batch_size: int = 16) -> np.ndarray:
    """Pooled bottleneck features (T, C) per frame, an alternative fusion input."""
    frames = np.asarray(frames, dtype=np.float32)
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(frames), batch_size):
            out.append(model.bottleneck(torch.as_tensor(frames[i:i + batch_size])).numpy())
    return np.concatenate(out).astype(np.float64)


def output_scores(output: torch.Tensor | np.ndarray, objective: str) -> np.ndarray:
    """Turn raw network outputs into nonnegative scores for decoding."""
    out = np.asarray(output, dtype=np.float64)
    if objective == "kl":
        return heatmap_codec.softmax_grids(out)
    # MSE-trained outputs regress the targets directly but can dip below zero;
    # shifting by the grid minimum keeps the ranking and makes scores nonnegative.
    return out - out.min(axis=(-2, -1), keepdims=True)


def predict_raw(model: AttentionUNet, frames, objective: str = "kl",
                codec: CodecConfig = CodecConfig(), batch_size: int = 16) -> np.ndarray:
    """Per-frame decoded keypoints (T, 95, 2) without temporal smoothing."""
    frames = np.asarray(frames, dtype=np.float32)
    out = np.empty((len(frames), N_POINTS, 2))
    model.eval()
    with torch.no_grad():
        for s in range(0, len(frames), batch_size):
            logits = model(torch.from_numpy(frames[s:s + batch_size]))
            out[s:s + batch_size] = heatmap_codec.decode_grids(output_scores(logits, objective), codec.k)
    return out


def predict_keypoints(model: AttentionUNet, frames, objective: str = "kl",
                      filter_cfg: FilterConfig | None = FilterConfig(),
                      codec: CodecConfig = CodecConfig(), clip_id: str = "",
                      return_raw: bool = False):
    raw = predict_raw(model, frames, objective, codec)
    smoothed = raw if filter_cfg is None else smooth_array(raw, filter_cfg, axis=0)
    traj = Trajectory(smoothed, frame_rate=FRAME_RATE, clip_id=clip_id)
    if return_raw:
        return traj, Trajectory(raw, frame_rate=FRAME_RATE, clip_id=clip_id)
    return traj


def _make_optimizer(model, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=0.9, weight_decay=cfg.weight_decay)


def _targets(points: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(heatmap_codec.render_targets(points).astype(np.float32))


def evaluate_loss(model, frames, points, loss_cfg: LossConfig, batch_size: int = 16) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(frames), batch_size):
            x = torch.from_numpy(np.asarray(frames[s:s + batch_size], dtype=np.float32))
            y = _targets(points[s:s + batch_size])
            total += float(heatmap_loss(model(x), y, loss_cfg)) * len(x)
    return total / len(frames)


def train(model: AttentionUNet, frames, points, cfg: TrainConfig = TrainConfig(),
          val_frames=None, val_points=None, checkpoint_path=None):
    """Train on padded frames (N, 96, 96) with keypoints (N, 95, 2).

    Returns the model and a history dict with per-epoch losses and, when
    validation data is given, validation loss and keypoint RMSE.
    """
    frames = np.asarray(frames, dtype=np.float32)
    points = np.asarray(points, dtype=np.float64)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng(cfg.augment.seed + 7919 * cfg.seed)
    opt = _make_optimizer(model, cfg)
    n = len(frames)
    steps = cfg.steps_per_epoch or max(1, math.ceil(n / cfg.batch_size))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs * steps)
    history = {"epoch": [], "train_loss": [], "step_loss": [], "val_loss": [], "val_rmse": []}
    have_val = val_frames is not None and len(val_frames) > 0
    if have_val:
        history["initial_val_loss"] = evaluate_loss(model, val_frames, val_points, cfg.loss)
    order = np.array([], dtype=int)
    for epoch in range(cfg.epochs):
        model.train()
        t0 = time.perf_counter()
        losses = []
        for _ in range(steps):
            if len(order) < cfg.batch_size:
                order = np.concatenate([order, rng.permutation(n)])
            idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
            xb, pb = [], []
            for i in idx:
                x, p = augment_sample(frames[i], points[i], cfg.augment, aug_rng)
                xb.append(x)
                pb.append(p)
            x = torch.from_numpy(np.stack(xb))[:, None]
            y = _targets(np.stack(pb))
            loss = heatmap_loss(model(x), y, cfg.loss)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {len(losses)} (lr={sched.get_last_lr()[0]:.2e})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        history["epoch"].append(epoch)
        history["train_loss"].append(float(np.mean(losses)))
        history["step_loss"].extend(losses)
        msg = f"epoch {epoch + 1}/{cfg.epochs} train_loss={np.mean(losses):.6g}"
        if have_val:
            vl = evaluate_loss(model, val_frames, val_points, cfg.loss)
            pred = predict_raw(model, val_frames, cfg.loss.objective)
            vr = float(np.sqrt(((pred - np.asarray(val_points)) ** 2).mean()))
            history["val_loss"].append(vl)
            history["val_rmse"].append(vr)
            msg += f" val_loss={vl:.6g} val_rmse={vr:.3f}px"
        log.info("%s (%.1fs)", msg, time.perf_counter() - t0)
    if checkpoint_path is not None:
        from .formats import save_unet_checkpoint
        save_unet_checkpoint(checkpoint_path, model, objective=cfg.loss.objective,
                             extra={"train": train_config_to_dict(cfg)})
    return model, history


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "epochs": cfg.epochs, "batch_size": cfg.batch_size, "lr": cfg.lr,
        "optimizer": cfg.optimizer, "weight_decay": cfg.weight_decay, "seed": cfg.seed,
        "steps_per_epoch": cfg.steps_per_epoch,
        "loss": {"objective": cfg.loss.objective,
                 "use_articulatory_weighting": cfg.loss.use_articulatory_weighting},
        "augment": {"rotation_deg": cfg.augment.rotation_deg, "scale": list(cfg.augment.scale),
                    "translation_px": cfg.augment.translation_px,
                    "shear_deg": cfg.augment.shear_deg, "seed": cfg.augment.seed},
    }
