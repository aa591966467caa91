"""Figures for evaluation reports and training runs, plus keypoint animations."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core_types import FRAME_RATE, GRID, SAMPLES_PER_FRAME, SAMPLE_RATE  # noqa: E402
from .synthetic import chain_slices  # noqa: E402

# one color per articulator chain, RGB in [0, 1]
CHAIN_COLORS = np.array([
    [0.90, 0.25, 0.20],
    [0.20, 0.60, 0.90],
    [0.30, 0.80, 0.30],
    [0.95, 0.75, 0.10],
    [0.80, 0.40, 0.90],
    [0.10, 0.85, 0.85],
])
FRAME_MS = 1000.0 * SAMPLES_PER_FRAME / SAMPLE_RATE  # exactly 12 ms


def _point_colors() -> np.ndarray:
    colors = np.empty((sum(s.stop - s.start for s in chain_slices()), 3))
    for sl, c in zip(chain_slices(), CHAIN_COLORS):
        colors[sl] = c
    return colors


def plot_eval_report(report, out_dir) -> dict:
    """Per-point RMSE bars and per-clip metric dots; returns the figure paths."""
    out_dir = Path(out_dir)
    corpus = report.corpus()
    paths = {}

    fig, ax = plt.subplots(figsize=(10, 3.2))
    per_point = np.asarray(corpus["per_point_rmse"])
    ax.bar(np.arange(per_point.size), per_point, color=_point_colors(), width=0.85)
    ax.set_xlabel("point id")
    ax.set_ylabel("RMSE [px]")
    ax.set_title(f"per-point RMSE (corpus {corpus['rmse']:.3f} px, {corpus['clips']} clips)")
    ax.set_xlim(-1, per_point.size)
    fig.tight_layout()
    paths["per_point_figure"] = out_dir / "eval_per_point_rmse.png"
    fig.savefig(paths["per_point_figure"], dpi=120)
    plt.close(fig)

    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
    x = np.arange(len(report.clips))
    for ax, name, unit in zip(axes, ("rmse", "l1", "pcc"), ("px", "px", "")):
        vals = [np.nan if getattr(c, name) is None else getattr(c, name) for c in report.clips]
        ax.plot(x, vals, "o", ms=4)
        ax.set_title(name.upper())
        ax.set_xlabel("clip")
        if unit:
            ax.set_ylabel(unit)
    fig.tight_layout()
    paths["clip_figure"] = out_dir / "eval_clip_metrics.png"
    fig.savefig(paths["clip_figure"], dpi=120)
    plt.close(fig)
    return paths


def plot_training_history(history: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(1, len(history["train_loss"]) + 1), history["train_loss"], "o-", label="train")
    if history.get("val_loss"):
        ax.plot(np.arange(1, len(history["val_loss"]) + 1), history["val_loss"], "s-", label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def overlay_frame(frame: np.ndarray, points: np.ndarray, scale: int = 4) -> np.ndarray:
    """Upscale a grayscale frame and draw colored keypoint dots; returns uint8 RGB."""
    frame = np.asarray(frame, dtype=np.float64)
    img = np.repeat(np.repeat(frame, scale, axis=0), scale, axis=1)
    rgb = np.repeat(img[..., None], 3, axis=2)
    h, w = img.shape
    offset = (GRID - frame.shape[0]) // 2  # native frames sit inside the padded grid
    colors = _point_colors()
    yy, xx = np.mgrid[-1:2, -1:2]
    for (x, y), c in zip(np.asarray(points), colors):
        cx = int(round((x - offset + 0.5) * scale - 0.5))
        cy = int(round((y - offset + 0.5) * scale - 0.5))
        px, py = cx + xx.ravel(), cy + yy.ravel()
        ok = (px >= 0) & (px < w) & (py >= 0) & (py < h)
        rgb[py[ok], px[ok]] = c
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def render_panels(frames, traj_a, traj_b=None, scale: int = 4, gap: int = 4) -> np.ndarray:
    """(T, H, W, 3) uint8 frames, one panel per trajectory, side by side."""
    frames = np.asarray(frames)
    trajs = [traj_a] if traj_b is None else [traj_a, traj_b]
    for tr in trajs:
        if len(tr) != len(frames):
            raise ValueError(f"trajectory has {len(tr)} frames but the video has {len(frames)}")
    out = []
    for t in range(len(frames)):
        panels = [overlay_frame(frames[t], tr[t], scale) for tr in trajs]
        if len(panels) == 2:
            sep = np.full((panels[0].shape[0], gap, 3), 255, dtype=np.uint8)
            panels = [panels[0], sep, panels[1]]
        out.append(np.concatenate(panels, axis=1))
    return np.stack(out)


def write_animation(video: np.ndarray, path, frame_rate: float = FRAME_RATE) -> Path:
    """Animated PNG; the per-frame duration encodes the frame rate (12 ms at 83.33 Hz)."""
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    images = [Image.fromarray(f) for f in video]
    duration = 1000.0 / frame_rate
    images[0].save(path, format="PNG", save_all=True, append_images=images[1:],
                   duration=duration, loop=0)
    return path
