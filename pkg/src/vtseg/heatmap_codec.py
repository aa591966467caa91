"""Keypoint <-> heatmap conversion.

Targets are isotropic Gaussians normalized to sum to one per grid. Decoding
takes the k highest-scoring pixels of each grid and returns their
score-weighted centroid; ties at the k-th rank go to the lower row-major
pixel index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .core_types import GRID, HeatmapStack, KeypointSet


@dataclass(frozen=True)
class CodecConfig:
    sigma: float = 2.0
    grid: int = GRID
    k: int = 25

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 1 <= self.k <= self.grid * self.grid:
            raise ValueError(f"k must be in [1, {self.grid ** 2}]")


class DegenerateHeatmapError(ValueError):
    pass


def _points_array(points) -> np.ndarray:
    if isinstance(points, KeypointSet):
        return points.points
    return np.asarray(points, dtype=np.float64)


def render_targets(points, cfg: CodecConfig = CodecConfig()) -> np.ndarray:
    """Render Gaussian targets for an array of points with shape (..., 2).

    Returns (..., grid, grid) float64 grids, each summing to one. The
    Gaussian is separable, so it is built from two 1-D profiles.
    """
    p = _points_array(points)
    if p.shape[-1] != 2:
        raise ValueError("points must have a trailing (x, y) axis")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p >= cfg.grid):
        raise ValueError(f"points must lie inside [0, {cfg.grid})")
    axis = np.arange(cfg.grid, dtype=np.float64)
    gx = np.exp(-((axis - p[..., 0:1]) ** 2) / (2 * cfg.sigma ** 2))
    gy = np.exp(-((axis - p[..., 1:2]) ** 2) / (2 * cfg.sigma ** 2))
    grids = gy[..., :, None] * gx[..., None, :]
    # Mass beyond the border is simply dropped before renormalizing.
    return grids / grids.sum(axis=(-2, -1), keepdims=True)


def render_target(points, cfg: CodecConfig = CodecConfig()) -> HeatmapStack:
    return HeatmapStack(render_targets(points, cfg), kind="gaussian_target")


def normalize_probs(h) -> HeatmapStack:
    """Per-grid softmax over all pixels of a logits stack."""
    grids = h.grids if isinstance(h, HeatmapStack) else np.asarray(h, dtype=np.float64)
    if isinstance(h, HeatmapStack) and h.kind != "logits":
        raise ValueError(f"normalize_probs expects logits, got {h.kind}")
    return HeatmapStack(softmax_grids(grids), kind="probabilities")


def softmax_grids(grids) -> np.ndarray:
    g = np.asarray(grids, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("logits must be finite")
    flat = g.reshape(g.shape[:-2] + (-1,))
    return softmax(flat, axis=-1).reshape(g.shape)


def topk_mask(flat: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row, lowest index winning ties."""
    n = flat.shape[-1]
    if k >= n:
        return np.ones(flat.shape, dtype=bool)
    kth = np.partition(flat, n - k, axis=-1)[..., n - k:n - k + 1]
    above = flat > kth
    need = k - above.sum(axis=-1, keepdims=True)
    tied = flat == kth
    return above | (tied & (np.cumsum(tied, axis=-1) <= need))


def decode_grids(grids, k: int = 25) -> np.ndarray:
    """Decode nonnegative score grids of shape (..., H, W) to (..., 2) points."""
    g = np.asarray(grids, dtype=np.float64)
    H, W = g.shape[-2:]
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise ValueError("decode expects finite nonnegative scores")
    flat = g.reshape(-1, H * W)
    weights = np.where(topk_mask(flat, k), flat, 0.0)
    total = weights.sum(axis=-1)
    if np.any(total <= 0):
        raise DegenerateHeatmapError("degenerate heatmap: all selected scores are zero")
    idx = np.arange(H * W)
    xs = (weights * (idx % W)).sum(axis=-1) / total
    ys = (weights * (idx // W)).sum(axis=-1) / total
    return np.stack([xs, ys], axis=-1).reshape(g.shape[:-2] + (2,))


def decode(h, cfg: CodecConfig = CodecConfig()) -> KeypointSet:
    if isinstance(h, HeatmapStack):
        if h.kind == "logits":
            raise ValueError("decode needs nonnegative scores; apply normalize_probs first")
        grids = h.grids
    else:
        grids = h
    return KeypointSet(decode_grids(grids, cfg.k))
