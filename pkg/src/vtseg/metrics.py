"""RMSE, L1 and Pearson correlation between keypoint trajectories.

All metrics operate on coordinates: an array of shape (T, 95, 2) is treated
as T samples of 190 scalar dimensions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core_types import Trajectory

SCHEMA_VERSION = 1


class UndefinedCorrelationError(ValueError):
    pass


def _pair(pred, target):
    p = pred.points if isinstance(pred, Trajectory) else np.asarray(pred)
    t = target.points if isinstance(target, Trajectory) else np.asarray(target)
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return p, t


def rmse(pred, target):
    """Return (overall RMSE, per-point RMSE over each point's 2T coordinates)."""
    p, t = _pair(pred, target)
    sq = (p - t) ** 2
    per_point = np.sqrt(sq.mean(axis=(0, 2)))
    return float(np.sqrt(sq.mean())), per_point


def l1(pred, target):
    p, t = _pair(pred, target)
    err = np.abs(p - t)
    return float(err.mean()), err.mean(axis=(0, 2))


def pcc(pred, target):
    """Mean Pearson correlation over coordinate dimensions.

    Returns (mean, per-dimension vector, number of skipped dimensions).
    Dimensions where either series is constant get NaN and are skipped.
    """
    p, t = _pair(pred, target)
    T = p.shape[0]
    if T < 2:
        raise UndefinedCorrelationError("correlation needs at least two frames")
    p = p.reshape(T, -1)
    t = t.reshape(T, -1)
    pc = p - p.mean(axis=0)
    tc = t - t.mean(axis=0)
    sp = np.sqrt((pc ** 2).sum(axis=0))
    st = np.sqrt((tc ** 2).sum(axis=0))
    ok = (sp > 0) & (st > 0)
    if not ok.any():
        raise UndefinedCorrelationError("undefined correlation: every dimension is constant")
    per_dim = np.full(p.shape[1], np.nan)
    per_dim[ok] = (pc[:, ok] * tc[:, ok]).sum(axis=0) / (sp[ok] * st[ok])
    per_dim = np.clip(per_dim, -1.0, 1.0)
    return float(np.nanmean(per_dim)), per_dim, int((~ok).sum())


@dataclass
class ClipMetrics:
    clip_id: str
    frames: int
    rmse: float
    l1: float
    pcc: float | None
    pcc_skipped_dims: int
    per_point_rmse: list = field(repr=False)
    per_point_l1: list = field(repr=False)
    per_dim_pcc: list = field(repr=False)


def evaluate_clip(clip_id: str, pred, target) -> ClipMetrics:
    r, r_pts = rmse(pred, target)
    a, a_pts = l1(pred, target)
    try:
        c, c_dims, skipped = pcc(pred, target)
        c_dims = [None if np.isnan(v) else float(v) for v in c_dims]
    except UndefinedCorrelationError:
        c, c_dims, skipped = None, [], _pair(pred, target)[0][0].size
    return ClipMetrics(clip_id, int(_pair(pred, target)[0].shape[0]), r, a, c, skipped,
                       r_pts.tolist(), a_pts.tolist(), c_dims)


@dataclass
class EvalReport:
    clips: list[ClipMetrics]
    schema_version: int = SCHEMA_VERSION

    def corpus(self) -> dict:
        """Frame-count-weighted means of the clip metrics."""
        w = np.array([c.frames for c in self.clips], dtype=np.float64)
        out = {"clips": len(self.clips), "frames": int(w.sum())}
        for name in ("rmse", "l1"):
            v = np.array([getattr(c, name) for c in self.clips])
            out[name] = float((w * v).sum() / w.sum())
        have = [(c.frames, c.pcc) for c in self.clips if c.pcc is not None]
        if have:
            cw, cv = np.array(have, dtype=np.float64).T
            out["pcc"] = float((cw * cv).sum() / cw.sum())
        else:
            out["pcc"] = None
        out["per_point_rmse"] = (np.array([c.per_point_rmse for c in self.clips]).T @ w / w.sum()).tolist()
        out["per_point_l1"] = (np.array([c.per_point_l1 for c in self.clips]).T @ w / w.sum()).tolist()
        return out

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "corpus": self.corpus(),
            "clips": [asdict(c) for c in self.clips],
        }
