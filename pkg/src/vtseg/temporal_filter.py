"""Zero-phase Gaussian low-pass smoothing of keypoint trajectories."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .core_types import Trajectory


@dataclass(frozen=True)
class FilterConfig:
    sigma_frames: float = 1.5

    def __post_init__(self):
        if not self.sigma_frames > 0:
            raise ValueError("sigma_frames must be positive")

    @property
    def halfwidth(self) -> int:
        return max(1, math.ceil(4 * self.sigma_frames))


def gaussian_kernel(cfg: FilterConfig = FilterConfig()) -> np.ndarray:
    n = np.arange(-cfg.halfwidth, cfg.halfwidth + 1, dtype=np.float64)
    w = np.exp(-0.5 * (n / cfg.sigma_frames) ** 2)
    return w / w.sum()


def smooth_array(x, cfg: FilterConfig = FilterConfig(), axis: int = 0) -> np.ndarray:
    """Filter every sequence along ``axis`` with reflect boundaries."""
    x = np.asarray(x, dtype=np.float64)
    # convolve1d flips the kernel; irrelevant since it is symmetric.
    return convolve1d(x, gaussian_kernel(cfg), axis=axis, mode="reflect")


def smooth(traj: Trajectory, cfg: FilterConfig = FilterConfig()) -> Trajectory:
    out = smooth_array(traj.points, cfg, axis=0).astype(traj.points.dtype, copy=False)
    return traj.replace(out)


def frequency_response(kernel: np.ndarray, omega) -> np.ndarray:
    """Real frequency response of a symmetric kernel at angular frequency omega."""
    h = len(kernel) // 2
    n = np.arange(-h, h + 1)
    omega = np.atleast_1d(np.asarray(omega, dtype=np.float64))
    return (kernel[None, :] * np.cos(omega[:, None] * n[None, :])).sum(axis=1)
