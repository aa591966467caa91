"""Random affine augmentation applied jointly to a padded frame and its keypoints."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import affine_transform

from .core_types import GRID, Frame, KeypointSet

CENTER = np.array([48.0, 48.0])
MAX_ATTEMPTS = 10


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 10.0
    scale: tuple = (0.9, 1.1)
    translation_px: float = 5.0
    shear_deg: float = 5.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale
        if not 0 < lo <= 1.0 <= hi:
            raise ValueError("scale range must be positive and contain 1")
        if self.rotation_deg < 0 or self.translation_px < 0 or self.shear_deg < 0:
            raise ValueError("ranges are given as nonnegative half-widths")

    @classmethod
    def off(cls, seed: int = 0) -> "AugmentConfig":
        return cls(rotation_deg=0.0, scale=(1.0, 1.0), translation_px=0.0, shear_deg=0.0, seed=seed)


@dataclass(frozen=True)
class AffineTransform:
    """p' = A (p - c) + c + t on (x, y) coordinates, c = (48, 48)."""

    A: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64).reshape(2, 2)
        t = np.asarray(self.t, dtype=np.float64).reshape(2)
        if abs(np.linalg.det(A)) < 1e-12:
            raise ValueError("singular affine transform")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(2), np.zeros(2))

    @classmethod
    def from_params(cls, rotation_deg=0.0, scale=1.0, shear_deg=0.0, translation=(0.0, 0.0)):
        th = np.deg2rad(rotation_deg)
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        shear = np.array([[1.0, np.tan(np.deg2rad(shear_deg))], [0.0, 1.0]])
        return cls(scale * rot @ shear, np.asarray(translation, dtype=np.float64))

    def is_identity(self) -> bool:
        return np.array_equal(self.A, np.eye(2)) and not np.any(self.t)


def sample_affine(cfg: AugmentConfig, rng: np.random.Generator) -> AffineTransform:
    rot = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    scale = rng.uniform(*cfg.scale)
    shear = rng.uniform(-cfg.shear_deg, cfg.shear_deg)
    trans = rng.uniform(-cfg.translation_px, cfg.translation_px, size=2)
    return AffineTransform.from_params(rot, scale, shear, trans)


def warp_pixels(pixels: np.ndarray, T: AffineTransform) -> np.ndarray:
    """Inverse-warp a 2-D image with bilinear sampling and zero fill."""
    if T.is_identity():
        return np.array(pixels, copy=True)
    # scipy works in (row, col) = (y, x); conjugate A by the axis swap.
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    A_rc = swap @ T.A @ swap
    inv = np.linalg.inv(A_rc)
    c_rc = CENTER[::-1]
    t_rc = T.t[::-1]
    offset = c_rc - inv @ (c_rc + t_rc)
    out = affine_transform(np.asarray(pixels, dtype=np.float64), inv, offset=offset,
                           order=1, mode="constant", cval=0.0, prefilter=False)
    return out


def apply_to_frame(f: Frame, T: AffineTransform) -> Frame:
    if not f.padded:
        raise ValueError("augmentation operates on padded frames")
    out = np.clip(warp_pixels(f.pixels, T), 0.0, 1.0)
    return Frame(out.astype(np.float32), padded=True)


def transform_points(points: np.ndarray, T: AffineTransform) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(points, dtype=np.float64)
    # (p - c) + c is not bit-exact, so identity gets its own path
    moved = p.copy() if T.is_identity() else (p - CENTER) @ T.A.T + CENTER + T.t
    valid = np.all((moved >= 0) & (moved < GRID), axis=-1)
    return moved, valid


def apply_to_points(p: KeypointSet, T: AffineTransform) -> tuple[KeypointSet, np.ndarray]:
    moved, valid = transform_points(p.points, T)
    return KeypointSet(moved), valid


def augment_sample(pixels: np.ndarray, points: np.ndarray, cfg: AugmentConfig,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Warp a padded frame and its points, resampling until every point stays in frame.

    Falls back to the untouched sample after MAX_ATTEMPTS rejections.
    """
    for _ in range(MAX_ATTEMPTS):
        T = sample_affine(cfg, rng)
        moved, valid = transform_points(points, T)
        if valid.all():
            return np.clip(warp_pixels(pixels, T), 0.0, 1.0).astype(np.float32), moved
    return np.asarray(pixels, dtype=np.float32), np.asarray(points, dtype=np.float64)
