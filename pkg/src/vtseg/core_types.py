"""Shared data model for frames, keypoints, heatmaps and audio.

Coordinates follow one convention everywhere: ``x`` is the column index and
``y`` the row index in the padded 96x96 frame, origin at the top-left, with
integer values at pixel centers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

NATIVE_SIZE = 84
GRID = 96
PAD = (GRID - NATIVE_SIZE) // 2
N_POINTS = 95
N_COORDS = 2 * N_POINTS
SAMPLE_RATE = 16000
SAMPLES_PER_FRAME = 192
# 16000 / 192; the nominal "83.33 Hz" of the scanner, kept exact so that
# audio and video indices line up without drift.
FRAME_RATE = SAMPLE_RATE / SAMPLES_PER_FRAME

HEATMAP_KINDS = ("logits", "probabilities", "gaussian_target")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Frame:
    pixels: np.ndarray
    padded: bool = False

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ValueError(f"frame must be 2-D, got shape {px.shape}")
        expected = GRID if self.padded else NATIVE_SIZE
        if px.shape != (expected, expected):
            raise ValueError(f"{'padded' if self.padded else 'native'} frame must be "
                             f"{expected}x{expected}, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("frame intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", _readonly(px))

    @classmethod
    def from_raw(cls, raw) -> "Frame":
        """Build a native frame from arbitrary intensities via per-frame min-max."""
        return cls(normalize_intensity(raw), padded=False)

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class KeypointSet:
    points: np.ndarray  # (95, 2) as (x, y)

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.shape != (N_POINTS, 2):
            raise ValueError(f"expected ({N_POINTS}, 2) points, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("keypoint coordinates must be finite")
        object.__setattr__(self, "points", _readonly(p))

    @property
    def point_ids(self) -> np.ndarray:
        return np.arange(N_POINTS)

    def in_frame(self) -> bool:
        return bool(np.all((self.points >= 0) & (self.points < GRID)))

    def flat(self) -> np.ndarray:
        """Interleaved (x0, y0, x1, y1, ...) vector of 190 coordinates."""
        return self.points.reshape(-1)


@dataclass(frozen=True)
class Trajectory:
    points: np.ndarray  # (T, 95, 2)
    frame_rate: float = FRAME_RATE
    clip_id: str = ""

    def __post_init__(self):
        p = np.asarray(self.points)
        if p.ndim != 3 or p.shape[1:] != (N_POINTS, 2):
            raise ValueError(f"trajectory must have shape (T, {N_POINTS}, 2), got {p.shape}")
        if p.shape[0] < 1:
            raise ValueError("trajectory needs at least one frame")
        if not np.all(np.isfinite(p)):
            raise ValueError("trajectory coordinates must be finite")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        object.__setattr__(self, "points", _readonly(p))

    def __len__(self) -> int:
        return self.points.shape[0]

    def frame(self, t: int) -> KeypointSet:
        return KeypointSet(self.points[t])

    def flat(self) -> np.ndarray:
        return self.points.reshape(len(self), N_COORDS)

    def replace(self, points) -> "Trajectory":
        return Trajectory(points, frame_rate=self.frame_rate, clip_id=self.clip_id)


@dataclass(frozen=True)
class HeatmapStack:
    grids: np.ndarray  # (95, 96, 96)
    kind: str = "probabilities"

    def __post_init__(self):
        g = np.asarray(self.grids, dtype=np.float64)
        if self.kind not in HEATMAP_KINDS:
            raise ValueError(f"unknown heatmap kind {self.kind!r}")
        if g.shape != (N_POINTS, GRID, GRID):
            raise ValueError(f"heatmap stack must be ({N_POINTS}, {GRID}, {GRID}), got {g.shape}")
        if self.kind != "logits":
            if np.any(g < 0):
                raise ValueError(f"{self.kind} grids must be nonnegative")
            sums = g.sum(axis=(1, 2))
            if not np.allclose(sums, 1.0, atol=1e-6, rtol=0):
                raise ValueError(f"{self.kind} grids must each sum to 1")
        object.__setattr__(self, "grids", _readonly(g))


@dataclass(frozen=True)
class ArticulatorWeights:
    importance: np.ndarray
    movement_std: np.ndarray
    combined: np.ndarray = field(init=False)

    def __post_init__(self):
        imp = np.asarray(self.importance, dtype=np.float64)
        std = np.asarray(self.movement_std, dtype=np.float64)
        if imp.shape != (N_POINTS,) or std.shape != (N_POINTS,):
            raise ValueError(f"weights need {N_POINTS} entries each")
        if np.any(imp < 0) or np.any(std < 0) or not np.all(np.isfinite(imp * std)):
            raise ValueError("weights must be finite and nonnegative")
        combined = imp * std
        if not np.any(combined > 0):
            raise ValueError("at least one articulator weight must be positive")
        object.__setattr__(self, "importance", _readonly(imp))
        object.__setattr__(self, "movement_std", _readonly(std))
        object.__setattr__(self, "combined", _readonly(combined))

    @classmethod
    def uniform(cls) -> "ArticulatorWeights":
        return cls(np.ones(N_POINTS), np.ones(N_POINTS))


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError("audio must be mono (1-D)")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if not np.all(np.isfinite(s)) or (s.size and np.abs(s).max() > 1.0):
            raise ValueError("audio samples must be finite with |x| <= 1")
        object.__setattr__(self, "samples", _readonly(s))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class PitchContour:
    f0: np.ndarray
    frame_rate: float = FRAME_RATE

    def __post_init__(self):
        f0 = np.asarray(self.f0, dtype=np.float64)
        if f0.ndim != 1:
            raise ValueError("pitch contour must be 1-D")
        if not np.all(np.isfinite(f0)) or np.any(f0 < 0):
            raise ValueError("f0 must be finite and nonnegative")
        object.__setattr__(self, "f0", _readonly(f0))

    def warnings(self) -> list[str]:
        if np.any(self.f0 >= 500.0):
            return ["f0 above 500 Hz"]
        return []


def normalize_intensity(raw) -> np.ndarray:
    """Per-frame min-max scaling to [0, 1]; constant frames map to zeros."""
    a = np.asarray(raw, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.float32)
    return ((a - lo) / (hi - lo)).astype(np.float32)


def pad_frame(f: Frame) -> Frame:
    if f.padded or f.pixels.shape != (NATIVE_SIZE, NATIVE_SIZE):
        raise ValueError(f"pad_frame expects a native {NATIVE_SIZE}x{NATIVE_SIZE} frame")
    return Frame(pad_pixels(f.pixels), padded=True)


def crop_frame(f: Frame) -> Frame:
    if not f.padded:
        raise ValueError("crop_frame expects a padded frame")
    return Frame(f.pixels[PAD:PAD + NATIVE_SIZE, PAD:PAD + NATIVE_SIZE], padded=False)


def pad_pixels(pixels: np.ndarray) -> np.ndarray:
    """Zero-pad the last two axes from 84x84 to 96x96 (works on stacks)."""
    pixels = np.asarray(pixels)
    if pixels.shape[-2:] != (NATIVE_SIZE, NATIVE_SIZE):
        raise ValueError(f"expected trailing {NATIVE_SIZE}x{NATIVE_SIZE}, got {pixels.shape}")
    widths = [(0, 0)] * (pixels.ndim - 2) + [(PAD, PAD), (PAD, PAD)]
    return np.pad(pixels, widths, mode="constant", constant_values=0)


def shift_keypoints(points, offset: float = PAD) -> np.ndarray:
    """Move native-frame coordinates into padded-frame coordinates."""
    return np.asarray(points, dtype=np.float64) + offset


def validate_pair(frames: Sequence, audio: AudioClip) -> list[str]:
    """Check a clip's frames against its audio; returns violation messages."""
    report = []
    T = len(frames)
    if T == 0:
        report.append("empty clip")
    for i, f in enumerate(frames):
        px = f.pixels if isinstance(f, Frame) else np.asarray(f)
        if px.shape not in ((NATIVE_SIZE, NATIVE_SIZE), (GRID, GRID)):
            report.append(f"frame {i}: bad shape {px.shape}")
        elif not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > 1:
            report.append(f"frame {i}: intensities outside [0, 1]")
    if audio.sample_rate != SAMPLE_RATE:
        report.append(f"audio sample rate {audio.sample_rate} != {SAMPLE_RATE}")
    if T > 0 and abs(audio.samples.size - SAMPLES_PER_FRAME * T) > SAMPLES_PER_FRAME:
        report.append("audio/video length mismatch: "
                      f"{audio.samples.size} samples for {T} frames "
                      f"(expected {SAMPLES_PER_FRAME * T} +/- {SAMPLES_PER_FRAME})")
    return report
