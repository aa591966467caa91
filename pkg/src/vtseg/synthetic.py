"""Synthetic vocal-tract-like clips with known keypoints and coupled audio.

Each clip has six articulator chains (95 points in total) that bend and
shift over time under smooth band-limited latent signals. Frames are
rendered from splines through the chains plus a blob at every keypoint on a
textured background. The audio is a harmonic tone whose F0 tracks the
height of one designated point and whose loudness tracks another, so the
waveform carries real information about the motion.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter

from .core_types import (FRAME_RATE, N_POINTS, NATIVE_SIZE, PAD, SAMPLE_RATE,
                         SAMPLES_PER_FRAME, AudioClip, PitchContour, Trajectory)

# name, point count, control polyline in padded (x, y) coordinates
CHAINS = (
    ("tongue", 25, ((30.0, 58.0), (38.0, 44.0), (52.0, 40.0), (62.0, 50.0), (64.0, 64.0))),
    ("palate", 15, ((26.0, 32.0), (40.0, 26.0), (56.0, 26.0), (68.0, 32.0))),
    ("pharynx", 20, ((72.0, 36.0), (74.0, 50.0), (72.0, 64.0), (70.0, 78.0))),
    ("upper_lip", 10, ((16.0, 40.0), (18.0, 46.0), (24.0, 50.0))),
    ("lower_lip", 10, ((16.0, 64.0), (18.0, 58.0), (24.0, 55.0))),
    ("larynx", 15, ((52.0, 70.0), (58.0, 76.0), (62.0, 82.0))),
)
CHAIN_SIZES = tuple(c[1] for c in CHAINS)
assert sum(CHAIN_SIZES) == N_POINTS

LARYNX_START = sum(CHAIN_SIZES[:5])
LOWER_LIP_START = sum(CHAIN_SIZES[:4])
BORDER_MARGIN = 6.0  # 3 sigma of the heatmap targets
# The larynx mostly moves up and down; its height drives F0, so the audio
# pins down nearly all of that chain's motion.
VERTICAL_CHAINS = ("larynx",)
VERTICAL_BEND = 0.25


def chain_slices() -> list[slice]:
    out, start = [], 0
    for n in CHAIN_SIZES:
        out.append(slice(start, start + n))
        start += n
    return out


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    T: int = 160
    motion_bandwidth_hz: float = 3.0
    motion_amplitude_px: float = 3.5
    pitch_point: int = LARYNX_START + 7
    loudness_point: int = LOWER_LIP_START + 5
    f0_range: tuple = (110.0, 240.0)
    harmonics: int = 6
    chain_contrast: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    frame_noise: float = 0.03
    audio_noise: float = 0.003
    clip_id: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for key in ("f0_range", "chain_contrast"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SyntheticClip:
    frames: np.ndarray          # (T, 84, 84) float32 in [0, 1], native size
    trajectory: Trajectory      # padded-frame coordinates
    audio: AudioClip
    pitch: PitchContour         # the F0 actually synthesized, per frame
    spec: SyntheticSpec = field(repr=False)


def _resample_chain(ctrl: np.ndarray, n: int) -> np.ndarray:
    """Place n points evenly (by parameter) on a spline through the control points."""
    s = np.linspace(0.0, 1.0, len(ctrl))
    spline = CubicSpline(s, ctrl, axis=0, bc_type="natural")
    return spline(np.linspace(0.0, 1.0, n))


def _normals(points: np.ndarray) -> np.ndarray:
    d = np.gradient(points, axis=0)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.stack([-d[:, 1], d[:, 0]], axis=1)


def _latent(rng: np.random.Generator, T: int, bandwidth: float, n_terms: int = 4) -> np.ndarray:
    """Smooth signal in [-1, 1] built from a few low-frequency sinusoids."""
    t = np.arange(T) / FRAME_RATE
    freqs = rng.uniform(0.25, bandwidth, size=n_terms)
    phases = rng.uniform(0, 2 * np.pi, size=n_terms)
    amps = rng.uniform(0.3, 1.0, size=n_terms)
    x = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])).sum(0)
    return x / amps.sum()


def base_shape(rng: np.random.Generator) -> list[np.ndarray]:
    """Per-clip resting shape: the template with a small global jitter."""
    shift = rng.uniform(-3.0, 3.0, size=2)
    scale = rng.uniform(0.95, 1.05)
    center = np.array([48.0, 54.0])
    chains = []
    for _, n, ctrl in CHAINS:
        ctrl = np.asarray(ctrl)
        ctrl = (ctrl - center) * scale + center + shift + rng.uniform(-1.0, 1.0, size=2)
        chains.append(_resample_chain(ctrl, n))
    return chains


def generate_trajectory(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    chains = base_shape(rng)
    T = spec.T
    out = np.empty((T, N_POINTS, 2))
    amp = spec.motion_amplitude_px
    for (name, _, _), sl, rest in zip(CHAINS, chain_slices(), chains):
        n = len(rest)
        s = np.linspace(0.0, 1.0, n)
        normals = _normals(rest)
        bend = _latent(rng, T, spec.motion_bandwidth_hz)
        slide = _latent(rng, T, spec.motion_bandwidth_hz)
        direction = rng.normal(size=2)
        direction /= np.linalg.norm(direction)
        if name in VERTICAL_CHAINS:
            bend = VERTICAL_BEND * bend
            slide = 2.0 * slide
            direction = np.array([0.0, 1.0])
        bend_shape = np.sin(np.pi * s) * 0.7 + 0.3 * s
        disp = (amp * bend[:, None, None] * bend_shape[None, :, None] * normals[None]
                + 0.5 * amp * slide[:, None, None] * direction[None, None, :])
        out[:, sl] = rest[None] + disp
    lo, hi = BORDER_MARGIN, PAD + NATIVE_SIZE - 1
    if out.min() < lo or out.max() > hi:
        raise RuntimeError("synthetic trajectory left the safe interior; template too large")
    return out


def render_frames(points: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Render (T, 84, 84) frames for padded-coordinate points of shape (T, 95, 2)."""
    T = points.shape[0]
    axis = np.arange(NATIVE_SIZE, dtype=np.float64) + PAD
    texture = gaussian_filter(rng.normal(size=(NATIVE_SIZE, NATIVE_SIZE)), 3.0)
    texture = 0.15 + 0.08 * texture / (np.abs(texture).max() + 1e-12)
    frames = np.empty((T, NATIVE_SIZE, NATIVE_SIZE), dtype=np.float32)
    line_w, blob_w = 1.1, 0.8
    for t in range(T):
        xs, ys, ws, sig = [], [], [], []
        for sl, contrast in zip(chain_slices(), spec.chain_contrast):
            pts = points[t, sl]
            dense = _resample_chain(pts, 8 * len(pts))
            xs += [dense[:, 0], pts[:, 0]]
            ys += [dense[:, 1], pts[:, 1]]
            ws += [np.full(len(dense), 0.35 * contrast), np.full(len(pts), 0.6 * contrast)]
            sig += [np.full(len(dense), line_w), np.full(len(pts), blob_w)]
        x, y, w, s = (np.concatenate(v) for v in (xs, ys, ws, sig))
        gx = np.exp(-((axis[None, :] - x[:, None]) ** 2) / (2 * s[:, None] ** 2))
        gy = np.exp(-((axis[None, :] - y[:, None]) ** 2) / (2 * s[:, None] ** 2))
        img = (gy * w[:, None]).T @ gx
        img = texture + img + spec.frame_noise * rng.normal(size=img.shape)
        lo, hi = img.min(), img.max()
        frames[t] = ((img - lo) / (hi - lo)).astype(np.float32)
    return frames


def _unit(v: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


def coupling_ranges(spec: SyntheticSpec) -> tuple[tuple[float, float], tuple[float, float]]:
    """Fixed coordinate ranges mapped onto F0 and loudness (same for every clip)."""
    def rest_y(point):
        start = 0
        for (_, n, ctrl) in CHAINS:
            if point < start + n:
                return float(_resample_chain(np.asarray(ctrl), n)[point - start, 1])
            start += n
        raise IndexError(point)
    span = 2.0 * spec.motion_amplitude_px + 4.0
    py, ly = rest_y(spec.pitch_point), rest_y(spec.loudness_point)
    return (py - span, py + span), (ly - span, ly + span)


def synthesize_audio(points: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator):
    """Harmonic tone with F0 linear in one point's y and loudness in another's."""
    T = points.shape[0]
    (py_lo, py_hi), (ly_lo, ly_hi) = coupling_ranges(spec)
    f_lo, f_hi = spec.f0_range
    # Lower on screen (larger y) means a lowered larynx and a lower pitch.
    f0_frames = f_hi - (f_hi - f_lo) * _unit(points[:, spec.pitch_point, 1], py_lo, py_hi)
    loud_frames = 0.35 + 0.65 * _unit(points[:, spec.loudness_point, 1], ly_lo, ly_hi)
    n = T * SAMPLES_PER_FRAME
    centers = (np.arange(T) + 0.5) * SAMPLES_PER_FRAME
    idx = np.arange(n)
    f0 = np.interp(idx, centers, f0_frames)
    loud = np.interp(idx, centers, loud_frames)
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE + rng.uniform(0, 2 * np.pi)
    wave = sum(np.sin(h * phase) / h for h in range(1, spec.harmonics + 1))
    wave = loud * wave + spec.audio_noise * rng.normal(size=n)
    wave *= 0.9 / np.abs(wave).max()
    return AudioClip(wave), PitchContour(f0_frames)


def generate_synthetic_clip(spec: SyntheticSpec) -> SyntheticClip:
    rng = np.random.default_rng(spec.seed)
    traj_rng, frame_rng, audio_rng = (np.random.default_rng(s) for s in rng.integers(0, 2**63, size=3))
    points = generate_trajectory(spec, traj_rng)
    frames = render_frames(points, spec, frame_rng)
    audio, pitch = synthesize_audio(points, spec, audio_rng)
    clip_id = spec.clip_id or f"synth_{spec.seed:05d}"
    traj = Trajectory(points, frame_rate=FRAME_RATE, clip_id=clip_id)
    return SyntheticClip(frames, traj, audio, pitch, spec)
