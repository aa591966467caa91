"""Audio features, pitch targets and the audio-visual fusion Transformer.

The fusion model refines per-frame U-Net keypoints using speech features
aligned to the video rate, and predicts pitch as a second task.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_types import (FRAME_RATE, GRID, N_COORDS, N_POINTS, SAMPLE_RATE, SAMPLES_PER_FRAME,
                         AudioClip, PitchContour, Trajectory)
from .losses import PITCH_UNIT_HZ, LossConfig, multitask_weighted_l1

log = logging.getLogger(__name__)

SSL_RATE = 50.0
SSL_HOP = 320
SSL_WINDOW = 400
PITCH_WINDOW = 400  # 25 ms
F0_MIN, F0_MAX = 50.0, 400.0


# -- audio features ---------------------------------------------------------

class AudioFeatureExtractor(Protocol):
    name: str
    rate: float
    dim: int

    def __call__(self, audio: AudioClip) -> np.ndarray: ...


def _check_audio(audio: AudioClip):
    if audio.sample_rate != SAMPLE_RATE:
        raise ValueError(f"audio must be sampled at {SAMPLE_RATE} Hz, got {audio.sample_rate}")


def _num_frames(n_samples: int) -> int:
    if n_samples < SSL_WINDOW:
        return 1
    return 1 + (n_samples - SSL_WINDOW) // SSL_HOP


def mel_filterbank(n_mels: int, n_fft: int, sr: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape (n_mels, n_fft // 2 + 1)."""
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10 ** (np.asarray(m) / 2595.0) - 1.0)

    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None] - lower) / (center - lower)
    down = (upper - freqs[None]) / (upper - center)
    return np.maximum(0.0, np.minimum(up, down))


@dataclass
class StubExtractor:
    """Deterministic stand-in for the SSL model: log-mel energies at 50 Hz.

    Same framing as the SSL front end (25 ms window, 20 ms hop), plus a
    log-RMS channel.
    """

    n_mels: int = 40
    n_fft: int = 512
    fmin: float = 50.0
    fmax: float = 4000.0
    name: str = "stub"
    rate: float = SSL_RATE

    @property
    def dim(self) -> int:
        return self.n_mels + 1

    def __call__(self, audio: AudioClip) -> np.ndarray:
        _check_audio(audio)
        x = audio.samples
        n = _num_frames(x.size)
        x = np.pad(x, (0, max(0, (n - 1) * SSL_HOP + SSL_WINDOW - x.size)))
        idx = np.arange(n)[:, None] * SSL_HOP + np.arange(SSL_WINDOW)[None]
        frames = x[idx] * np.hanning(SSL_WINDOW)[None]
        spec = np.abs(np.fft.rfft(frames, n=self.n_fft, axis=1)) ** 2
        fb = mel_filterbank(self.n_mels, self.n_fft, SAMPLE_RATE, self.fmin, self.fmax)
        mel = np.log10(spec @ fb.T + 1e-8)
        rms = np.log10(np.sqrt((frames ** 2).mean(axis=1)) + 1e-6)
        return np.concatenate([mel, rms[:, None]], axis=1)


@dataclass
class WavLMExtractor:
    """Hidden states of a frozen pretrained WavLM (needs ``transformers`` and weights)."""

    model_name: str = "microsoft/wavlm-base-plus"
    layer: int = 10
    name: str = "real"
    rate: float = SSL_RATE
    _model: object = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self._load().config.hidden_size

    def _load(self):
        if self._model is None:
            try:
                from transformers import WavLMModel
            except ImportError as e:  # pragma: no cover
                raise RuntimeError("the real audio extractor needs the 'transformers' package") from e
            self._model = WavLMModel.from_pretrained(self.model_name).eval()
        return self._model

    def __call__(self, audio: AudioClip) -> np.ndarray:
        _check_audio(audio)
        model = self._load()
        x = torch.as_tensor(audio.samples, dtype=torch.float32)[None]
        x = (x - x.mean()) / (x.std() + 1e-7)
        with torch.no_grad():
            out = model(x, output_hidden_states=True)
        return out.hidden_states[self.layer][0].numpy().astype(np.float64)


def get_extractor(kind: str) -> AudioFeatureExtractor:
    if kind == "stub":
        return StubExtractor()
    if kind == "real":
        return WavLMExtractor()
    raise ValueError(f"unknown audio extractor {kind!r} (expected 'stub' or 'real')")


def extract_audio_features(audio: AudioClip, extractor: AudioFeatureExtractor | None = None) -> np.ndarray:
    extractor = extractor or StubExtractor()
    feats = np.asarray(extractor(audio), dtype=np.float64)
    if not np.all(np.isfinite(feats)):
        raise ValueError("audio features contain non-finite values")
    return feats


def align_features(feats, T: int, feature_rate: float = SSL_RATE, frame_rate: float = FRAME_RATE,
                   offset: float = 0.0) -> np.ndarray:
    """Linearly resample (N, D) features onto T video frames, clamping at the ends.

    Feature n sits at time offset + n / feature_rate; video frame t at
    t / frame_rate.
    """
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("features must be (N, D)")
    N = f.shape[0]
    if N < 2:
        if T > 1 or N == 0:
            raise ValueError(f"need at least 2 feature frames to align to {T} video frames")
        return f.copy()
    src = offset + np.arange(N) / feature_rate
    dst = np.arange(T) / frame_rate
    pos = np.clip(np.interp(dst, src, np.arange(N, dtype=np.float64)), 0, N - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, N - 1)
    w = (pos - lo)[:, None]
    return (1 - w) * f[lo] + w * f[hi]


# -- pitch ------------------------------------------------------------------

def _parabolic_peak(r: np.ndarray, i: int) -> float:
    if i <= 0 or i >= len(r) - 1:
        return float(i)
    a, b, c = r[i - 1], r[i], r[i + 1]
    denom = a - 2 * b + c
    return float(i) if denom == 0 else i + 0.5 * (a - c) / denom


def extract_pitch_target(audio: AudioClip, T: int, voicing_threshold: float = 0.5,
                         silence_rms: float = 1e-3) -> PitchContour:
    """Normalized-autocorrelation F0 per video frame; unvoiced frames are 0."""
    _check_audio(audio)
    x = audio.samples
    sr = audio.sample_rate
    lag_min = int(math.floor(sr / F0_MAX))
    lag_max = int(math.ceil(sr / F0_MIN))
    f0 = np.zeros(T)
    if x.size == 0 or T == 0:
        return PitchContour(f0)
    half = PITCH_WINDOW // 2
    padded = np.pad(x, (half, half + lag_max + SAMPLES_PER_FRAME * T))
    centers = np.arange(T) * SAMPLES_PER_FRAME + SAMPLES_PER_FRAME // 2
    idx = centers[:, None] + np.arange(PITCH_WINDOW)[None]  # window start = center - half (+half pad)
    win = padded[idx]
    rms = np.sqrt((win ** 2).mean(axis=1))
    e0 = (win ** 2).sum(axis=1)
    lags = np.arange(lag_min, lag_max + 1)
    r = np.zeros((T, lags.size))
    for j, lag in enumerate(lags):
        shifted = padded[idx + lag]
        denom = np.sqrt(e0 * (shifted ** 2).sum(axis=1))
        r[:, j] = np.where(denom > 0, (win * shifted).sum(axis=1) / np.where(denom > 0, denom, 1), 0)
    for t in range(T):
        if rms[t] < silence_rms:
            continue
        rt = r[t]
        best = rt.max()
        if best < voicing_threshold:
            continue
        # First local maximum close to the global one avoids octave-down errors.
        cand = [i for i in range(1, len(rt) - 1)
                if rt[i] >= 0.9 * best and rt[i] >= rt[i - 1] and rt[i] >= rt[i + 1]]
        i = cand[0] if cand else int(rt.argmax())
        lag = lags[0] + _parabolic_peak(rt, i)
        hz = sr / lag
        if F0_MIN <= hz <= F0_MAX:
            f0[t] = hz
    return PitchContour(f0)


# -- model ------------------------------------------------------------------

@dataclass
class FusionConfig:
    audio_dim: int = 41
    visual_dim: int = N_COORDS
    width: int = 256
    conv_blocks: int = 3
    conv_kernel: int = 5
    depth: int = 4
    heads: int = 4
    ff_mult: int = 2
    dropout: float = 0.0
    modalities: str = "both"
    positional_encoding: str = "sinusoidal"
    # "keypoints": decoded U-Net points, refined as a residual.
    # "unet_features": pooled U-Net bottleneck vectors (visual_dim = their width).
    visual_input: str = "keypoints"

    def __post_init__(self):
        if self.conv_blocks != 3:
            raise ValueError("the fusion front end uses exactly 3 residual conv blocks")
        if self.modalities not in ("both", "keypoints", "audio"):
            raise ValueError(f"unknown modalities {self.modalities!r}")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.visual_input not in ("keypoints", "unet_features"):
            raise ValueError(f"unknown visual_input {self.visual_input!r}")
        if self.visual_input == "keypoints" and self.visual_dim != N_COORDS:
            raise ValueError(f"keypoint input has {N_COORDS} dims, got visual_dim={self.visual_dim}")
        if self.positional_encoding != "sinusoidal":
            raise ValueError("only sinusoidal positional encoding is implemented")

    @property
    def uses_audio(self) -> bool:
        return self.modalities in ("both", "audio")

    @property
    def uses_keypoints(self) -> bool:
        return self.modalities in ("both", "keypoints")


class ResBlock1d(nn.Module):
    def __init__(self, width, kernel):
        super().__init__()
        self.conv1 = nn.Conv1d(width, width, kernel, padding=kernel // 2)
        self.norm1 = nn.GroupNorm(math.gcd(width, 8), width)
        self.conv2 = nn.Conv1d(width, width, kernel, padding=kernel // 2)
        self.norm2 = nn.GroupNorm(math.gcd(width, 8), width)

    def forward(self, x):
        h = F.gelu(self.norm1(self.conv1(x)))
        return F.gelu(x + self.norm2(self.conv2(h)))


def sinusoidal_encoding(T: int, width: int) -> torch.Tensor:
    pos = torch.arange(T, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, width, 2, dtype=torch.float32) * (-math.log(10000.0) / width))
    pe = torch.zeros(T, width)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: width // 2])
    return pe


class FusionTransformer(nn.Module):
    def __init__(self, cfg: FusionConfig = FusionConfig()):
        super().__init__()
        self.cfg = cfg
        in_dim = (cfg.visual_dim if cfg.uses_keypoints else 0) + (cfg.audio_dim if cfg.uses_audio else 0)
        self.register_buffer("audio_mean", torch.zeros(cfg.audio_dim))
        self.register_buffer("audio_std", torch.ones(cfg.audio_dim))
        self.inp = nn.Conv1d(in_dim, cfg.width, 1)
        self.blocks = nn.Sequential(*[ResBlock1d(cfg.width, cfg.conv_kernel) for _ in range(cfg.conv_blocks)])
        layer = nn.TransformerEncoderLayer(cfg.width, cfg.heads, cfg.ff_mult * cfg.width,
                                           dropout=cfg.dropout, batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, cfg.depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.width)
        self.traj_head = nn.Linear(cfg.width, N_COORDS)
        self.pitch_head = nn.Linear(cfg.width, 1)
        nn.init.zeros_(self.traj_head.weight)
        nn.init.zeros_(self.traj_head.bias)

    def forward(self, keypoints, audio, zero_audio: bool = False):
        """keypoints (B, T, 190) in pixels; audio (B, T, D) raw features.

        With ``visual_input="unet_features"`` the first argument holds
        (B, T, visual_dim) feature vectors instead of points.
        Returns trajectory (B, T, 190) in pixels and pitch (B, T) in Hz.
        """
        parts = []
        residual = self.cfg.visual_input == "keypoints"
        kp = (keypoints - GRID / 2) / (GRID / 2) if residual else keypoints
        if self.cfg.uses_keypoints:
            parts.append(kp)
        if self.cfg.uses_audio:
            a = (audio - self.audio_mean) / self.audio_std
            parts.append(torch.zeros_like(a) if zero_audio else a)
        x = torch.cat(parts, dim=-1).transpose(1, 2)
        h = self.blocks(self.inp(x)).transpose(1, 2)
        h = h + sinusoidal_encoding(h.shape[1], self.cfg.width).to(h)
        h = self.norm(self.encoder(h))
        delta = self.traj_head(h)
        traj = delta * (GRID / 2) + GRID / 2
        if self.cfg.uses_keypoints and residual:
            traj = traj + keypoints - GRID / 2
        pitch = F.softplus(self.pitch_head(h)[..., 0]) * PITCH_UNIT_HZ
        return traj, pitch


def build_fusion(cfg: FusionConfig = FusionConfig()) -> FusionTransformer:
    return FusionTransformer(cfg)


def _as_batch(a, last):
    t = torch.as_tensor(np.asarray(a, dtype=np.float32))
    if t.dim() == 2:
        t = t[None]
    return t.reshape(t.shape[0], t.shape[1], last)


def fuse_forward(model: FusionTransformer, keypoints, audio_feats, zero_audio: bool = False):
    """Inference on one clip: keypoints (T, 95, 2) + aligned features (T, D).

    Returns (Trajectory, PitchContour).
    """
    kp = keypoints.points if isinstance(keypoints, Trajectory) else np.asarray(keypoints)
    feats = np.asarray(audio_feats)
    if kp.shape[0] != feats.shape[0]:
        raise ValueError(f"frame count mismatch: {kp.shape[0]} keypoint frames vs {feats.shape[0]} audio")
    model.eval()
    with torch.no_grad():
        traj, pitch = model(_as_batch(kp.reshape(len(kp), -1), model.cfg.visual_dim),
                            _as_batch(feats, feats.shape[-1]), zero_audio=zero_audio)
    clip_id = keypoints.clip_id if isinstance(keypoints, Trajectory) else ""
    points = traj[0].numpy().astype(np.float64).reshape(-1, N_POINTS, 2)
    return Trajectory(points, clip_id=clip_id), PitchContour(pitch[0].numpy().astype(np.float64))


# -- training ---------------------------------------------------------------

@dataclass
class FusionSample:
    clip_id: str
    keypoints: np.ndarray       # (T, 95, 2) from the frozen U-Net
    audio_feats: np.ndarray     # (T, D) aligned
    target_traj: np.ndarray     # (T, 95, 2)
    target_pitch: np.ndarray    # (T,) Hz


@dataclass
class FusionTrainConfig:
    epochs: int = 20
    steps_per_epoch: int = 50
    batch_size: int = 8
    window: int = 64
    lr: float = 5e-4
    weight_decay: float = 1e-4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)


def fit_audio_normalization(model: FusionTransformer, samples: list[FusionSample]):
    feats = np.concatenate([s.audio_feats for s in samples])
    model.audio_mean.copy_(torch.as_tensor(feats.mean(axis=0), dtype=torch.float32))
    model.audio_std.copy_(torch.as_tensor(feats.std(axis=0) + 1e-3, dtype=torch.float32))


def _window_batch(samples, rng, batch_size, window):
    kp, au, tt, tp = [], [], [], []
    for _ in range(batch_size):
        s = samples[rng.integers(len(samples))]
        T = len(s.target_pitch)
        L = min(window, T)
        a = rng.integers(0, T - L + 1)
        kp.append(s.keypoints[a:a + L].reshape(L, -1))
        au.append(s.audio_feats[a:a + L])
        tt.append(s.target_traj[a:a + L].reshape(L, -1))
        tp.append(s.target_pitch[a:a + L])
    L = min(len(x) for x in tp)
    f = lambda xs: torch.as_tensor(np.stack([x[:L] for x in xs]), dtype=torch.float32)
    return f(kp), f(au), f(tt), f(tp)


def evaluate_fusion(model: FusionTransformer, samples: list[FusionSample], zero_audio: bool = False) -> dict:
    """Mean per-clip trajectory L1 (pixels), pitch L1 (Hz) and multitask loss."""
    traj_l1, pitch_l1 = [], []
    for s in samples:
        traj, pitch = fuse_forward(model, s.keypoints, s.audio_feats, zero_audio=zero_audio)
        traj_l1.append(np.abs(traj.points - s.target_traj).mean())
        pitch_l1.append(np.abs(pitch.f0 - s.target_pitch).mean())
    return {"traj_l1": float(np.mean(traj_l1)), "pitch_l1": float(np.mean(pitch_l1))}


def train_fusion(model: FusionTransformer, samples: list[FusionSample],
                 cfg: FusionTrainConfig = FusionTrainConfig(), val_samples=None,
                 checkpoint_path=None, checkpoint_extra: dict | None = None):
    from .seg_unet import TrainingDivergedError

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    fit_audio_normalization(model, samples)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    total = cfg.epochs * cfg.steps_per_epoch
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.lr, total_steps=total, pct_start=0.1)
    history = {"train_loss": [], "val_loss": [], "val_traj_l1": [], "val_pitch_l1": []}

    def val_loss():
        m = evaluate_fusion(model, val_samples)
        lc = cfg.loss
        return m, lc.lambda_traj * m["traj_l1"] + lc.lambda_pitch * m["pitch_l1"] / PITCH_UNIT_HZ

    if val_samples:
        history["initial_val_loss"] = val_loss()[1]
    for epoch in range(cfg.epochs):
        model.train()
        losses = []
        for _ in range(cfg.steps_per_epoch):
            kp, au, tt, tp = _window_batch(samples, rng, cfg.batch_size, cfg.window)
            traj, pitch = model(kp, au)
            loss = multitask_weighted_l1(traj, tt, pitch, tp, cfg.loss)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite fusion loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        history["train_loss"].append(float(np.mean(losses)))
        msg = f"fusion epoch {epoch + 1}/{cfg.epochs} train_loss={np.mean(losses):.4f}"
        if val_samples:
            m, vl = val_loss()
            history["val_loss"].append(vl)
            history["val_traj_l1"].append(m["traj_l1"])
            history["val_pitch_l1"].append(m["pitch_l1"])
            msg += f" val_loss={vl:.4f} traj_l1={m['traj_l1']:.3f}px pitch_l1={m['pitch_l1']:.2f}Hz"
        log.info(msg)
    if checkpoint_path is not None:
        from .formats import save_fusion_checkpoint
        save_fusion_checkpoint(checkpoint_path, model, extra=checkpoint_extra)
    return model, history


def fusion_config_dict(cfg: FusionConfig) -> dict:
    return asdict(cfg)
