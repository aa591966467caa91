"""On-disk formats: trajectory files, clip manifests, frames, audio, checkpoints.

Trajectory file layout (little-endian)::

    b"VTRJ" | uint32 header_length | header (UTF-8 JSON) | float32[T, 95, 2]

The JSON header carries ``schema_version``, ``T``, ``n_points``,
``frame_rate``, ``provenance`` and ``clip_id``, serialized with sorted keys
so identical trajectories produce identical files.
"""
from __future__ import annotations

import hashlib
import json
import struct
import warnings
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_types import (N_POINTS, SAMPLE_RATE, AudioClip, Trajectory)

TRAJ_MAGIC = b"VTRJ"
TRAJ_SCHEMA_VERSION = 1
TRAJ_SUFFIX = ".vtrj"
PROVENANCE = ("baseline", "unet", "unet_smoothed", "fusion", "synthetic")
MANIFEST_SCHEMA_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
META_KEY = "__meta__"


class FormatError(ValueError):
    pass


# -- trajectories -----------------------------------------------------------

def encode_trajectory(traj: Trajectory, provenance: str) -> bytes:
    if provenance not in PROVENANCE:
        raise ValueError(f"unknown provenance {provenance!r}; expected one of {PROVENANCE}")
    payload = np.ascontiguousarray(traj.points, dtype="<f4")
    header = {
        "schema_version": TRAJ_SCHEMA_VERSION,
        "T": int(payload.shape[0]),
        "n_points": N_POINTS,
        "frame_rate": float(traj.frame_rate),
        "provenance": provenance,
        "clip_id": traj.clip_id,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return TRAJ_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload.tobytes()


def decode_trajectory(data: bytes) -> tuple[Trajectory, dict]:
    if data[:4] != TRAJ_MAGIC:
        raise FormatError("not a trajectory file (bad magic)")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    if header.get("schema_version") != TRAJ_SCHEMA_VERSION:
        raise FormatError(f"unsupported trajectory schema {header.get('schema_version')}")
    if header.get("n_points") != N_POINTS:
        raise FormatError(f"expected {N_POINTS} points, header says {header.get('n_points')}")
    payload = data[8 + hlen:]
    T = int(header["T"])
    if len(payload) != T * N_POINTS * 2 * 4:
        raise FormatError(f"payload is {len(payload)} bytes, header T={T} needs {T * N_POINTS * 8}")
    points = np.frombuffer(payload, dtype="<f4").reshape(T, N_POINTS, 2).astype(np.float32)
    traj = Trajectory(points, frame_rate=header["frame_rate"], clip_id=header.get("clip_id", ""))
    return traj, header


def write_trajectory(path, traj: Trajectory, provenance: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_trajectory(traj, provenance))
    return path


def read_trajectory(path) -> tuple[Trajectory, dict]:
    return decode_trajectory(Path(path).read_bytes())


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- frames and audio -------------------------------------------------------

def save_frames(path, frames: np.ndarray) -> Path:
    """Store a clip as one float32 (T, H, W) array (.npy) or a PNG sequence (directory)."""
    path = Path(path)
    frames = np.asarray(frames, dtype=np.float32)
    if path.suffix == ".npy":
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, frames.astype("<f4"))
        return path
    from PIL import Image
    path.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(frames):
        Image.fromarray(np.round(f * 65535).astype(np.uint16)).save(path / f"{t:06d}.png")
    return path


FRAME_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
LOSSY_SUFFIXES = (".jpg", ".jpeg")


def load_frames(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"frames not found: {path}")
    if path.is_dir():
        from PIL import Image
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in FRAME_IMAGE_SUFFIXES)
        if not files:
            raise FormatError(f"no image frames in {path}")
        lossy = [p.name for p in files if p.suffix.lower() in LOSSY_SUFFIXES]
        if lossy:
            warnings.warn(f"{path}: {len(lossy)} lossy frames (e.g. {lossy[0]}); "
                          "compression artifacts degrade labeling", stacklevel=2)
        stack = []
        for p in files:
            a = np.asarray(Image.open(p))
            if a.ndim == 3:
                a = a[..., :3].mean(axis=-1)
            scale = 65535.0 if a.dtype == np.uint16 else 255.0
            stack.append(a.astype(np.float64) / scale)
        return np.stack(stack).astype(np.float32)
    frames = np.load(path, allow_pickle=False)
    if frames.ndim != 3:
        raise FormatError(f"frame container must be (T, H, W), got {frames.shape}")
    return frames.astype(np.float32)


def save_audio(path, audio: AudioClip) -> Path:
    """16-bit PCM mono WAV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.round(np.clip(audio.samples, -1, 1) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(pcm.tobytes())
    return path


def load_audio(path) -> AudioClip:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit mono PCM")
        rate = w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    if rate != SAMPLE_RATE:
        raise FormatError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE}")
    return AudioClip(data.astype(np.float64) / 32767.0, sample_rate=rate)


# -- manifests --------------------------------------------------------------

@dataclass
class ClipRecord:
    clip_id: str
    frames_path: str
    audio_path: str
    speaker_id: str
    T: int
    sample_count: int
    trajectory_path: str | None = None


@dataclass
class Manifest:
    corpus: str
    clips: list[ClipRecord] = field(default_factory=list)
    schema_version: int = MANIFEST_SCHEMA_VERSION
    root: Path = field(default=Path("."), repr=False, compare=False)

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_dict(self) -> dict:
        clips = []
        for c in self.clips:
            d = {"clip_id": c.clip_id, "frames_path": c.frames_path, "audio_path": c.audio_path,
                 "speaker_id": c.speaker_id, "T": c.T, "sample_count": c.sample_count}
            if c.trajectory_path is not None:
                d["trajectory_path"] = c.trajectory_path
            clips.append(d)
        return {"schema_version": self.schema_version, "corpus": self.corpus, "clips": clips}

    def missing_files(self) -> dict[str, list[str]]:
        out = {}
        for c in self.clips:
            gone = [str(p) for p in (self.resolve(c.frames_path), self.resolve(c.audio_path),
                                     self.resolve(c.trajectory_path)) if p is not None and not p.exists()]
            if gone:
                out[c.clip_id] = gone
        return out


def write_manifest(path, manifest: Manifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path, check_files: bool = False) -> Manifest:
    path = Path(path)
    d = json.loads(path.read_text())
    if d.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise FormatError(f"unsupported manifest schema {d.get('schema_version')}")
    clips = [ClipRecord(**c) for c in d["clips"]]
    ids = [c.clip_id for c in clips]
    if len(set(ids)) != len(ids):
        raise FormatError("manifest clip_ids are not unique")
    m = Manifest(d["corpus"], clips, d["schema_version"], root=path.parent)
    if check_files:
        missing = m.missing_files()
        if missing:
            raise FileNotFoundError(f"manifest references missing files: {missing}")
    return m


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, model_kind: str, config: dict, state: dict) -> Path:
    """Write named float32 little-endian arrays plus a JSON metadata record (.npz)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": CHECKPOINT_FORMAT_VERSION, "model_kind": model_kind, "config": config}
    arrays = {}
    for name, tensor in state.items():
        a = tensor.detach().cpu().numpy() if hasattr(tensor, "detach") else np.asarray(tensor)
        if not np.issubdtype(a.dtype, np.floating):
            meta.setdefault("int_arrays", []).append(name)
            arrays[name] = a.astype("<i8")
        else:
            arrays[name] = a.astype("<f4")
    arrays[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return (metadata, {name: np.ndarray})."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z[META_KEY]))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {meta.get('format_version')}")
        arrays = {k: z[k] for k in z.files if k != META_KEY}
    return meta, arrays


def save_unet_checkpoint(path, model, objective: str, extra: dict | None = None) -> Path:
    cfg = model.cfg
    config = {"unet": {"depth": cfg.depth, "base_channels": cfg.base_channels,
                       "attention": cfg.attention, "out_channels": cfg.out_channels},
              "objective": objective}
    if extra:
        config.update(extra)
    return save_checkpoint(path, "unet", config, model.state_dict())


def _state_dict(arrays: dict, prefix: str = "") -> dict:
    import torch
    return {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix)}


def unet_from_arrays(config: dict, arrays: dict, prefix: str = ""):
    from .seg_unet import UNetConfig, build
    model = build(UNetConfig(**config["unet"]))
    model.load_state_dict(_state_dict(arrays, prefix))
    model.eval()
    return model


def load_unet_checkpoint(path):
    """Return (model, objective) from a U-Net checkpoint."""
    meta, arrays = load_checkpoint(path)
    if meta["model_kind"] != "unet":
        raise FormatError(f"{path} holds a {meta['model_kind']!r} model, not a U-Net")
    return unet_from_arrays(meta["config"], arrays), meta["config"].get("objective", "kl")


def save_fusion_checkpoint(path, model, extra: dict | None = None, unet=None,
                           unet_objective: str = "kl") -> Path:
    """Fusion weights, optionally bundled with the frozen U-Net under ``unet.``."""
    from dataclasses import asdict
    config = {"fusion": asdict(model.cfg)}
    if extra:
        config.update(extra)
    state = dict(model.state_dict())
    if unet is not None:
        c = unet.cfg
        config["unet"] = {"depth": c.depth, "base_channels": c.base_channels,
                          "attention": c.attention, "out_channels": c.out_channels}
        config["objective"] = unet_objective
        state.update({f"unet.{k}": v for k, v in unet.state_dict().items()})
    return save_checkpoint(path, "fusion", config, state)


def load_fusion_checkpoint(path):
    """Return (fusion model, frozen U-Net or None, config dict)."""
    from .fusion import FusionConfig, build_fusion
    meta, arrays = load_checkpoint(path)
    if meta["model_kind"] != "fusion":
        raise FormatError(f"{path} holds a {meta['model_kind']!r} model, not a fusion model")
    config = meta["config"]
    model = build_fusion(FusionConfig(**config["fusion"]))
    model.load_state_dict(_state_dict({k: v for k, v in arrays.items() if not k.startswith("unet.")}))
    model.eval()
    unet = unet_from_arrays(config, arrays, prefix="unet.") if "unet" in config else None
    return model, unet, config


def checkpoint_kind(path) -> str:
    return load_checkpoint(path)[0]["model_kind"]
