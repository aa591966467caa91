"""Batch operations behind the CLI: synthesize corpora, train, label, smooth, evaluate."""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .augmentation import AugmentConfig
from .core_types import FRAME_RATE, AudioClip, Trajectory, normalize_intensity, pad_pixels, validate_pair
from .formats import ClipRecord, Manifest
from .losses import LossConfig, weights_from_config
from .metrics import EvalReport, evaluate_clip
from .synthetic import SyntheticSpec, generate_synthetic_clip
from .temporal_filter import FilterConfig, smooth_array

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Bad or missing configuration; maps to exit code 2."""


class DataError(RuntimeError):
    """Missing or inconsistent data; maps to exit code 1."""


def _map(fn, items, workers: int):
    if workers and workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# -- synthetic corpora ------------------------------------------------------

@dataclass
class SynthCorpusSpec:
    n_clips: int = 5
    seed: int = 0
    corpus: str = "synthetic"
    frames_format: str = "npy"
    clip: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthCorpusSpec":
        unknown = set(d) - {"n_clips", "seed", "corpus", "frames_format", "clip"}
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        spec = cls(**d)
        if spec.n_clips < 1:
            raise ConfigError("n_clips must be >= 1")
        if spec.frames_format not in ("npy", "png"):
            raise ConfigError("frames_format must be 'npy' or 'png'")
        return spec


def _write_clip(args) -> ClipRecord:
    out_dir, clip_spec, frames_format = args
    clip = generate_synthetic_clip(clip_spec)
    cid = clip.trajectory.clip_id
    rel = Path("clips") / cid
    frames_rel = rel / ("frames.npy" if frames_format == "npy" else "frames")
    formats.save_frames(out_dir / frames_rel, clip.frames)
    formats.save_audio(out_dir / rel / "audio.wav", clip.audio)
    formats.write_trajectory(out_dir / rel / "trajectory.vtrj", clip.trajectory, "synthetic")
    (out_dir / rel / "spec.json").write_text(json.dumps(clip_spec.to_dict(), sort_keys=True) + "\n")
    return ClipRecord(clip_id=cid, frames_path=str(frames_rel), audio_path=str(rel / "audio.wav"),
                      speaker_id=f"synth_spk{clip_spec.seed % 4}", T=clip_spec.T,
                      sample_count=int(clip.audio.samples.size),
                      trajectory_path=str(rel / "trajectory.vtrj"))


def synthesize_corpus(spec: SynthCorpusSpec, out_dir, workers: int = 1) -> Path:
    """Materialize ``spec.n_clips`` synthetic clips and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for i in range(spec.n_clips):
        d = dict(spec.clip)
        d["seed"] = spec.seed + i
        d["clip_id"] = f"{spec.corpus}_{spec.seed + i:05d}"
        jobs.append((out_dir, SyntheticSpec.from_dict(d), spec.frames_format))
    records = _map(_write_clip, jobs, workers)
    return formats.write_manifest(out_dir / "manifest.json", Manifest(spec.corpus, records))


# -- loading ----------------------------------------------------------------

def load_clip_frames(manifest: Manifest, rec: ClipRecord) -> np.ndarray:
    """Frames for one clip, min-max normalized per frame and padded to 96x96."""
    raw = formats.load_frames(manifest.resolve(rec.frames_path))
    if raw.shape[1:] == (96, 96):
        return raw.astype(np.float32)
    return pad_pixels(np.stack([normalize_intensity(f) for f in raw]))


def load_clip_audio(manifest: Manifest, rec: ClipRecord) -> AudioClip:
    return formats.load_audio(manifest.resolve(rec.audio_path))


def validate_manifest(manifest: Manifest) -> dict[str, list[str]]:
    problems = {}
    for rec in manifest.clips:
        try:
            frames = formats.load_frames(manifest.resolve(rec.frames_path))
            audio = load_clip_audio(manifest, rec)
        except (OSError, ValueError) as e:
            problems[rec.clip_id] = [str(e)]
            continue
        report = validate_pair(list(frames), audio)
        if len(frames) != rec.T:
            report.append(f"manifest T={rec.T} but {len(frames)} frames on disk")
        if report:
            problems[rec.clip_id] = report
    return problems


def load_training_arrays(manifest: Manifest, max_frames: int | None = None):
    frames, points = [], []
    for rec in manifest.clips:
        if rec.trajectory_path is None:
            raise DataError(f"clip {rec.clip_id} has no reference trajectory")
        f = load_clip_frames(manifest, rec)
        traj, _ = formats.read_trajectory(manifest.resolve(rec.trajectory_path))
        if len(traj) != len(f):
            raise DataError(f"clip {rec.clip_id}: {len(f)} frames but {len(traj)} trajectory frames")
        n = len(f) if max_frames is None else min(max_frames, len(f))
        frames.append(f[:n])
        points.append(np.asarray(traj.points[:n], dtype=np.float64))
    return np.concatenate(frames), np.concatenate(points)


# -- configuration ----------------------------------------------------------

def read_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    cfg["_base_dir"] = str(path.parent.resolve())
    return cfg


def _path(cfg: dict, value) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else Path(cfg.get("_base_dir", ".")) / p


def loss_config(cfg: dict) -> LossConfig:
    d = dict(cfg.get("loss", {}))
    weights = weights_from_config(_path(cfg, d.pop("weights_csv", None)))
    try:
        return LossConfig(weights=weights, **d)
    except TypeError as e:
        raise ConfigError(f"bad loss section: {e}") from e


def augment_config(cfg: dict, seed: int) -> AugmentConfig:
    d = dict(cfg.get("augment", {}))
    if d.pop("enabled", True) is False:
        return AugmentConfig.off(seed)
    if "scale" in d:
        d["scale"] = tuple(d["scale"])
    d.setdefault("seed", seed)
    return AugmentConfig(**d)


def filter_config(cfg: dict) -> FilterConfig | None:
    sigma = cfg.get("filter", {}).get("sigma_frames", 1.5)
    return FilterConfig(sigma) if sigma and sigma > 0 else None


# -- training ---------------------------------------------------------------

def _set_determinism(seed: int):
    import torch
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def train_unet_from_config(cfg: dict, out_dir: Path, seed: int) -> dict:
    from .seg_unet import TrainConfig, UNetConfig, build, predict_keypoints, train
    from .metrics import rmse

    data = cfg.get("data", {})
    manifest = formats.read_manifest(_path(cfg, data.get("manifest")), check_files=True)
    frames, points = load_training_arrays(manifest, data.get("max_frames_per_clip"))
    val_manifest = None
    vf = vp = None
    if data.get("val_manifest"):
        val_manifest = formats.read_manifest(_path(cfg, data["val_manifest"]), check_files=True)
        vf, vp = load_training_arrays(val_manifest, data.get("max_frames_per_clip"))
    tr = dict(cfg.get("train", {}))
    tcfg = TrainConfig(loss=loss_config(cfg), augment=augment_config(cfg, seed), seed=seed, **tr)
    _set_determinism(seed)
    model = build(UNetConfig(**cfg.get("unet", {})))
    model, history = train(model, frames, points, tcfg, vf, vp,
                           checkpoint_path=out_dir / "checkpoint.npz")
    summary = {"final_train_loss": history["train_loss"][-1], "history": history}
    if val_manifest is not None:
        fcfg = filter_config(cfg)
        per_clip = []
        for rec in val_manifest.clips:
            f = load_clip_frames(val_manifest, rec)
            ref, _ = formats.read_trajectory(val_manifest.resolve(rec.trajectory_path))
            pred = predict_keypoints(model, f, tcfg.loss.objective, fcfg)
            per_clip.append(rmse(pred, ref)[0])
        summary["final_val_rmse_smoothed"] = float(np.mean(per_clip))
    return summary


def visual_inputs(unet, frames, objective: str, fcfg: FilterConfig | None,
                  visual_input: str = "keypoints") -> np.ndarray:
    """Per-frame visual vectors fed to the fusion model."""
    from .seg_unet import frame_features, predict_raw

    if visual_input == "unet_features":
        return frame_features(unet, frames)
    raw = predict_raw(unet, frames, objective).astype(np.float32)
    return raw if fcfg is None else smooth_array(raw, fcfg)


def fusion_samples(manifest: Manifest, unet, objective: str, fcfg: FilterConfig | None,
                   extractor, visual_input: str = "keypoints") -> list:
    from .fusion import FusionSample, align_features, extract_audio_features, extract_pitch_target

    out = []
    for rec in manifest.clips:
        frames = load_clip_frames(manifest, rec)
        audio = load_clip_audio(manifest, rec)
        kp = visual_inputs(unet, frames, objective, fcfg, visual_input)
        feats = align_features(extract_audio_features(audio, extractor), len(frames), extractor.rate)
        ref, _ = formats.read_trajectory(manifest.resolve(rec.trajectory_path))
        pitch = extract_pitch_target(audio, len(frames)).f0
        out.append(FusionSample(rec.clip_id, kp, feats, np.asarray(ref.points, dtype=np.float64), pitch))
    return out


def train_fusion_from_config(cfg: dict, out_dir: Path, seed: int) -> dict:
    from .fusion import FusionConfig, FusionTrainConfig, build_fusion, get_extractor, train_fusion

    fcfg_d = dict(cfg.get("fusion", {}))
    unet_ckpt = fcfg_d.pop("unet_checkpoint", None)
    audio_kind = fcfg_d.pop("audio", "stub")
    if unet_ckpt is None:
        raise ConfigError("fusion training needs fusion.unet_checkpoint")
    unet_path = _path(cfg, unet_ckpt)
    if not unet_path.is_file():
        raise ConfigError(f"U-Net checkpoint not found: {unet_path}")
    unet, objective = formats.load_unet_checkpoint(unet_path)
    extractor = get_extractor(audio_kind)
    data = cfg.get("data", {})
    manifest = formats.read_manifest(_path(cfg, data.get("manifest")), check_files=True)
    fil = filter_config(cfg)
    vis = fcfg_d.get("visual_input", "keypoints")
    samples = fusion_samples(manifest, unet, objective, fil, extractor, vis)
    val = None
    if data.get("val_manifest"):
        vm = formats.read_manifest(_path(cfg, data["val_manifest"]), check_files=True)
        val = fusion_samples(vm, unet, objective, fil, extractor, vis)
    fcfg_d.setdefault("audio_dim", extractor.dim)
    if vis == "unet_features":
        fcfg_d.setdefault("visual_dim", samples[0].keypoints.shape[-1])
    model_cfg = FusionConfig(**fcfg_d)
    tcfg = FusionTrainConfig(seed=seed, loss=loss_config(cfg), **cfg.get("fusion_train", {}))
    _set_determinism(seed)
    model = build_fusion(model_cfg)
    extra = {"audio": audio_kind, "input_sigma_frames": fil.sigma_frames if fil else 0.0}
    model, history = train_fusion(model, samples, tcfg, val)
    formats.save_fusion_checkpoint(out_dir / "checkpoint.npz", model, extra=extra,
                                   unet=unet, unet_objective=objective)
    return {"final_train_loss": history["train_loss"][-1], "history": history}


MODEL_KINDS = ("unet", "fusion")


def run_training(cfg: dict, out_dir, seed: int | None = None) -> dict:
    """Dispatch on ``model_kind`` and write the run directory."""
    kind = cfg.get("model_kind")
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model_kind {kind!r} (expected 'unet' or 'fusion')")
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {k: v for k, v in cfg.items() if not k.startswith("_")}
    echo["seed"] = seed
    (out_dir / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    t0 = time.time()
    train_fn = train_unet_from_config if kind == "unet" else train_fusion_from_config
    try:
        summary = train_fn(cfg, out_dir, seed)
    except TypeError as e:
        # unknown keys in a config section surface as bad keyword arguments
        raise ConfigError(f"bad config: {e}") from e
    summary.update(model_kind=kind, seed=seed, wall_seconds=time.time() - t0,
                   checkpoint=str(out_dir / "checkpoint.npz"))
    (out_dir / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# -- labeling ---------------------------------------------------------------

@dataclass
class LabelResult:
    written: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)
    frames: int = 0
    seconds: float = 0.0

    @property
    def frames_per_second(self) -> float:
        return self.frames / self.seconds if self.seconds > 0 else 0.0


def label_corpus(checkpoint, manifest_path, out_dir, smooth_sigma: float = 1.5,
                 audio: str = "none") -> LabelResult:
    """Write one trajectory file per manifest clip using a trained checkpoint."""
    from .fusion import align_features, extract_audio_features, fuse_forward, get_extractor
    from .seg_unet import predict_raw

    kind = formats.checkpoint_kind(checkpoint)
    if kind == "unet" and audio != "none":
        raise ConfigError("a U-Net checkpoint takes no audio; use --audio none")
    if kind == "fusion" and audio == "none":
        raise ConfigError("a fusion checkpoint needs audio; use --audio stub or --audio real")
    if smooth_sigma < 0:
        raise ConfigError("--smooth-sigma must be >= 0")
    manifest = formats.read_manifest(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if kind == "unet":
        unet, objective = formats.load_unet_checkpoint(checkpoint)
        fusion_model, extractor, input_fil = None, None, None
    else:
        fusion_model, unet, fconf = formats.load_fusion_checkpoint(checkpoint)
        if unet is None:
            raise DataError(f"{checkpoint} does not bundle its U-Net")
        if fconf.get("audio", "stub") != audio:
            raise ConfigError(f"checkpoint was trained with --audio {fconf.get('audio')}, got {audio}")
        objective = fconf.get("objective", "kl")
        extractor = get_extractor(audio)
        s = fconf.get("input_sigma_frames", 0.0)
        input_fil = FilterConfig(s) if s > 0 else None
    result = LabelResult()
    t0 = time.perf_counter()
    for rec in manifest.clips:
        try:
            frames = load_clip_frames(manifest, rec)
            if fusion_model is None:
                raw = predict_raw(unet, frames, objective).astype(np.float32)
                if smooth_sigma > 0:
                    pts = smooth_array(raw, FilterConfig(smooth_sigma)).astype(np.float32)
                    prov = "unet_smoothed"
                else:
                    pts, prov = raw, "unet"
            else:
                kp = visual_inputs(unet, frames, objective, input_fil,
                                   fusion_model.cfg.visual_input)
                clip_audio = load_clip_audio(manifest, rec)
                feats = align_features(extract_audio_features(clip_audio, extractor), len(frames),
                                       extractor.rate)
                pts = fuse_forward(fusion_model, kp, feats)[0].points.astype(np.float32)
                prov = "fusion"
            traj = Trajectory(pts, frame_rate=FRAME_RATE, clip_id=rec.clip_id)
            result.written.append(formats.write_trajectory(
                out_dir / f"{rec.clip_id}{formats.TRAJ_SUFFIX}", traj, prov))
            result.frames += len(frames)
        except (OSError, ValueError) as e:
            result.errors[rec.clip_id] = f"{type(e).__name__}: {e}"
            log.error("clip %s failed: %s", rec.clip_id, e)
    result.seconds = time.perf_counter() - t0
    log.info("labeled %d frames in %.2fs (%.1f frames/s)", result.frames, result.seconds,
             result.frames_per_second)
    run_log = {"checkpoint": str(checkpoint), "manifest": str(manifest_path), "model_kind": kind,
               "smooth_sigma": smooth_sigma, "audio": audio, "clips_written": len(result.written),
               "errors": result.errors, "frames": result.frames, "seconds": result.seconds,
               "frames_per_second": result.frames_per_second}
    (out_dir / "label_log.json").write_text(json.dumps(run_log, indent=2, sort_keys=True) + "\n")
    return result


# -- smoothing --------------------------------------------------------------

SMOOTHED_PROVENANCE = {"unet": "unet_smoothed"}


def smooth_file(src, dst, sigma: float) -> Path:
    traj, header = formats.read_trajectory(src)
    prov = header["provenance"]
    if sigma > 0:
        pts = smooth_array(traj.points, FilterConfig(sigma)).astype(np.float32)
        traj = traj.replace(pts)
        prov = SMOOTHED_PROVENANCE.get(prov, prov)
    return formats.write_trajectory(dst, traj, prov)


def trajectory_files(path) -> dict[str, Path]:
    path = Path(path)
    if path.is_file():
        return {path.stem: path}
    if not path.is_dir():
        raise FileNotFoundError(f"no trajectory file or directory at {path}")
    return {p.stem: p for p in sorted(path.glob(f"*{formats.TRAJ_SUFFIX}"))}


def smooth_paths(src, dst, sigma: float) -> list[Path]:
    files = trajectory_files(src)
    dst = Path(dst)
    if Path(src).is_file() and dst.suffix == formats.TRAJ_SUFFIX:
        return [smooth_file(next(iter(files.values())), dst, sigma)]
    return [smooth_file(p, dst / p.name, sigma) for p in files.values()]


# -- evaluation -------------------------------------------------------------

def _eval_pair(args):
    cid, pred_path, ref_path = args
    pred, _ = formats.read_trajectory(pred_path)
    ref, _ = formats.read_trajectory(ref_path)
    if len(pred) != len(ref):
        raise DataError(f"clip {cid}: {len(pred)} predicted frames vs {len(ref)} reference frames")
    return evaluate_clip(cid, pred, ref)


def evaluate_dirs(pred_dir, ref, workers: int = 1) -> tuple[EvalReport, dict]:
    """Compare predicted trajectories with references.

    ``ref`` is a directory of trajectory files or a manifest whose clips carry
    ``trajectory_path``. Returns the report and the unmatched clip ids.
    """
    preds = trajectory_files(pred_dir)
    ref = Path(ref)
    if ref.is_file() and ref.suffix == ".json":
        m = formats.read_manifest(ref)
        refs = {c.clip_id: m.resolve(c.trajectory_path) for c in m.clips if c.trajectory_path}
    else:
        refs = trajectory_files(ref)
    unmatched = {"missing_reference": sorted(set(preds) - set(refs)),
                 "missing_prediction": sorted(set(refs) - set(preds))}
    common = sorted(set(preds) & set(refs))
    clips = _map(_eval_pair, [(c, preds[c], refs[c]) for c in common], workers)
    return EvalReport(clips), unmatched


def write_eval_outputs(report: EvalReport, out_dir, figures: bool = True) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"report": out_dir / "eval_report.json", "table": out_dir / "eval_clips.tsv"}
    paths["report"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(paths["table"], "w") as fh:
        fh.write("clip_id\tframes\trmse\tl1\tpcc\tpcc_skipped_dims\n")
        for c in report.clips:
            pcc = "" if c.pcc is None else f"{c.pcc:.6f}"
            fh.write(f"{c.clip_id}\t{c.frames}\t{c.rmse:.6f}\t{c.l1:.6f}\t{pcc}\t{c.pcc_skipped_dims}\n")
    if figures and report.clips:
        from .plotting import plot_eval_report
        paths.update(plot_eval_report(report, out_dir))
    return paths


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
