"""Command line entry point: ``vtseg {train,label,eval,smooth,render,synth}``.

Exit codes: 0 success, 1 runtime or data failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import formats, pipeline
from .pipeline import ConfigError, DataError

log = logging.getLogger("vtseg")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default, help="override the run seed")
    p.add_argument("--config", default=default, help="JSON config (train) or spec (synth)")
    p.add_argument("--workers", type=int, default=argparse.SUPPRESS if suppress else 1,
                   help="clip-level worker processes for synth/eval")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vtseg", parents=[_global_flags(False)],
                                     description="Vocal tract RT-MRI keypoint labeling")
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_global_flags(True)]

    p = sub.add_parser("train", parents=common, help="train a U-Net or fusion model from a config")
    p.add_argument("config_path", nargs="?", help="JSON config (same as --config)")
    p.add_argument("--out", help="run directory (default: config's out_dir)")

    p = sub.add_parser("label", parents=common, help="label every clip of a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--smooth-sigma", type=float, default=1.5,
                   help="temporal filter sigma in frames; 0 disables (U-Net only)")
    p.add_argument("--audio", choices=("none", "stub", "real"), default="none")

    p = sub.add_parser("eval", parents=common, help="compare predicted and reference trajectories")
    p.add_argument("pred_dir")
    p.add_argument("ref_dir", help="directory of reference trajectories or a manifest")
    p.add_argument("--out", help="output directory for report, table and figures (default: pred_dir)")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("smooth", parents=common, help="apply the temporal Gaussian filter")
    p.add_argument("src", help="trajectory file or directory")
    p.add_argument("dst", help="output file or directory")
    p.add_argument("--sigma", type=float, default=1.5)

    p = sub.add_parser("render", parents=common, help="render keypoints over frames as an animation")
    p.add_argument("frames", help="frame container (.npy) or PNG directory")
    p.add_argument("trajectory_a")
    p.add_argument("trajectory_b", nargs="?")
    p.add_argument("--out", required=True, help="output animated PNG")
    p.add_argument("--scale", type=int, default=4)

    p = sub.add_parser("synth", parents=common, help="materialize a synthetic corpus")
    p.add_argument("spec_path", nargs="?", help="JSON corpus spec (same as --config)")
    p.add_argument("out_dir")
    return parser


def cmd_train(args) -> int:
    path = args.config_path or args.config
    if not path:
        raise ConfigError("train needs a config file (positional or --config)")
    cfg = pipeline.read_config(path)
    if cfg.get("model_kind") not in pipeline.MODEL_KINDS:
        raise ConfigError(f"unknown model_kind {cfg.get('model_kind')!r} "
                          f"(expected one of {', '.join(pipeline.MODEL_KINDS)})")
    out = args.out or cfg.get("out_dir")
    if out is None:
        raise ConfigError("no run directory: pass --out or set out_dir in the config")
    out = Path(out) if args.out else pipeline._path(cfg, out)
    summary = pipeline.run_training(cfg, out, seed=args.seed)
    from .plotting import plot_training_history
    plot_training_history(summary["history"], out / "loss_curve.png")
    print(json.dumps({k: v for k, v in summary.items() if k != "history"}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_label(args) -> int:
    for p in (args.checkpoint, args.manifest):
        if not Path(p).is_file():
            raise ConfigError(f"file not found: {p}")
    result = pipeline.label_corpus(args.checkpoint, args.manifest, args.out_dir,
                                   smooth_sigma=args.smooth_sigma, audio=args.audio)
    print(f"wrote {len(result.written)} trajectories ({result.frames_per_second:.1f} frames/s)")
    if result.errors:
        for cid, msg in sorted(result.errors.items()):
            print(f"error: {cid}: {msg}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_eval(args) -> int:
    report, unmatched = pipeline.evaluate_dirs(args.pred_dir, args.ref_dir, workers=args.workers)
    out_dir = Path(args.out or args.pred_dir)
    paths = pipeline.write_eval_outputs(report, out_dir, figures=not args.no_figures)
    corpus = report.corpus() if report.clips else {}
    print("clip_id\tframes\trmse\tl1\tpcc")
    for c in report.clips:
        print(f"{c.clip_id}\t{c.frames}\t{c.rmse:.4f}\t{c.l1:.4f}\t{'' if c.pcc is None else f'{c.pcc:.4f}'}")
    if corpus:
        pcc = corpus["pcc"]
        print(f"CORPUS\t{corpus['frames']}\t{corpus['rmse']:.4f}\t{corpus['l1']:.4f}\t"
              f"{'' if pcc is None else f'{pcc:.4f}'}")
    print(f"report: {paths['report']}", file=sys.stderr)
    bad = unmatched["missing_reference"] + unmatched["missing_prediction"]
    if bad:
        for kind, ids in unmatched.items():
            for cid in ids:
                print(f"unmatched ({kind}): {cid}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_smooth(args) -> int:
    if args.sigma < 0:
        raise ConfigError("--sigma must be >= 0")
    written = pipeline.smooth_paths(args.src, args.dst, args.sigma)
    print(f"smoothed {len(written)} trajectories")
    return EXIT_OK


def cmd_render(args) -> int:
    from .plotting import render_panels, write_animation
    frames = formats.load_frames(args.frames)
    a, _ = formats.read_trajectory(args.trajectory_a)
    b = formats.read_trajectory(args.trajectory_b)[0] if args.trajectory_b else None
    try:
        video = render_panels(frames, a.points, None if b is None else b.points, scale=args.scale)
    except ValueError as e:
        raise DataError(str(e)) from e
    write_animation(video, args.out, frame_rate=a.frame_rate)
    print(f"wrote {len(video)} frames to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    path = args.spec_path or args.config
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"spec file not found: {p}")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from e
    else:
        d = {}
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        spec = pipeline.SynthCorpusSpec.from_dict(d)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    manifest = pipeline.synthesize_corpus(spec, args.out_dir, workers=args.workers)
    print(f"wrote {spec.n_clips} clips; manifest {manifest}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "label": cmd_label, "eval": cmd_eval, "smooth": cmd_smooth,
            "render": cmd_render, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"vtseg {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, formats.FormatError, ValueError, RuntimeError) as e:
        print(f"vtseg {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
