"""Command-line entry point: ``deep-nrsfm {generate,train,eval,sweep,coherence-report}``.

Standard output carries one JSON object per command (machine readable);
diagnostics go to standard error.  Tables are written as CSV with fixed
headers and the report commands also render PNG figures next to them.
"""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .data import center_frames, generate_synthetic, load_tracks, save_tracks, zero_fill_missing
from .evaluation import (coherence_error_series, evaluate_params, noise_sweep,
                         normalized_3d_error, rigid_baseline_error)
from .exceptions import ConfigError, NRSfMError, ShapeError, TrainingCollapseError
from .train import (checkpoint_record, load_checkpoint, select_checkpoint, train,
                    trained_records)

log = logging.getLogger("deep_nrsfm")

SWEEP_HEADER = ["ratio", "mean_error"]
EVAL_HEADER = ["frame", "error"]
COHERENCE_HEADER = ["step", "coherence", "mean_error"]
CENTRE_TOL = 1e-9


class CommandError(Exception):
    """A user-facing failure; the message goes to stderr and the exit code is 1."""


def emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x
                             for x in row])


# -- shared helpers -------------------------------------------------------------


def run_config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    threads = getattr(args, "threads", None)
    deterministic = getattr(args, "deterministic", None)
    return cfg.with_runtime(threads=threads, deterministic=deterministic).validate()


def prepared_tracks(path, center):
    """Load a track file, centre it if asked, and zero-fill hidden points."""
    ts = load_tracks(path)
    if center:
        ts = center_frames(ts)
    elif ts.n_frames:
        vis = ts.visibility[:, :, None]
        counts = np.maximum(vis.sum(axis=1), 1)
        centroid = (ts.points * vis).sum(axis=1) / counts
        scale = max(float(np.abs(ts.points).max()), 1.0)
        if np.abs(centroid).max() > CENTRE_TOL * scale:
            raise CommandError(f"{path}: frames are not centred; pass --center")
    return zero_fill_missing(ts) if not ts.visibility.all() else ts


def resolve_checkpoint(path):
    """A checkpoint file, or a training directory whose selected checkpoint is used."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("ckpt_*.json"))
        if not files:
            raise CommandError(f"{path}: no checkpoints found")
        return select_checkpoint([checkpoint_record(f) for f in files]).path
    if not path.is_file():
        raise CommandError(f"checkpoint {path} does not exist")
    return path


# -- commands -------------------------------------------------------------------


def cmd_generate(args):
    cfg = run_config(args)
    ts = generate_synthetic(cfg.synth)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_tracks(ts, out)
    emit({"p": ts.p, "frames": ts.n_frames, "gt": int(ts.has_ground_truth), "path": str(out)})
    return 0


def cmd_train(args):
    cfg = run_config(args)
    ts = prepared_tracks(args.tracks, args.center)
    sizes = cfg.sizes(ts.p)
    out = Path(args.out)
    log.info("training %s on %d frames for %d steps", sizes, ts.n_frames, cfg.train.steps)
    try:
        _, records = train(ts, sizes, cfg.train, out_dir=out)
    except TrainingCollapseError as exc:
        last = exc.last_checkpoint
        where = f"; last checkpoint {last.path}" if last is not None and last.path else ""
        raise CommandError(f"training collapsed: {exc}{where}") from exc
    best = select_checkpoint(records)
    emit({"selected": str(best.path), "step": best.step, "coherence": best.coherence,
          "mean_loss": best.mean_loss, "checkpoints": len(records),
          "log": str(out / "train_log.csv")})
    return 0


def cmd_eval(args):
    ts = prepared_tracks(args.tracks, args.center)
    if not ts.has_ground_truth:
        raise CommandError(f"{args.tracks}: no ground truth in track file; refusing to evaluate")
    if args.identity:
        report = normalized_3d_error(ts.gt_shapes, ts.gt_shapes, ts.visibility)
        source = "identity"
    else:
        ckpt = resolve_checkpoint(args.checkpoint)
        params, meta = load_checkpoint(ckpt)
        if meta["sizes"].p != ts.p:
            raise ShapeError(f"checkpoint expects p={meta['sizes'].p}, tracks have p={ts.p}")
        report = evaluate_params(params, ts, input_scale=meta["input_scale"])
        source = str(ckpt)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_csv(out, EVAL_HEADER, enumerate(report.per_frame_errors))
    summary = report.summary()
    summary["rigid_baseline"] = float(rigid_baseline_error(ts).mean_error)
    summary["checkpoint"] = source
    emit(summary)
    return 0


def parse_ratios(text):
    try:
        ratios = [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"cannot parse ratios {text!r}") from None
    if not ratios or any(r < 0 for r in ratios):
        raise ConfigError("ratios must be a non-empty list of nonnegative numbers")
    return ratios


def cmd_sweep(args):
    from .figures import plot_noise_curve

    cfg = run_config(args)
    ratios = parse_ratios(args.ratios) if args.ratios else list(cfg.ratios)
    ts = prepared_tracks(args.tracks, args.center)
    if not ts.has_ground_truth:
        raise CommandError(f"{args.tracks}: the noise sweep needs ground truth")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curve, failures = noise_sweep(ts, cfg.sizes(ts.p), cfg.train, ratios,
                                  noise_seed=cfg.seed, out_dir=out)
    write_csv(out / "sweep.csv", SWEEP_HEADER, curve)
    baseline = float(rigid_baseline_error(ts).mean_error)
    if curve:
        plot_noise_curve(curve, out / "noise_curve.png", baseline=baseline)
    for ratio, exc in failures.items():
        log.error("ratio %g failed: %s", ratio, exc)
    emit({"curve": [[r, e] for r, e in curve], "failed": sorted(failures),
          "rigid_baseline": baseline, "csv": str(out / "sweep.csv")})
    return 1 if failures else 0


def cmd_coherence_report(args):
    from .figures import plot_coherence_scatter

    ts = prepared_tracks(args.tracks, args.center)
    if not ts.has_ground_truth:
        raise CommandError(f"{args.tracks}: the coherence report needs ground truth")
    files = sorted(Path(args.run).glob("ckpt_*.json"))
    # the random initialisation is left out, as in checkpoint selection
    records = trained_records(checkpoint_record(f) for f in files)
    series = coherence_error_series(records, ts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "coherence.csv", COHERENCE_HEADER, series.points)
    plot_coherence_scatter(series, out / "coherence.png")
    emit({"checkpoints": len(records),
          "correlation": series.correlation if series.defined else None,
          "csv": str(out / "coherence.csv")})
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="deep-nrsfm",
                                 description="Multi-layer block-sparse NRSfM network.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True, runtime=True, center=True):
        p.add_argument("--config", help="INI config file (defaults apply when omitted)")
        if seed:
            p.add_argument("--seed", type=int, help="master seed for every random draw")
        if runtime:
            p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                           help="worker threads for batch gradients")
            p.add_argument("--deterministic", action="store_true",
                           help="bit-reproducible logs (wall_time recorded as 0)")
        if center:
            p.add_argument("--center", action="store_true",
                           help="subtract per-frame centroids of visible points")

    p = sub.add_parser("generate", help="write a synthetic track file with ground truth")
    common(p, runtime=False, center=False)
    p.add_argument("--out", required=True, help="output track file")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a track file")
    p.add_argument("tracks")
    common(p)
    p.add_argument("--out", required=True, help="directory for checkpoints and train_log.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="normalized mean 3D error of a checkpoint")
    p.add_argument("checkpoint", nargs="?",
                   help="checkpoint file, or a training directory (coherence-selected)")
    p.add_argument("tracks")
    p.add_argument("--identity", action="store_true",
                   help="score the ground truth against itself instead of a checkpoint")
    p.add_argument("--center", action="store_true",
                   help="subtract per-frame centroids of visible points")
    p.add_argument("--out", help="per-frame error CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="retrain across noise ratios and plot the error curve")
    p.add_argument("tracks")
    common(p)
    p.add_argument("--ratios", help="comma separated noise ratios (overrides [sweep] ratios)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("coherence-report",
                       help="3D error against final-dictionary coherence over a run")
    p.add_argument("tracks")
    p.add_argument("run", help="training output directory")
    p.add_argument("--center", action="store_true",
                   help="subtract per-frame centroids of visible points")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_coherence_report)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "eval" and not args.identity and args.checkpoint is None:
        parser.error("eval needs a checkpoint unless --identity is given")
    if args.command == "eval" and args.identity and args.checkpoint is not None:
        # with --identity the single positional is the track file
        parser.error("--identity takes only the track file")
    try:
        return args.func(args)
    except (CommandError, ConfigError, NRSfMError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
