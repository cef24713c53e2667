"""Command-line entry point: ``siamgat {train,track,eval,gradcheck,synth}``.

Exit codes: 0 success, 1 usage/config error, 2 runtime error,
3 gradient-check failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, apply_overrides, dump_config, load_config
from .evaluation import (EvalReport, SequenceFormatError, evaluate, find_sequences, load_boxes,
                         load_sequence, save_results, save_sequence)
from .geometry import BoundingBox
from .gradcheck_suite import format_table, run_suite
from .model import SiamGATModel
from .synthetic import SynthSpec, synth_sequence
from .tracker import track_sequence
from .training import TrainingDiverged, train

log = logging.getLogger("siamgat")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Commands as library calls


def synthetic_pool(count: int, seed: int, aspect_drift: float = 1.0, scale_drift: float = 0.0,
                   n_frames: int = 40) -> list:
    """``count`` deterministic synthetic sequences with seeds ``seed, seed+1, ...``."""
    return [synth_sequence(SynthSpec(n_frames=n_frames, aspect_drift=aspect_drift,
                                     scale_drift=scale_drift, seed=seed + k))
            for k in range(count)]


def load_model(cfg: RunConfig, checkpoint) -> SiamGATModel:
    model = SiamGATModel(cfg.model, cfg.seed)
    try:
        model.load_state_dict(load_checkpoint(checkpoint))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{checkpoint}: does not match the configured model ({exc})") from exc
    return model


def cmd_train(cfg: RunConfig, sequences=None, out_dir=None, steps: int | None = None):
    """Train from ``sequences`` (or the sequence directories under ``paths.data``)."""
    if sequences is None:
        if not cfg.paths.data:
            raise UsageError("no training data: set paths.data or pass --data / --synthetic")
        sequences = [load_sequence(p, load_frames=True) for p in find_sequences(cfg.paths.data)]
    out_dir = Path(out_dir or cfg.paths.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(dump_config(cfg))
    model = SiamGATModel(cfg.model, cfg.seed)
    result = train(cfg, model, sequences, out_dir, out_dir / Path(cfg.paths.log).name, steps)
    return result


def cmd_track(cfg: RunConfig, sequence_dir, checkpoint, out=None, overlay_dir=None) -> list[Path]:
    """Track every sequence under ``sequence_dir``; one results file per sequence."""
    model = load_model(cfg, checkpoint)
    dirs = find_sequences(sequence_dir)
    written = []
    for d in dirs:
        seq = load_sequence(d)
        boxes = track_sequence(model, seq.frames, seq.gt[0], cfg.track,
                               None if overlay_dir is None else Path(overlay_dir) / seq.name)
        if out is not None and len(dirs) == 1 and Path(out).suffix == ".txt":
            path = Path(out)
        else:
            path = Path(out or cfg.paths.results) / f"{seq.name}.txt"
        written.append(save_results(boxes, path))
    return written


def _gt_boxes(path: Path) -> list[BoundingBox]:
    return load_boxes(path / "groundtruth.txt" if path.is_dir() else path)


def cmd_eval(results, gt, workers: int = 1) -> EvalReport:
    """Compare a results file with a gt file / sequence directory, or a results
    directory holding ``<name>.txt`` with a root of sequence directories."""
    results, gt = Path(results), Path(gt)
    if not results.exists():
        raise FileNotFoundError(f"results not found: {results}")
    if results.is_file():
        pairs = [(results.stem, _xywh(load_boxes(results)), _xywh(_gt_boxes(gt)))]
    else:
        pairs = []
        for d in find_sequences(gt):
            f = results / f"{d.name}.txt"
            if not f.is_file():
                raise FileNotFoundError(f"no results file for sequence {d.name}: {f}")
            pairs.append((d.name, _xywh(load_boxes(f)), _xywh(_gt_boxes(d))))
    return evaluate(pairs, workers=workers)


def _xywh(boxes):
    return [b.to_xywh() for b in boxes]


def cmd_gradcheck(seeds=(0, 1, 2), eps: float = 1e-5, tol: float = 1e-4):
    rows = run_suite(seeds, eps, tol)
    return rows, all(r.passed for r in rows)


def cmd_synth(spec: SynthSpec, out_dir, count: int = 1) -> list[Path]:
    out = []
    for k in range(count):
        s = SynthSpec(**{**spec.__dict__, "seed": spec.seed + k})
        seq = synth_sequence(s)
        target = Path(out_dir) if count == 1 else Path(out_dir) / seq.name
        out.append(save_sequence(seq, target))
    return out


# --------------------------------------------------------------------------
# Argument parsing


def _parser() -> argparse.ArgumentParser:
    # SUPPRESS defaults let the options sit before or after the sub-command
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML run config")
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                        help="override one config key, e.g. train.epochs=4 (repeatable)")
    common.add_argument("--dump-config", action="store_true", default=argparse.SUPPRESS,
                        help="print the effective config and exit")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="siamgat", parents=[common],
                                description="Graph-attention Siamese tracker.")
    sub = p.add_subparsers(dest="command")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="sequence directory or root of sequence directories")
    t.add_argument("--synthetic", type=int, metavar="N",
                   help="train on N generated sequences instead of --data")
    t.add_argument("--aspect-drift", type=float, default=1.0, help="for --synthetic")
    t.add_argument("--out", help="checkpoint directory (default paths.checkpoint_dir)")
    t.add_argument("--steps", type=int, help="stop after this many SGD steps")

    k = sub.add_parser("track", parents=[common], help="track sequences with a checkpoint")
    k.add_argument("sequence", help="sequence directory or root of sequence directories")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--out", help="results file (single sequence) or directory")
    k.add_argument("--overlays", help="directory for frames with the predicted box drawn in")

    e = sub.add_parser("eval", parents=[common], help="score results against ground truth")
    e.add_argument("results", help="results file or directory of <sequence>.txt files")
    e.add_argument("gt", help="groundtruth file, sequence directory or root")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--report", help="write the key: value report here")
    e.add_argument("--curves", help="directory for success/precision curve tables")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all ops")
    g.add_argument("--seeds", type=int, default=3)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)

    s = sub.add_parser("synth", parents=[common], help="write synthetic sequence directories")
    s.add_argument("out")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--frames", type=int, default=40)
    s.add_argument("--motion", type=float, default=2.0)
    s.add_argument("--scale-drift", type=float, default=0.0)
    s.add_argument("--aspect-drift", type=float, default=1.0)
    s.add_argument("--distractors", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    return p


def _config(args) -> RunConfig:
    path = getattr(args, "config", None)
    cfg = load_config(path) if path else RunConfig()
    return apply_overrides(cfg, getattr(args, "set", []))


def _run(args) -> int:
    cfg = _config(args)
    if getattr(args, "dump_config", False):
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    if args.command is None:
        raise UsageError("a command is required (train, track, eval, gradcheck, synth)")

    if args.command == "train":
        seqs = None
        if args.synthetic:
            seqs = synthetic_pool(args.synthetic, cfg.seed, args.aspect_drift)
        elif args.data:
            seqs = [load_sequence(p, load_frames=True) for p in find_sequences(args.data)]
        res = cmd_train(cfg, seqs, args.out, args.steps)
        for c in res.checkpoints:
            print(c)
    elif args.command == "track":
        for path in cmd_track(cfg, args.sequence, args.checkpoint, args.out, args.overlays):
            print(path)
    elif args.command == "eval":
        report = cmd_eval(args.results, args.gt, args.workers)
        text = report.to_text()
        sys.stdout.write(text)
        if args.report:
            Path(args.report).write_text(text)
        if args.curves:
            d = Path(args.curves)
            d.mkdir(parents=True, exist_ok=True)
            for name, table in report.curve_tables().items():
                (d / f"{name}.csv").write_text(table)
    elif args.command == "gradcheck":
        rows, ok = cmd_gradcheck(tuple(range(args.seeds)), args.eps, args.tol)
        print(format_table(rows))
        if not ok:
            print("gradient check FAILED", file=sys.stderr)
            return EXIT_CHECK
    elif args.command == "synth":
        spec = SynthSpec(n_frames=args.frames, motion=args.motion, scale_drift=args.scale_drift,
                         aspect_drift=args.aspect_drift, distractors=args.distractors,
                         noise=args.noise, seed=args.seed)
        for path in cmd_synth(spec, args.out, args.count):
            print(path)
    return EXIT_OK


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints its own message
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, UsageError) as exc:
        print(f"siamgat: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, SequenceFormatError, CheckpointError, TrainingDiverged,
            ValueError, OSError) as exc:
        print(f"siamgat: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
