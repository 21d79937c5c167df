"""Command-line entry point: one subcommand per stage.

    stad synth          write a synthetic train/test dataset
    stad train-teacher  train the Transformer teacher
    stad distill        distill the teacher into the convolutional student
    stad detect         score cubes with one ablation mode (A-E) or RX
    stad eval           AUC tables for a directory of score maps
    stad dep            dependency of one detector on another

Settings come from built-in defaults, then an optional ``--config`` JSON file,
then explicit flags.  Exit codes: 0 success, 2 invalid input, 3 numerical
failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .pipeline import (
    DETECT_MODES,
    RunConfig,
    run_dep,
    run_detect,
    run_distill,
    run_eval,
    run_train_teacher,
    synth_dataset,
)
from .tensor import GradientError

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

_DEFAULTS = RunConfig()

_MODE_HELP = ("A reconstruction error, B saliency, C small-target filter only, "
              "D reconstruction error x filter mask, E full detector (masked saliency), "
              "RX global Mahalanobis distance")


def _opt(parser: argparse.ArgumentParser, flag: str, typ, text: str) -> None:
    """Add a flag bound to the RunConfig field of the same name; None means 'not given'."""
    field = flag.lstrip("-").replace("-", "_")
    default = getattr(_DEFAULTS, field)
    parser.add_argument(flag, dest=field, type=typ, default=None,
                        help=f"{text} (default: {default})")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file with RunConfig fields; flags override it (default: none)")
    _opt(parser, "--seed", int, "run seed")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress (default: off)")


def _training_opts(parser: argparse.ArgumentParser) -> None:
    _opt(parser, "--bands", int, "band count expected in the data")
    _opt(parser, "--lr", float, "Adam learning rate")
    _opt(parser, "--batch-size", int, "cubes per step, one random patch each")
    _opt(parser, "--patch", int, "side of the square training patch")
    _opt(parser, "--ema-decay", float, "decay of the parameter moving average")
    _opt(parser, "--beta1", float, "Adam first-moment decay")
    _opt(parser, "--beta2", float, "Adam second-moment decay")
    _opt(parser, "--adam-eps", float, "Adam denominator epsilon")
    _opt(parser, "--teacher-hidden", int, "teacher width (projection and feed-forward)")
    _opt(parser, "--teacher-heads", int, "teacher attention heads")
    _opt(parser, "--teacher-blocks", int, "teacher Transformer blocks")
    _opt(parser, "--student-hidden", int, "student feature channels")
    parser.add_argument("--checkpoint-every", type=int, default=0,
                        help="save resumable state every N epochs, 0 = only at the end (default: 0)")
    parser.add_argument("--resume", action="store_true",
                        help="continue from the state saved under OUT/state (default: off)")


def _stf_opts(parser: argparse.ArgumentParser) -> None:
    _opt(parser, "--stf-radius", int, "bilateral filter disc radius in pixels")
    _opt(parser, "--sigma-s", float, "bilateral spatial bandwidth")
    _opt(parser, "--sigma-c", float, "bilateral range bandwidth on the 0..255 scale")
    _opt(parser, "--ridge", float, "explicit covariance ridge; unset uses relative diagonal loading")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stad", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True, help="dataset directory to create")
    p.add_argument("--count", dest="train_count", type=int, default=None,
                   help=f"anomaly-free training cubes (default: {_DEFAULTS.train_count})")
    _opt(p, "--test-count", int, "labeled test cubes")
    _opt(p, "--height", int, "rows per cube")
    _opt(p, "--width", int, "columns per cube")
    _opt(p, "--bands", int, "spectral bands")
    _opt(p, "--targets", int, "targets per test cube, must be >= 1")
    _opt(p, "--target-size", int, "pixels per target blob")
    _opt(p, "--contrast", float, "blend weight of the target spectrum")
    _opt(p, "--noise", float, "Gaussian noise standard deviation")

    p = sub.add_parser("train-teacher", help="train the teacher network")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory with train/")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--epochs", dest="teacher_epochs", type=int, default=None,
                   help=f"training epochs (default: {_DEFAULTS.teacher_epochs})")
    _training_opts(p)

    p = sub.add_parser("distill", help="distill the teacher into the student")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory with train/")
    p.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint directory")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--epochs", dest="student_epochs", type=int, default=None,
                   help=f"training epochs (default: {_DEFAULTS.student_epochs})")
    _training_opts(p)

    p = sub.add_parser("detect", help="score cubes")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--cube", type=Path, nargs="+", help="cube file(s) (.raw with .json sidecar)")
    src.add_argument("--data", type=Path, help="dataset directory; scores every cube in test/")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="student checkpoint (or teacher with --use-teacher); not needed for C and RX")
    p.add_argument("--mode", choices=DETECT_MODES, default="E", help=f"{_MODE_HELP} (default: E)")
    p.add_argument("--out", type=Path, required=True, help="directory for score maps and manifests")
    p.add_argument("--stf-bypass", action="store_true",
                   help="replace the filter mask by ones (default: off)")
    p.add_argument("--use-teacher", action="store_true",
                   help="require --checkpoint to be a teacher and score with it (default: off)")
    p.add_argument("--format", choices=("pgm", "csv", "both"), default="both",
                   help="score map file format (default: both)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default: 1)")
    _stf_opts(p)
    _opt(p, "--tile", int, "teacher attention tile side at inference")

    p = sub.add_parser("eval", help="AUC tables for a score directory")
    _common(p)
    p.add_argument("--scores-dir", type=Path, required=True, help="directory of score maps")
    p.add_argument("--labels-dir", type=Path, required=True, help="directory of label PGMs")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default: 1)")
    _opt(p, "--points", int, "threshold samples per ROC")

    p = sub.add_parser("dep", help="dependency of detector phi on detector psi")
    _common(p)
    p.add_argument("--phi-dir", type=Path, required=True,
                   help="eval output (with report.json) or score directory of the studied detector")
    p.add_argument("--psi-dir", type=Path, required=True,
                   help="same for the reference detector, e.g. RX or mode C")
    p.add_argument("--labels-dir", type=Path, default=None,
                   help="label PGMs, needed when a directory holds score maps (default: none)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _opt(p, "--points", int, "threshold samples per ROC")
    return parser


def _config(args) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k in RunConfig.fields()}
    return RunConfig.merged(args.config, **flags)


def _check_checkpoint_kind(path: Path, use_teacher: bool) -> None:
    manifest = path / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    kind = json.loads(manifest.read_text())["kind"]
    wanted = "teacher" if use_teacher else "student"
    if kind != wanted:
        raise ValueError(f"{path} holds a {kind} checkpoint; expected a {wanted}"
                         + ("" if use_teacher else " (pass --use-teacher to score with a teacher)"))


def _dispatch(args) -> dict:
    cfg = _config(args)
    if args.command == "synth":
        out = synth_dataset(cfg, args.out)
        return {"dataset": str(out)}
    if args.command == "train-teacher":
        ck = run_train_teacher(cfg, args.data, args.out, args.checkpoint_every, args.resume)
        return {"checkpoint": str(ck)}
    if args.command == "distill":
        ck = run_distill(cfg, args.data, args.teacher, args.out, args.checkpoint_every, args.resume)
        return {"checkpoint": str(ck)}
    if args.command == "detect":
        cubes = args.cube or sorted((args.data / "test").glob("*.raw"))
        if not cubes:
            raise FileNotFoundError(f"no cubes found under {args.data}")
        if args.mode not in ("C", "RX"):
            if args.checkpoint is None:
                raise ValueError(f"mode {args.mode} needs --checkpoint")
            _check_checkpoint_kind(args.checkpoint, args.use_teacher)
        names = run_detect(cfg, cubes, args.out, args.mode, args.checkpoint, args.stf_bypass,
                           args.jobs, args.format)
        return {"scored": names}
    if args.command == "eval":
        return run_eval(cfg, args.scores_dir, args.labels_dir, args.out, args.jobs).summary()
    rep = run_dep(cfg, args.phi_dir, args.psi_dir, args.out, args.labels_dir)
    return {"mdep_df": rep.mdep_df, "mdep_bs": rep.mdep_bs,
            "strong_df": rep.strong_df, "strong_bs": rep.strong_bs}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _dispatch(args)
    except (ArithmeticError, GradientError) as exc:
        print(f"stad: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"stad: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"stad: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
