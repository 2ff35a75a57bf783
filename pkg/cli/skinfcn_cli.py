#!/usr/bin/env python3
"""
SkinFCN CLI - train, predict, score, gradient-check and generate synthetic data
"""
import argparse
import logging
import os
import sys
from pathlib import Path

# Add the project root to the path so we can import skinfcn
sys.path.insert(0, str(Path(__file__).parent.parent))

from dotenv import load_dotenv

from skinfcn.config import configure_logging, resolve_run_config
from skinfcn.errors import DataError, NumericError, SkinFCNError
from skinfcn.gradcheck import format_table, run_gradcheck
from skinfcn.parallel import set_num_threads
from skinfcn.synth import synth_generate
from skinfcn.tensor import set_check_finite
from skinfcn.training import predict_images, score_directories, train

_LOGGER = logging.getLogger("skinfcn.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK_FAILED = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Reports usage errors as exit code 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def train_command(args):
    """Train a model and checkpoint it after every epoch."""
    flags = {
        "manifest": args.manifest,
        "out": args.out,
        "epochs": args.epochs,
        "seed": args.seed,
        "preset": args.preset,
        "fusion": args.fusion,
        "learning_rate": args.learning_rate,
        "momentum": args.momentum,
        "weight_decay": args.weight_decay,
        "batch_size": args.batch_size,
        "target_size": args.target_size,
        "threads": args.train_threads if args.train_threads is not None else args.threads,
        "start_epoch": args.start_epoch,
        "init": args.init,
        "val_manifest": args.val_manifest,
        "log": args.log,
    }
    run = resolve_run_config(flags, args.config)
    summaries = train(run)
    last = summaries[-1]
    print(f"Trained {len(summaries)} epoch(s); checkpoint written to {run.out}")
    print(f"  Final mean loss: {last.mean_loss:.6f}")
    print(f"  Final train JA: {last.train_ja:.4f}")
    return EXIT_OK


def predict_command(args):
    """Segment images with a trained checkpoint."""
    if args.gt is not None and not args.overlay:
        raise UsageError("--gt only applies together with --overlay")
    written = predict_images(args.checkpoint, args.input, args.out, overlay=args.overlay, gt_dir=args.gt, size=args.size)
    print(f"Wrote {len(written)} file(s) to {args.out}")
    return EXIT_OK


def score_command(args):
    """Score predicted masks against ground truth."""
    report = score_directories(args.pred, args.gt, args.out)
    print(f"Scored {len(report.images)} image(s); report written to {args.out}")
    print(f"Mean JA: {report.ranking_key:.6f}")
    return EXIT_OK


def gradcheck_command(args):
    """Verify every backward rule against finite differences."""
    results = run_gradcheck(args.seed)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"Gradient check failed: {', '.join(failed)}")
        return EXIT_CHECK_FAILED
    print("All gradient checks passed")
    return EXIT_OK


def synth_command(args):
    """Generate a synthetic lesion dataset."""
    manifest = synth_generate(args.count, args.size, args.seed, args.out, hair=args.hair)
    print(f"Generated {len(manifest)} sample(s) in {args.out}")
    return EXIT_OK


def build_parser():
    parser = _Parser(
        prog="skinfcn-cli",
        description="SkinFCN CLI - skin lesion segmentation with a skip-layer FCN",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )

    # Global arguments
    parser.add_argument("--threads", type=int, default=None, help="Worker threads (default: 1 or SKINFCN_THREADS env var)")
    parser.add_argument("--log-level", default=None, help="Log level (default: INFO or SKINFCN_LOG_LEVEL env var)")

    subparsers = parser.add_subparsers(dest="command", help="Available commands", parser_class=_Parser)

    # Train command
    train_parser = subparsers.add_parser("train", help="Train a model")
    train_parser.add_argument("--config", help="key=value file with run settings")
    train_parser.add_argument("--manifest", help="Training manifest (id<TAB>image<TAB>mask)")
    train_parser.add_argument("--epochs", type=int, help="Number of epochs to run")
    train_parser.add_argument("--seed", type=int, help="Seed for initialization and shuffling")
    train_parser.add_argument("--out", help="Checkpoint path (rewritten after every epoch)")
    train_parser.add_argument("--init", help="Checkpoint to resume from or to import weights from")
    train_parser.add_argument("--start-epoch", type=int, help="Epochs already completed by --init (resume)")
    train_parser.add_argument("--preset", choices=["canonical", "desk", "micro"], help="Architecture widths (default: canonical)")
    train_parser.add_argument("--fusion", choices=["concat", "sum"], help="Head fusion (default: concat)")
    train_parser.add_argument("--learning-rate", type=float, help="SGD learning rate (default: 0.001)")
    train_parser.add_argument("--momentum", type=float, help="SGD momentum (default: 0.9)")
    train_parser.add_argument("--weight-decay", type=float, help="L2 weight decay (default: 0.0001)")
    train_parser.add_argument("--batch-size", type=int, help="Images per batch (default: 6)")
    train_parser.add_argument("--target-size", type=int, help="Training resolution (default: 384)")
    train_parser.add_argument("--val-manifest", help="Validation manifest scored after every epoch")
    train_parser.add_argument("--log", help="Per-epoch CSV log (default: <out>.log.csv)")
    train_parser.add_argument("--threads", dest="train_threads", type=int, help="Worker threads for this run")
    train_parser.set_defaults(func=train_command)

    # Predict command
    predict_parser = subparsers.add_parser("predict", help="Segment images")
    predict_parser.add_argument("--checkpoint", required=True, help="Trained checkpoint")
    predict_parser.add_argument("--input", required=True, nargs="+", help="Image files or directories")
    predict_parser.add_argument("--out", required=True, help="Output directory")
    predict_parser.add_argument("--overlay", action="store_true", help="Also write contour overlays")
    predict_parser.add_argument("--gt", help="Ground-truth mask directory for overlays")
    predict_parser.add_argument("--size", type=int, help="Resize to SIZE x SIZE before inference")
    predict_parser.set_defaults(func=predict_command)

    # Score command
    score_parser = subparsers.add_parser("score", help="Score predicted masks")
    score_parser.add_argument("--pred", required=True, help="Predicted mask directory")
    score_parser.add_argument("--gt", required=True, help="Ground-truth mask directory")
    score_parser.add_argument("--out", required=True, help="Report CSV path")
    score_parser.set_defaults(func=score_command)

    # Gradcheck command
    gradcheck_parser = subparsers.add_parser("gradcheck", help="Finite-difference gradient checks")
    gradcheck_parser.add_argument("--seed", type=int, default=0, help="Seed (default: 0)")
    gradcheck_parser.set_defaults(func=gradcheck_command)

    # Synth command
    synth_parser = subparsers.add_parser("synth", help="Generate a synthetic dataset")
    synth_parser.add_argument("--count", type=int, required=True, help="Number of images")
    synth_parser.add_argument("--size", type=int, required=True, help="Image side (multiple of 32)")
    synth_parser.add_argument("--seed", type=int, required=True, help="Generator seed")
    synth_parser.add_argument("--out", required=True, help="Output directory")
    synth_parser.add_argument("--hair", action="store_true", help="Draw hair-like artifacts")
    synth_parser.set_defaults(func=synth_command)

    return parser


def _fail(error, code):
    _LOGGER.error(str(error))
    print(f"Error: {error}", file=sys.stderr)
    return code


def run(argv=None):
    """Parse arguments, run the command and map errors to exit codes."""
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    try:
        configure_logging(args.log_level)
        if os.getenv("SKINFCN_CHECK_FINITE"):
            set_check_finite(os.environ["SKINFCN_CHECK_FINITE"].lower() in ("1", "true"))
        if args.threads is not None:
            set_num_threads(args.threads)
        return args.func(args)
    except (DataError, NumericError, OSError) as e:
        return _fail(e, EXIT_DATA)
    except (UsageError, SkinFCNError, ValueError) as e:
        return _fail(e, EXIT_USAGE)


def main():
    """Main CLI entry point."""
    sys.exit(run())


if __name__ == "__main__":
    main()
