"""
spinn command-line entry point.

Verbs: train, eval, make-reference, sweep, diagnose, image-fit.
Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""
import argparse
import logging
import sys

from commands import diagnose, evaluate, image_fit, make_reference, sweep, train
from utils.pyramid import set_worker_threads

logger = logging.getLogger("spinn")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def build_parser():
    parser = argparse.ArgumentParser(prog="spinn", description="Fourier feature pyramid PINN benchmarks")
    parser.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for pointwise evaluation (default: SPINN_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common_flags(p, config_required=False):
        p.add_argument("--config", required=config_required, help="run config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--checkpoint", default=None, help="checkpoint file")
        p.add_argument("--reference", default=None, help="reference solution file")

    p = sub.add_parser("train", help="train a run config")
    common_flags(p, config_required=True)
    p.set_defaults(handler=train.run)

    p = sub.add_parser("eval", help="evaluate a checkpoint against its reference")
    common_flags(p)
    p.set_defaults(handler=evaluate.run)

    p = sub.add_parser("make-reference", help="generate a reference solution")
    p.add_argument("--problem", required=True)
    p.add_argument("--resolution", type=int, default=None, help="grid points per axis")
    p.add_argument("--num-times", type=int, default=None, help="number of stored time samples")
    p.add_argument("--dt", type=float, default=None, help="maximum integrator step")
    p.add_argument("--out", default=None, help="output file")
    p.set_defaults(handler=make_reference.run)

    p = sub.add_parser("sweep", help="run a sweep spec and write sweep.csv")
    common_flags(p, config_required=True)
    p.set_defaults(handler=sweep.run)

    p = sub.add_parser("diagnose", help="diagnostic tables")
    common_flags(p)
    p.add_argument("--mode", required=True, choices=diagnose.MODES)
    p.add_argument("--steps", type=int, default=5, help="timed steps per path (throughput mode)")
    p.set_defaults(handler=diagnose.run)

    p = sub.add_parser("image-fit", help="fit images with coordinate models")
    p.add_argument("--image", default=None, help="PPM image (default: built-in 64x64 pattern)")
    p.add_argument("--kinds", default="beignet,rff,vanilla", help="comma-separated model kinds")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(handler=image_fit.run)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads is not None:
        set_worker_threads(args.threads)

    try:
        return args.handler(args)
    except ArithmeticError as exc:
        logger.error("Numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except ValueError as exc:
        logger.error("Configuration error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
