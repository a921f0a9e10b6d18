import argparse
import logging
from typing import List, Optional

from .core import CONFIG_FILE, EXIT_OK, LabError, calculate_sha256, save_config
from .controllers.experiment_controller import SUBCOMMANDS, ExperimentController
from .services.config_service import ConfigService, RunConfig

HELP = {
    "validate": "finite-horizon certificate, invariance check and a sample trajectory",
    "estimate": "diffusion matrix, Φ(0), Green–Kubo and induced variances, local limit profile",
    "limit-test": "exponential, Laplace, joint and flatness tests on map and/or flow clocks",
    "oracle": "exact checks on finite-state Markov chain walks",
    "moments": "exact moment identities, limit sampler and lattice sums",
}


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text}") from None
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=CONFIG_FILE, help="run configuration (JSON)")
    common.add_argument("--from-manifest", metavar="PATH", help="re-run exactly what a manifest.json recorded")
    common.add_argument("--seed", type=_u64, help="override the master seed")
    common.add_argument("--threads", type=_positive_int, help="worker threads")
    common.add_argument("--out", help="output directory")
    common.add_argument("--debug", action="store_true", help="debug log at logs/debug.log")

    parser = argparse.ArgumentParser(prog="lorentz-lab",
                                     description="Z²-periodic Lorentz gas simulator and verification lab")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common], help=HELP[name])
        if name == "moments":
            p.add_argument("--max-m", type=_positive_int, help="largest moment order")
        if name == "limit-test":
            p.add_argument("--clock", choices=("map", "flow", "both"), help="time clock of the ensembles")

    init = sub.add_parser("init-config", help="write a config with every default filled in")
    init.add_argument("path", nargs="?", default=CONFIG_FILE)
    init.add_argument("--debug", action="store_true")
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.subcommand == "init-config":
            save_config(RunConfig().to_dict(), args.path)
            logging.info(f"[CLI] defaults written to {args.path}")
            return EXIT_OK

        if args.from_manifest:
            config = ConfigService.from_manifest(args.from_manifest)
            path, digest = args.from_manifest, calculate_sha256(args.from_manifest)
        else:
            config, digest = ConfigService.load(args.config)
            path = args.config

        overrides = {k: v for k, v in {
            "seed": args.seed, "threads": args.threads, "out": args.out,
            "clock": getattr(args, "clock", None), "max_m": getattr(args, "max_m", None),
        }.items() if v is not None}
        config = ConfigService.apply_overrides(config, **overrides)
        return ExperimentController(config, digest, path, overrides).run(args.subcommand)
    except LabError as e:
        logging.error(f"[CLI] {e.code}: {e}")
        return e.exit_code
