"""
Command line entry point: ``homogenlab <command> [--config PATH] [--out DIR] [--seed N] [--samples K]``.
"""
import argparse
import logging
import sys
from logging import getLogger

from . import ConfigError
from . import SolverFailure
from . import __version__
from .lab import ExperimentConfig
from .lab import run
from .lab import verify_report
from .lab import write_report

logger = getLogger(__name__)

COMMANDS = {
    'sample': 'sample',
    'solve': 'lambda-sweep',
    'expand': 'expansion',
    'cell': 'cell-quantities',
    'homogenize': 'homogenize',
    'corrector': 'corrector-rate',
    'rate': 'homog-rate',
    'lipschitz-interior': 'interior-lipschitz',
    'lipschitz-boundary': 'boundary-lipschitz',
    'excess': 'excess-decay',
    'report': None,
}
USAGE = f"usage: homogenlab {{{','.join(COMMANDS)}}} [--config PATH] [--out DIR] [--seed N] [--samples K] [--verbose]"

EX_OK = 0
EX_FAILED = 1
EX_CONFIG = 2
EX_SOLVER = 3
EX_USAGE = 64


def parser_for(command):
    parser = argparse.ArgumentParser(prog=f"homogenlab {command}")
    parser.add_argument('--out', default='out', help="Output directory (default: %(default)s).")
    parser.add_argument('--verbose', '-v', action='store_true', help="Log debug messages.")
    parser.add_argument('--version', action='version', version=f"homogenlab {__version__}")
    if command != 'report':
        parser.add_argument('--config', help="TOML experiment config; defaults apply when omitted.")
        parser.add_argument('--seed', type=int, help="First seed, overrides the config.")
        parser.add_argument('--samples', type=int, help="Number of seeds, overrides the config.")
    return parser


def report(out):
    manifest, mismatched = verify_report(out)
    print(f"{manifest['config']['experiment']['kind']} run, config {manifest['config_hash']}, version {manifest['version']}")
    for name, digest in sorted(manifest['outputs'].items()):
        print(f"  {name}: {'MISMATCH' if name in mismatched else 'ok'} {digest}")
    for key, value in sorted(manifest['aggregates'].items()):
        print(f"  {key} = {value}")
    return EX_FAILED if mismatched else EX_OK


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv or argv[0] not in COMMANDS:
        print(USAGE, file=sys.stderr)
        return EX_USAGE
    command, rest = argv[0], argv[1:]
    try:
        args = parser_for(command).parse_args(rest)
    except SystemExit as exc:
        return EX_OK if exc.code == 0 else EX_CONFIG
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s %(name)s %(levelname)s %(message)s',
    )
    try:
        if command == 'report':
            return report(args.out)
        kind = COMMANDS[command]
        config = ExperimentConfig.from_toml(args.config, kind) if args.config else ExperimentConfig(kind)
        config = config.with_overrides(args.seed, args.samples)
        write_report(run(config), args.out)
    except ConfigError as exc:
        print(f"homogenlab {command}: {exc}", file=sys.stderr)
        return EX_CONFIG
    except SolverFailure as exc:
        logger.error("Solver failure in %s: %s (residual %r).", exc.stage, exc, exc.residual)
        print(f"homogenlab {command}: solver failure: {exc}", file=sys.stderr)
        return EX_SOLVER
    return EX_OK
