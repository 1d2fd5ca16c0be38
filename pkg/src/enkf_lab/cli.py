"""Command-line entry point: ``enkf-lab run`` and ``enkf-lab validate``.

Exit status is 0 when every check passes, 2 when a tolerance check fails
and 1 on any error (invalid configuration, I/O, numerical failure).
"""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .errors import EnkfLabError

EXIT_PASS, EXIT_ERROR, EXIT_TOLERANCE = 0, 1, 2


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("thread count must be positive")
    return v


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with status 1; status 2 is reserved for tolerance failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="enkf-lab", description="Filtering experiments: true filter, "
                                "mean-field EnKF and particle EnKF.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment described by a JSON config")
    run.add_argument("--config", required=True, help="path to the experiment config (JSON)")
    run.add_argument("--out", help="output directory (overrides the config's 'out')")
    run.add_argument("--seed", type=_u64, help="master seed (overrides the config's 'seed')")
    run.add_argument("--threads", type=_positive, help="worker threads for replicate-level parallelism")
    val = sub.add_parser("validate", help="check a config and the model's standing assumptions")
    val.add_argument("--config", required=True, help="path to the experiment config (JSON)")
    return p


def _run(args) -> int:
    from .harness import run_experiment

    report = run_experiment(args.config, out_dir=args.out, threads=args.threads, seed=args.seed)
    for c in report.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.value} (tolerance {c.tolerance})")
    return EXIT_PASS if report.passed else EXIT_TOLERANCE


def _validate(args) -> int:
    from .harness import validate_config

    cfg, report = validate_config(args.config)
    print(f"config OK: kind={cfg.kind} seed={cfg.seed}")
    if report is None:
        return EXIT_PASS
    print(report)
    return EXIT_PASS if report.passed else EXIT_TOLERANCE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args) if args.command == "run" else _validate(args)
    except (EnkfLabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
