"""Command line entry point.

    glance <experiment> --config <path> [--out <dir>] [--seed <u64>] [--workers <n>]
    glance list-experiments
    glance plot-script <residuals|drift> --csv <file>

Exit codes: 0 pass, 2 acceptance-check failure, 1 error.
"""

from __future__ import annotations

import argparse
import sys

from .config import EXPERIMENT_KINDS
from .errors import ConfigInvalid, GlanceError


def build_parser():
    parser = argparse.ArgumentParser(prog="glance",
                                     description="convex-billiard dynamics experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
    sub.add_parser("list-experiments", help="print the experiment catalog")
    p = sub.add_parser("plot-script", help="emit a gnuplot script for standard figures")
    p.add_argument("figure", choices=["residuals", "drift"])
    p.add_argument("--csv", required=True)
    return parser


def plot_script(figure, csv_path):
    if figure == "residuals":
        return "\n".join([
            "set logscale xy",
            "set xlabel 'tau'",
            "set ylabel 'residual'",
            "set key left top",
            f"plot '{csv_path}' using 1:2 with linespoints title 'res_i', \\",
            f"     '{csv_path}' using 1:3 with linespoints title 'res_ii', \\",
            f"     '{csv_path}' using 1:4 with linespoints title 'res_iii', \\",
            f"     '{csv_path}' using 1:5 with linespoints title 'res_iv', \\",
            f"     '{csv_path}' using 1:6 with linespoints title 'res_interp'",
        ])
    return "\n".join([
        "set xlabel 'step'",
        "set ylabel 'y'",
        f"plot '{csv_path}' using 1:4 with lines title 'height'",
    ])


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "list-experiments":
        from .runner import list_experiments

        print(list_experiments())
        return 0
    if args.command == "plot-script":
        print(plot_script(args.figure, args.csv))
        return 0
    from .runner import run

    try:
        status = run(args.command, args.config, out_dir=args.out, seed=args.seed,
                     workers=args.workers)
    except ConfigInvalid as exc:
        print(f"ConfigInvalid: {exc}", file=sys.stderr)
        return 1
    except GlanceError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if status == 0:
        print(f"{args.command}: pass")
    elif status == 2:
        print(f"{args.command}: acceptance check failed", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
