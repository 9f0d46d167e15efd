"""plot-report: render figures from metrics and training-log CSVs.

    plot-report error-curves --in metrics.csv --out fig.png
    plot-report train-log --in log.csv --out loss.png
"""

from __future__ import annotations

import argparse
import sys

from .figures import MalformedCsvError, plot_error_curves, plot_training_log


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plot-report", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("error-curves", "train-log"):
        p = sub.add_parser(name)
        p.add_argument("--in", dest="input", required=True, help="input CSV")
        p.add_argument("--out", dest="output", required=True,
                       help="output image path (.png or .svg)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "error-curves":
            out = plot_error_curves(args.input, args.output)
        else:
            out = plot_training_log(args.input, args.output)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MalformedCsvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
