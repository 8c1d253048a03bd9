"""CLI: render --kind <k> --csv <path> --summary <json> --out <path>."""

import argparse
import sys

from .render import FIGURE_KINDS, FigureSpec, SchemaError, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aipw-figures")
    sub = parser.add_subparsers(dest="command", required=True)
    rp = sub.add_parser("render", help="render one figure from a CSV artifact")
    rp.add_argument("--kind", required=True, choices=FIGURE_KINDS)
    rp.add_argument("--csv", required=True)
    rp.add_argument("--summary", default=None)
    rp.add_argument("--out", required=True)
    rp.add_argument("--title", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = FigureSpec(csv_path=args.csv, figure_kind=args.kind,
                      output_path=args.out, summary_path=args.summary,
                      title=args.title)
    try:
        path = render(spec)
    except (SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
