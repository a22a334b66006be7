"""Command-line interface: ``smpl-convert body`` and ``smpl-convert capture``.

Exit codes: 0 success, 1 usage error, 2 data error (bad or missing input).
"""

from __future__ import annotations

import argparse
import os
import sys

from .body import convert_body
from .capture import convert_capture

DATA_ERRORS = (OSError, ValueError, KeyError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="smpl-convert",
        description="Convert SMPL model pickles and PeopleSnapshot-style "
                    "captures into the neutral body-bundle and dataset "
                    "layouts.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p_body = sub.add_parser(
        "body", help="SMPL pickle -> body.json/body.bin bundle",
        description="Writes the body bundle consumed by the avatar "
                    "pipeline; asserts the standard 6890/13776/24 counts.")
    p_body.add_argument("--model", required=True, help="SMPL model pickle")
    p_body.add_argument("--out", required=True, help="output bundle directory")

    p_cap = sub.add_parser(
        "capture", help="capture folder -> dataset.json layout",
        description="Copies frames/masks and writes dataset.json from the "
                    "capture's poses.npz and cameras.npz; --model also "
                    "converts the body bundle into OUT/body.")
    p_cap.add_argument("--input", required=True, help="capture directory")
    p_cap.add_argument("--out", required=True, help="output dataset directory")
    p_cap.add_argument("--model", default=None,
                       help="optional SMPL pickle to convert into OUT/body")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "body":
            counts = convert_body(args.model, args.out)
            print(f"wrote {args.out}: V={counts['V']} F={counts['F']} "
                  f"J={counts['J']} S={counts['S']}")
        else:
            manifest = convert_capture(args.input, args.out)
            print(f"wrote {args.out}: {len(manifest['frames'])} frames "
                  f"({len(manifest['split']['train'])} train, "
                  f"{len(manifest['split']['test'])} test)")
            if args.model is not None:
                counts = convert_body(args.model, os.path.join(args.out, "body"))
                print(f"wrote {os.path.join(args.out, 'body')}: "
                      f"V={counts['V']} F={counts['F']} J={counts['J']} "
                      f"S={counts['S']}")
    except DATA_ERRORS as exc:
        print(f"smpl-convert {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
