"""``gdlb`` command line.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
inputs), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .model import FormatError
from .pipeline import COMMANDS, MissingInput, UsageError, read_config, resolve
from .data import DataError
from .tensor import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gdlb", description="Distill a softmax-attention teacher into hybrid linear students.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key = value file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        sp.add_argument("--out", help="output root (default: $GDLB_OUT or ./gdlb_out)")
        sp.add_argument("--preset", default="desk", help="budget preset: desk, acceptance or smoke")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if name == "distill":
            sp.add_argument("--stage")
            sp.add_argument("--student")
            sp.add_argument("--layout")
            sp.add_argument("--freeze-attn", dest="freeze_attn", nargs="?", const="true")
        if name == "select-layers":
            sp.add_argument("--strategy")
            sp.add_argument("--k")
            sp.add_argument("--width")
        if name in ("eval", "profile"):
            sp.add_argument("--student")
            sp.add_argument("--stage")
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for key in ("seed", "stage", "student", "layout", "freeze_attn", "strategy", "k", "width"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = str(v)
    return out


def out_root(args) -> Path:
    return Path(args.out or os.environ.get("GDLB_OUT") or "gdlb_out")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError(f"a command is required: {', '.join(COMMANDS)}")
        if not args.verbose:
            logging.getLogger("gdlb").setLevel(logging.WARNING)
        files = read_config(args.config) if args.config else {}
        cfg = resolve(args.command, args.preset, files, _overrides(args))
        summary = COMMANDS[args.command](cfg, out_root(args), args.force)
        print(json.dumps(summary, sort_keys=True, default=str))
        return EXIT_OK
    except UsageError as e:
        print(f"gdlb: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MissingInput, FormatError, FileNotFoundError) as e:
        print(f"gdlb: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"gdlb: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
