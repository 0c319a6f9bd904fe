"""Command-line entry point for the adapter process."""

from __future__ import annotations

import argparse
import sys

from .backends import fallback_colorize, load_model_backend
from .server import ProtocolError, serve_loop


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="colorizer-adapter",
        description="Serve a colorization backend over the stdio protocol.",
    )
    parser.add_argument(
        "--backend", choices=["fallback", "model"], default="fallback",
        help="rule-based fallback or a wrapped model callable",
    )
    parser.add_argument(
        "--model", default=None,
        help="model entry point as module:callable (required with --backend model)",
    )
    args = parser.parse_args(argv)

    if args.backend == "model":
        if not args.model:
            print("error: --backend model requires --model", file=sys.stderr)
            return 2
        try:
            backend = load_model_backend(args.model)
        except (ImportError, AttributeError, ValueError) as exc:
            print(f"error: cannot load model backend: {exc}", file=sys.stderr)
            return 2
    else:
        backend = fallback_colorize

    try:
        serve_loop(backend)
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
