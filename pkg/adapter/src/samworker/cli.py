"""samworker command line.

    samworker --server host:port --model vanilla_vit_b --weights sam_vit_b.pth

Exit codes: 0 clean shutdown, 2 usage, 3 weights/model stack failure,
4 unknown model, 1 connection or registration failure. Weight loading
happens before any connection is made, so a bad checkpoint never
registers.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .predictor import WeightLoadError, build_bridge
from .presets import resolve_preset
from .worker import Worker, WorkerError

EXIT_OK = 0
EXIT_CONN = 1
EXIT_USAGE = 2
EXIT_WEIGHTS = 3
EXIT_MODEL = 4


def parse_server(text: str):
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise argparse.ArgumentTypeError("expected host:port")
    try:
        return host, int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad port {port!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="samworker",
        description="serve a SAM-family checkpoint to a segmentation server")
    ap.add_argument("--server", required=True, type=parse_server,
                    metavar="HOST:PORT")
    ap.add_argument("--model", required=True, help="model id to register as")
    ap.add_argument("--weights", required=True, help="checkpoint path")
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK

    try:
        preset = resolve_preset(args.model, weights=args.weights)
    except (KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL

    try:
        predictor = build_bridge(preset)
    except (WeightLoadError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_WEIGHTS

    host, port = args.server
    worker = Worker(host, port, preset, predictor)
    try:
        worker.run()
    except WorkerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONN
    except KeyboardInterrupt:
        pass
    finally:
        worker.close()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
