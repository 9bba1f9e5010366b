"""Command line entry points.

Exit codes: 0 success, 2 usage or config error, 3 box empty after clamping
to the volume, 4 I/O failure or unknown model.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
import time
from typing import List, Optional

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_EMPTY_BOX = 3
EXIT_IO = 4


def _parse_bbox(text: str) -> List[int]:
    parts = text.split(",")
    if len(parts) != 6:
        raise argparse.ArgumentTypeError("expected i0,j0,k0,i1,j1,k1")
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError("bbox bounds must be integers")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxelprompt",
                                description="promptable volumetric segmentation engine")
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("serve", help="run the segmentation server until interrupted")
    sp.add_argument("--config", default=None, help="config file path")

    sp = sub.add_parser("segment", help="batch-segment one 3D box with the builtin backend")
    sp.add_argument("input", help="input NIfTI volume")
    sp.add_argument("--bbox", type=_parse_bbox, required=True, metavar="i0,j0,k0,i1,j1,k1")
    sp.add_argument("--axis", type=int, choices=(0, 1, 2), required=True,
                    help="propagation axis")
    sp.add_argument("--label", type=int, default=1, metavar="N")
    sp.add_argument("--output", required=True, help="output NIfTI label path")

    sp = sub.add_parser("bench", help="measure prompt-to-mask latency")
    sp.add_argument("input", help="input NIfTI volume")
    sp.add_argument("--model", default="reference", metavar="ID")
    sp.add_argument("--trials", type=int, default=500, metavar="N")

    sp = sub.add_parser("info", help="print volume geometry and intensity range")
    sp.add_argument("input", help="input NIfTI volume")

    sp = sub.add_parser("kernel-bench", help="compare compiled kernels with numpy fallbacks")
    sp.add_argument("--repeats", type=int, default=50)

    return p


def cmd_serve(args) -> int:
    from .config import ConfigError, ServerConfig, load_config
    from .server import VoxelPromptServer

    try:
        config = load_config(args.config) if args.config else ServerConfig()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, config.log_level),
                        format="%(asctime)s %(name)s %(message)s")
    server = VoxelPromptServer(config)
    try:
        server.start()
    except OSError as exc:
        print(f"cannot listen on {config.host}:{config.port}: {exc}", file=sys.stderr)
        return EXIT_IO
    gateway = None
    if config.gateway_port is not None:
        from .gateway import Gateway

        gateway = Gateway(server, config)
        gateway.start()
    stop = threading.Event()
    try:
        # handler instead of KeyboardInterrupt: a SIGINT racing the ready
        # line below must not escape the try block
        signal.signal(signal.SIGINT, lambda signum, frame: stop.set())
    except ValueError:
        pass  # not the main thread
    # flush so supervisors reading a pipe see readiness immediately
    print(f"listening on {config.host}:{server.port}", flush=True)
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass
    finally:
        if gateway is not None:
            gateway.stop()
        server.stop()
    return EXIT_OK


def cmd_segment(args) -> int:
    import numpy as np

    from .backend import ModelRegistry
    from .cache import EmbeddingCache
    from .nifti import NiftiError, load_volume, save_label_volume
    from .session import Box3D, DirectRoute, Session, SessionError

    try:
        volume = load_volume(args.input)
    except (OSError, NiftiError) as exc:
        print(f"cannot load {args.input}: {exc}", file=sys.stderr)
        return EXIT_IO
    if not 1 <= args.label < 65536:
        print("label must be in [1, 65535]", file=sys.stderr)
        return EXIT_USAGE
    i0, j0, k0, i1, j1, k1 = args.bbox
    try:
        box = Box3D(i0, j0, k0, i1, j1, k1, args.axis)
    except ValueError as exc:
        print(f"bad bbox: {exc}", file=sys.stderr)
        return EXIT_USAGE
    session = Session(volume, DirectRoute(ModelRegistry(), EmbeddingCache()))
    session.set_label(args.label)
    t0 = time.perf_counter()
    try:
        count = session.apply_bbox3d(box)
    except SessionError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_EMPTY_BOX
    elapsed = time.perf_counter() - t0
    try:
        save_label_volume(session.label_volume, volume, args.output)
    except OSError as exc:
        print(f"cannot write {args.output}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"{count} slices in {elapsed:.2f} s")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench
    from .client import ServerError

    if args.trials < 0:
        print("trials must be >= 0", file=sys.stderr)
        return EXIT_USAGE
    try:
        run_bench(args.input, trials=args.trials, model_id=args.model)
    except ServerError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_IO
    except (OSError, ConnectionError, TimeoutError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def cmd_info(args) -> int:
    from .nifti import NiftiError, load_volume
    from .volume import default_window_level

    try:
        v = load_volume(args.input)
    except (OSError, NiftiError) as exc:
        print(f"cannot load {args.input}: {exc}", file=sys.stderr)
        return EXIT_IO
    wl = default_window_level(v)
    nx, ny, nz = v.dims
    print(f"dims={nx}x{ny}x{nz}")
    print(f"spacing={v.spacing[0]:.6g},{v.spacing[1]:.6g},{v.spacing[2]:.6g}")
    for r in range(4):
        print("affine=" + ",".join(f"{v.affine[r, c]:.6g}" for c in range(4)))
    print(f"intensity_min={float(v.data.min()):.6g}")
    print(f"intensity_max={float(v.data.max()):.6g}")
    print(f"window={wl.window:.6g}")
    print(f"level={wl.level:.6g}")
    return EXIT_OK


def cmd_kernel_bench(args) -> int:
    from .bench import run_kernel_bench

    run_kernel_bench(repeats=args.repeats)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "serve": cmd_serve,
        "segment": cmd_segment,
        "bench": cmd_bench,
        "info": cmd_info,
        "kernel-bench": cmd_kernel_bench,
    }
    return handlers[args.cmd](args)


if __name__ == "__main__":
    sys.exit(main())
