"""Latency benchmark: full prompt-to-mask cycles against a live server, plus
a microbenchmark comparing the compiled kernels with the numpy fallbacks.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .backend import PromptSet
from .client import Client
from .config import ServerConfig
from .volume import slice_shape


@dataclass
class BenchReport:
    model_id: str
    dims: Tuple[int, int, int]
    slice_count: int
    trials: int
    embedding_total_s: float
    mask_cycle_mean_s: float
    mask_cycle_median_s: float
    mask_cycle_p99_s: float
    inference_mean_s: float
    inference_median_s: float
    inference_p99_s: float

    def lines(self) -> list:
        d = self.dims
        out = [
            f"model={self.model_id}",
            f"dims={d[0]}x{d[1]}x{d[2]}",
            f"slices={self.slice_count}",
            f"trials={self.trials}",
            f"embedding_total_s={self.embedding_total_s:.3f}",
        ]
        if self.trials > 0:
            out += [
                f"mask_cycle_mean_ms={self.mask_cycle_mean_s * 1e3:.3f}",
                f"mask_cycle_median_ms={self.mask_cycle_median_s * 1e3:.3f}",
                f"mask_cycle_p99_ms={self.mask_cycle_p99_s * 1e3:.3f}",
                f"inference_mean_ms={self.inference_mean_s * 1e3:.3f}",
                f"inference_median_ms={self.inference_median_s * 1e3:.3f}",
                f"inference_p99_ms={self.inference_p99_s * 1e3:.3f}",
                f"target_0.060s={'pass' if self.mask_cycle_mean_s <= 0.06 else 'fail'}",
            ]
        return out


def _p99(xs: Sequence[float]) -> float:
    return float(np.percentile(np.asarray(xs), 99))


def _random_prompts(rng: np.random.Generator, rows: int, cols: int) -> PromptSet:
    npos = int(rng.integers(1, 4))
    nneg = int(rng.integers(0, 3))
    pos = tuple((int(rng.integers(0, rows)), int(rng.integers(0, cols))) for _ in range(npos))
    neg = tuple((int(rng.integers(0, rows)), int(rng.integers(0, cols))) for _ in range(nneg))
    bbox = None
    if rng.random() < 0.5:
        r = sorted(int(v) for v in rng.integers(0, rows, size=2))
        c = sorted(int(v) for v in rng.integers(0, cols, size=2))
        bbox = (r[0], c[0], r[1], c[1])
    return PromptSet(pos, neg, bbox)


def run_bench(volume_path: str, trials: int = 500, warmup: int = 10,
              host: Optional[str] = None, port: int = 8942,
              model_id: str = "reference", seed: int = 0,
              out=print) -> BenchReport:
    """Connects to ``host`` or spawns an in-process server on an ephemeral port.

    Each trial is one randomized SET_PROMPTS round trip; warmup cycles are
    excluded from the statistics.
    """
    server = None
    if host is None:
        from .server import VoxelPromptServer

        server = VoxelPromptServer(ServerConfig(), port=0)
        host, port = "127.0.0.1", server.start()
    try:
        with Client(host, port) as cli:
            cli.hello()
            meta = cli.load_volume(volume_path)
            t0 = time.perf_counter()
            if model_id != "reference":
                cli.select_model(model_id)
            cli.wait_precomputed()
            embedding_total_s = time.perf_counter() - t0

            dims = meta.dims
            slice_count = dims[0] + dims[1] + dims[2]
            rng = np.random.default_rng(seed)
            cycles, inference = [], []
            for i in range(warmup + trials if trials > 0 else 0):
                axis = int(rng.integers(0, 3))
                index = int(rng.integers(0, dims[axis]))
                rows, cols = slice_shape(dims, axis)
                p = _random_prompts(rng, rows, cols)
                t1 = time.perf_counter()
                mr = cli.set_prompts(axis, index, 1, p)
                dt = time.perf_counter() - t1
                if i >= warmup:
                    cycles.append(dt)
                    inference.append(mr.decode_us * 1e-6)
            report = BenchReport(
                model_id=model_id,
                dims=dims,
                slice_count=slice_count,
                trials=trials,
                embedding_total_s=embedding_total_s,
                mask_cycle_mean_s=statistics.fmean(cycles) if cycles else 0.0,
                mask_cycle_median_s=statistics.median(cycles) if cycles else 0.0,
                mask_cycle_p99_s=_p99(cycles) if cycles else 0.0,
                inference_mean_s=statistics.fmean(inference) if inference else 0.0,
                inference_median_s=statistics.median(inference) if inference else 0.0,
                inference_p99_s=_p99(inference) if inference else 0.0,
            )
    finally:
        if server is not None:
            server.stop()
    for line in report.lines():
        out(line)
    return report


def _blob_mask(rng: np.random.Generator, shape: Tuple[int, int]) -> np.ndarray:
    """A few overlapping discs; structured enough to have long runs."""
    rows, cols = shape
    rr, cc = np.mgrid[0:rows, 0:cols]
    mask = np.zeros(shape, dtype=bool)
    for _ in range(int(rng.integers(2, 6))):
        r0 = rng.integers(0, rows)
        c0 = rng.integers(0, cols)
        rad = rng.integers(4, max(5, min(rows, cols) // 4))
        mask |= (rr - r0) ** 2 + (cc - c0) ** 2 <= rad**2
    return mask.astype(np.uint8)


def run_kernel_bench(repeats: int = 50, shape: Tuple[int, int] = (256, 256),
                     seed: int = 0, out=print) -> dict:
    """Times the labeling and RLE kernels on both dispatch paths."""
    from .kernels import _numpy as knp

    try:
        from .kernels import _numba as knb
    except ImportError:
        knb = None

    rng = np.random.default_rng(seed)
    masks = [_blob_mask(rng, shape) for _ in range(repeats)]
    noise = [(rng.random(shape) < 0.5).astype(np.uint8) for _ in range(repeats)]
    flats = [m.ravel() for m in masks + noise]

    def time_path(mod) -> Tuple[float, float]:
        # one untimed call per kernel absorbs jit compilation
        mod.label_components(masks[0])
        mod.rle_decode_flat(mod.rle_encode_flat(flats[0]), flats[0].size)
        t0 = time.perf_counter()
        for m in masks + noise:
            mod.label_components(m)
        t_label = time.perf_counter() - t0
        t0 = time.perf_counter()
        for f in flats:
            runs = mod.rle_encode_flat(f)
            mod.rle_decode_flat(runs, f.size)
        t_rle = time.perf_counter() - t0
        return t_label, t_rle

    results = {"shape": f"{shape[0]}x{shape[1]}", "repeats": repeats * 2}
    np_label, np_rle = time_path(knp)
    results["numpy_label_ms"] = np_label * 1e3
    results["numpy_rle_ms"] = np_rle * 1e3
    if knb is not None:
        nb_label, nb_rle = time_path(knb)
        results["numba_label_ms"] = nb_label * 1e3
        results["numba_rle_ms"] = nb_rle * 1e3
        results["label_speedup"] = np_label / nb_label if nb_label > 0 else float("inf")
        results["rle_speedup"] = np_rle / nb_rle if nb_rle > 0 else float("inf")
    for k, v in results.items():
        out(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}")
    return results
