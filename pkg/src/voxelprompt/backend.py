"""Model abstraction (encode slice -> embedding, decode prompts -> mask) and
the deterministic classical reference backend used when no learned model is
attached.

Reference backend contract, pinned so an independent implementation can
reproduce it bit for bit:

  encode: the window/level-normalized slice is quantized to 8 bits with
  q = rint(v * 255) computed in float64; the blob stores the quantized plane
  plus (rows+1) x (cols+1) u64 integral images of values and squared values.

  decode:
    1. R = bbox (inclusive bounds) if present, else the whole slice.
    2. If the 8-bit variance over R is < 1, decided exactly in integers
       (n * sum_sq - sum^2 < n^2): mask = all of R, score 0.5.
    3. Otsu threshold t in 1..255 over R's histogram, classes < t and >= t.
       Class statistics are exact integers; the objective for each t is
       float(A)^2 / float(w0 * (n - w0)) with A = n * s0 - S * w0, argmax
       breaking ties toward the smallest t.  The seed is the first positive
       point if any, else the bbox center ((r0+r1)//2, (c0+c1)//2); its
       pixel value picks the candidate side (>= t or < t) even if the seed
       lies outside R.
    4. Mask = union of the 4-connected components of the candidate side
       within R that contain the seed or any positive point.  Points outside
       R or on the other side contribute nothing.
    5. Each negative point inside the mask removes its whole component.
    6. score = (mean inside mask - mean of R outside mask) / 255 clamped to
       [0, 1]; the mean of an empty set is 0.0.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .volume import Slice2D

KIND_BUILTIN = "builtin"
KIND_EXTERNAL = "external-worker"

REFERENCE_MODEL_ID = "reference"


@dataclass(frozen=True)
class ModelDescriptor:
    model_id: str
    kind: str
    embedding_bytes_estimate: int

    def __post_init__(self):
        if not self.model_id:
            raise ValueError("model_id must be nonempty")
        if self.kind not in (KIND_BUILTIN, KIND_EXTERNAL):
            raise ValueError(f"unknown kind {self.kind!r}")


@dataclass(frozen=True)
class PromptSet:
    """Slice-local prompts: (row, col) points plus an optional inclusive bbox."""

    positive: Tuple[Tuple[int, int], ...] = ()
    negative: Tuple[Tuple[int, int], ...] = ()
    bbox: Optional[Tuple[int, int, int, int]] = None  # (row0, col0, row1, col1)

    def __post_init__(self):
        object.__setattr__(self, "positive", tuple((int(r), int(c)) for r, c in self.positive))
        object.__setattr__(self, "negative", tuple((int(r), int(c)) for r, c in self.negative))
        if self.bbox is not None:
            r0, c0, r1, c1 = (int(v) for v in self.bbox)
            if r0 > r1 or c0 > c1:
                raise ValueError("bbox bounds out of order")
            object.__setattr__(self, "bbox", (r0, c0, r1, c1))

    @property
    def has_inference_input(self) -> bool:
        return bool(self.positive) or self.bbox is not None

    def validate_for(self, rows: int, cols: int):
        for r, c in self.positive + self.negative:
            if not (0 <= r < rows and 0 <= c < cols):
                raise ValueError(f"point ({r},{c}) outside {rows}x{cols} slice")
        if self.bbox is not None:
            r0, c0, r1, c1 = self.bbox
            if not (0 <= r0 and r1 < rows and 0 <= c0 and c1 < cols):
                raise ValueError(f"bbox {self.bbox} outside {rows}x{cols} slice")


@dataclass
class Embedding:
    model_id: str
    rows: int
    cols: int
    blob: bytes


@dataclass
class MaskResult:
    bitmap: np.ndarray   # uint8 0/1, (rows, cols)
    score: float
    model_id: str

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score out of [0, 1]")


class EmptyPromptError(ValueError):
    pass


class ReferenceBackend:
    """Stateless; safe to call from any thread."""

    model_id = REFERENCE_MODEL_ID

    def descriptor(self) -> ModelDescriptor:
        # 17 bytes/pixel: 1 (quantized) + 8 + 8 (two u64 integrals), 256^2 slice
        return ModelDescriptor(self.model_id, KIND_BUILTIN, 17 * 256 * 256)

    def encode_slice(self, s: Slice2D) -> Embedding:
        q8 = np.rint(s.pixels.astype(np.float64) * 255.0).astype(np.uint8)
        vals = q8.astype(np.uint64)
        integral = np.zeros((s.rows + 1, s.cols + 1), dtype=np.uint64)
        integral[1:, 1:] = vals.cumsum(axis=0).cumsum(axis=1)
        integral_sq = np.zeros_like(integral)
        integral_sq[1:, 1:] = (vals * vals).cumsum(axis=0).cumsum(axis=1)
        blob = q8.tobytes() + integral.astype("<u8").tobytes() + integral_sq.astype("<u8").tobytes()
        return Embedding(self.model_id, s.rows, s.cols, blob)

    @staticmethod
    def unpack(e: Embedding):
        r, c = e.rows, e.cols
        npx = r * c
        nint = (r + 1) * (c + 1)
        q8 = np.frombuffer(e.blob, dtype=np.uint8, count=npx).reshape(r, c)
        integral = np.frombuffer(e.blob, dtype="<u8", count=nint, offset=npx).reshape(r + 1, c + 1)
        integral_sq = np.frombuffer(
            e.blob, dtype="<u8", count=nint, offset=npx + 8 * nint
        ).reshape(r + 1, c + 1)
        return q8, integral, integral_sq

    @staticmethod
    def _rect_sum(integral, r0, c0, r1, c1) -> int:
        # inclusive bounds; integral has the zero row/col at index 0
        return int(
            int(integral[r1 + 1, c1 + 1])
            - int(integral[r0, c1 + 1])
            - int(integral[r1 + 1, c0])
            + int(integral[r0, c0])
        )

    def decode_mask(self, e: Embedding, p: PromptSet) -> MaskResult:
        if not p.has_inference_input:
            raise EmptyPromptError("need at least one positive point or a bbox")
        p.validate_for(e.rows, e.cols)
        q8, integral, integral_sq = self.unpack(e)

        r0, c0, r1, c1 = p.bbox if p.bbox is not None else (0, 0, e.rows - 1, e.cols - 1)
        n = (r1 - r0 + 1) * (c1 - c0 + 1)
        s1 = self._rect_sum(integral, r0, c0, r1, c1)
        s2 = self._rect_sum(integral_sq, r0, c0, r1, c1)

        bitmap = np.zeros((e.rows, e.cols), dtype=np.uint8)
        if n * s2 - s1 * s1 < n * n:
            bitmap[r0 : r1 + 1, c0 : c1 + 1] = 1
            return MaskResult(bitmap, 0.5, self.model_id)

        region = q8[r0 : r1 + 1, c0 : c1 + 1]
        t = _otsu_threshold(np.bincount(region.ravel(), minlength=256).astype(np.int64))

        seed = p.positive[0] if p.positive else ((r0 + r1) // 2, (c0 + c1) // 2)
        side_high = int(q8[seed]) >= t
        fg = (region >= t) if side_high else (region < t)

        labels, _ = kernels.label_components(fg.astype(np.uint8))
        selected = set()
        for pr, pc in (seed,) + p.positive:
            if r0 <= pr <= r1 and c0 <= pc <= c1:
                lab = int(labels[pr - r0, pc - c0])
                if lab > 0:
                    selected.add(lab)
        for nr, nc in p.negative:
            if r0 <= nr <= r1 and c0 <= nc <= c1:
                selected.discard(int(labels[nr - r0, nc - c0]))

        mask = np.isin(labels, sorted(selected)) if selected else np.zeros_like(fg, dtype=bool)

        n_in = int(mask.sum())
        sum_in = int(region[mask].sum(dtype=np.int64))
        n_out = n - n_in
        sum_out = s1 - sum_in
        mean_in = sum_in / n_in if n_in else 0.0
        mean_out = sum_out / n_out if n_out else 0.0
        score = min(1.0, max(0.0, (mean_in - mean_out) / 255.0))

        bitmap[r0 : r1 + 1, c0 : c1 + 1] = mask
        return MaskResult(bitmap, score, self.model_id)


def _otsu_threshold(hist: np.ndarray) -> int:
    """Argmax of between-class variance over t in 1..255 (classes < t, >= t).

    A = n*s0 - S*w0 stays within int64 for any slice up to 2^16 x 2^16;
    the float64 objective expression is part of the contract (ties resolve
    to the smallest t because argmax takes the first maximum).
    """
    counts = np.cumsum(hist)
    sums = np.cumsum(hist * np.arange(256, dtype=np.int64))
    n = int(counts[-1])
    s = int(sums[-1])
    w0 = counts[:255]
    s0 = sums[:255]
    valid = (w0 > 0) & (w0 < n)
    a = n * s0 - s * w0
    denom = np.where(valid, (w0 * (n - w0)).astype(np.float64), 1.0)
    obj = np.where(valid, a.astype(np.float64) ** 2 / denom, -np.inf)
    if not valid.any():
        raise ValueError("histogram has a single bin; variance gate should have fired")
    return int(np.argmax(obj)) + 1


class ModelRegistry:
    """model_id -> (descriptor, handler).  Always holds the reference backend."""

    def __init__(self):
        self._lock = threading.Lock()
        self._models = {}
        ref = ReferenceBackend()
        self._models[ref.model_id] = (ref.descriptor(), ref)

    def register(self, desc: ModelDescriptor, handler) -> None:
        with self._lock:
            if desc.model_id in self._models:
                raise KeyError(f"model {desc.model_id!r} already registered")
            self._models[desc.model_id] = (desc, handler)

    def deregister(self, model_id: str) -> None:
        with self._lock:
            if model_id == REFERENCE_MODEL_ID:
                raise ValueError("the reference backend cannot be removed")
            self._models.pop(model_id, None)

    def get(self, model_id: str):
        with self._lock:
            if model_id not in self._models:
                raise KeyError(f"unknown model {model_id!r}")
            return self._models[model_id]

    def __contains__(self, model_id: str) -> bool:
        with self._lock:
            return model_id in self._models

    def list_models(self) -> list:
        with self._lock:
            return [desc for desc, _ in self._models.values()]
