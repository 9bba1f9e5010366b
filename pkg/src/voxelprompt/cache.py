"""In-memory embedding store (LRU by byte size) and the precompute planner."""

from __future__ import annotations

import hashlib
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Optional, Tuple

from .backend import Embedding
from .volume import SliceRef, WindowLevel


def wl_hash(wl: WindowLevel) -> int:
    """Deterministic across processes: window/level rounded to 1e-6, hashed."""
    packed = struct.pack("<qq", round(wl.window * 1e6), round(wl.level * 1e6))
    return int.from_bytes(hashlib.blake2b(packed, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class EmbeddingKey:
    volume_id: int
    model_id: str
    axis: int
    slice_index: int
    wl_hash: int


@dataclass
class CacheStats:
    entries: int
    total_bytes: int
    capacity_bytes: int
    per_axis: Tuple[int, int, int]


class EmbeddingCache:
    """Byte-capacity LRU.  A blob larger than the whole capacity is not
    stored at all (put is a no-op); total_bytes <= capacity_bytes always
    holds after put.  get/put/invalidate are individually atomic."""

    def __init__(self, capacity_bytes: int = 8 << 30):
        if capacity_bytes <= 0:
            raise ValueError("capacity must be positive")
        self.capacity_bytes = int(capacity_bytes)
        self._lock = threading.Lock()
        self._entries: "OrderedDict[EmbeddingKey, Embedding]" = OrderedDict()
        self._total = 0

    def put(self, key: EmbeddingKey, e: Embedding) -> None:
        size = len(e.blob)
        if size > self.capacity_bytes:
            return
        with self._lock:
            old = self._entries.pop(key, None)
            if old is not None:
                self._total -= len(old.blob)
            self._entries[key] = e
            self._total += size
            while self._total > self.capacity_bytes:
                _, evicted = self._entries.popitem(last=False)
                self._total -= len(evicted.blob)

    def get(self, key: EmbeddingKey) -> Optional[Embedding]:
        with self._lock:
            e = self._entries.get(key)
            if e is not None:
                self._entries.move_to_end(key)
            return e

    def __contains__(self, key: EmbeddingKey) -> bool:
        with self._lock:
            return key in self._entries

    def invalidate(self, volume_id: int, model_id: Optional[str] = None) -> int:
        with self._lock:
            doomed = [
                k
                for k in self._entries
                if k.volume_id == volume_id
                and (model_id is None or k.model_id == model_id)
            ]
            for k in doomed:
                self._total -= len(self._entries.pop(k).blob)
            return len(doomed)

    def stats(self) -> CacheStats:
        with self._lock:
            per_axis = [0, 0, 0]
            for k in self._entries:
                per_axis[k.axis] += 1
            return CacheStats(len(self._entries), self._total, self.capacity_bytes, tuple(per_axis))

    def status(self, volume_id: int, model_id: str, wlh: int, dims: tuple) -> Tuple[float, float, float]:
        """Per-axis fraction of slices cached for this (volume, model, wl)."""
        with self._lock:
            done = [0, 0, 0]
            for k in self._entries:
                if k.volume_id == volume_id and k.model_id == model_id and k.wl_hash == wlh:
                    done[k.axis] += 1
        return tuple(done[a] / dims[a] for a in range(3))


def precompute_plan(dims: tuple, current: SliceRef) -> List[SliceRef]:
    """Every (axis, index) exactly once: the current axis ordered by distance
    from the current index (ties toward the lower index), then the remaining
    axes in 0, 1, 2 order with ascending indices."""
    if not 0 <= current.index < dims[current.axis]:
        raise IndexError("current slice out of range")
    plan = [
        SliceRef(current.axis, i)
        for i in sorted(range(dims[current.axis]), key=lambda i: (abs(i - current.index), i))
    ]
    for axis in (0, 1, 2):
        if axis != current.axis:
            plan.extend(SliceRef(axis, i) for i in range(dims[axis]))
    return plan
