"""Interactive segmentation sessions: prompt state per axis, synchronized
inference, propagation along an axis, 3D-box automation, and undo.

Label write rule (shared by every committing operation): within the target
region the active label's previous pixels are cleared first, then the new
mask is written only where the region is still background.  Other labels are
never modified.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from .backend import MaskResult, ModelRegistry, PromptSet, REFERENCE_MODEL_ID
from .cache import EmbeddingCache, EmbeddingKey, wl_hash
from .volume import (
    LabelVolume,
    SliceRef,
    Volume,
    WindowLevel,
    apply_window_level,
    default_window_level,
    extract_slice,
    slice_shape,
)

_session_ids = itertools.count(1)


class SessionError(Exception):
    pass


@dataclass(frozen=True)
class Box3D:
    """Inclusive voxel-index bounds plus the axis the 2D sweep runs along."""

    i0: int
    j0: int
    k0: int
    i1: int
    j1: int
    k1: int
    propagation_axis: int

    def __post_init__(self):
        if self.propagation_axis not in (0, 1, 2):
            raise ValueError("propagation_axis must be 0, 1 or 2")
        if self.i0 > self.i1 or self.j0 > self.j1 or self.k0 > self.k1:
            raise ValueError("box bounds out of order")

    def clamped(self, dims: tuple) -> Optional["Box3D"]:
        nx, ny, nz = dims
        i0, i1 = max(self.i0, 0), min(self.i1, nx - 1)
        j0, j1 = max(self.j0, 0), min(self.j1, ny - 1)
        k0, k1 = max(self.k0, 0), min(self.k1, nz - 1)
        if i0 > i1 or j0 > j1 or k0 > k1:
            return None
        return Box3D(i0, j0, k0, i1, j1, k1, self.propagation_axis)

    def slice_range(self) -> range:
        lo, hi = {
            0: (self.i0, self.i1),
            1: (self.j0, self.j1),
            2: (self.k0, self.k1),
        }[self.propagation_axis]
        return range(lo, hi + 1)

    def in_plane_rect(self) -> Tuple[int, int, int, int]:
        """The box's projection onto a slice of the propagation axis, as an
        inclusive (row0, col0, row1, col1) in that slice's layout."""
        if self.propagation_axis == 2:
            return (self.j0, self.i0, self.j1, self.i1)
        if self.propagation_axis == 1:
            return (self.k0, self.i0, self.k1, self.i1)
        return (self.k0, self.j0, self.k1, self.j1)


class DirectRoute:
    """Embedding + decode against in-process builtin backends, cache-backed."""

    def __init__(self, registry: ModelRegistry, cache: EmbeddingCache):
        self.registry = registry
        self.cache = cache

    def embedding(self, volume: Volume, model_id: str, sref: SliceRef, wl: WindowLevel):
        key = EmbeddingKey(volume.volume_id, model_id, sref.axis, sref.index, wl_hash(wl))
        e = self.cache.get(key)
        if e is None:
            _, backend = self.registry.get(model_id)
            norm = apply_window_level(extract_slice(volume, sref), wl)
            e = backend.encode_slice(norm)
            self.cache.put(key, e)
        return e

    def decode(self, model_id: str, e, p: PromptSet, volume=None, sref=None,
               wl=None) -> MaskResult:
        _, backend = self.registry.get(model_id)
        return backend.decode_mask(e, p)


class Session:
    """Single-writer interactive state bound to one volume and label volume."""

    def __init__(self, volume: Volume, route, label_volume: Optional[LabelVolume] = None,
                 wl: Optional[WindowLevel] = None):
        self.session_id = next(_session_ids)
        self.volume = volume
        self.route = route
        self.label_volume = label_volume or LabelVolume.empty_like(volume)
        if tuple(self.label_volume.dims) != tuple(volume.dims):
            raise ValueError("label volume dims do not match")
        self.model_id = REFERENCE_MODEL_ID
        self.label = 1
        self.wl = wl or default_window_level(volume)
        nx, ny, nz = volume.dims
        self._cursor = {0: nx // 2, 1: ny // 2, 2: nz // 2}
        self.current = SliceRef(2, self._cursor[2])
        self.prompts = {0: PromptSet(), 1: PromptSet(), 2: PromptSet()}
        self._undo: List[Tuple[SliceRef, List[Tuple[SliceRef, np.ndarray]]]] = []
        self._last_box: Optional[Box3D] = None
        self.last_decode_us = 0

    # -- helpers -----------------------------------------------------------

    def set_label(self, label: int):
        if not 1 <= label < 65536:
            raise SessionError("label must be in [1, 65535]")
        self.label = int(label)

    def set_window_level(self, wl: WindowLevel):
        # embeddings are keyed by window/level, so nothing needs invalidating
        self.wl = wl

    def select_model(self, model_id: str):
        self.model_id = model_id

    def _move(self, sref: SliceRef):
        if not 0 <= sref.index < self.volume.dims[sref.axis]:
            raise SessionError(f"slice index {sref.index} out of range for axis {sref.axis}")
        self.current = sref
        self._cursor[sref.axis] = sref.index

    def _push_undo(self, srefs: List[SliceRef], restore_to: SliceRef):
        snap = [(s, self.label_volume.slice_view(s).copy()) for s in srefs]
        self._undo.append((restore_to, snap))

    def _zero_result(self, axis: int) -> MaskResult:
        rows, cols = slice_shape(self.volume.dims, axis)
        return MaskResult(np.zeros((rows, cols), dtype=np.uint8), 0.0, self.model_id)

    def _infer(self, sref: SliceRef, p: PromptSet) -> MaskResult:
        e = self.route.embedding(self.volume, self.model_id, sref, self.wl)
        t0 = time.perf_counter_ns()
        mr = self.route.decode(self.model_id, e, p, volume=self.volume, sref=sref,
                               wl=self.wl)
        self.last_decode_us = (time.perf_counter_ns() - t0) // 1000
        return mr

    def _commit(self, sref: SliceRef, bitmap: np.ndarray,
                rect: Optional[Tuple[int, int, int, int]] = None):
        view = self.label_volume.slice_view(sref)
        if rect is None:
            region, bits = view, bitmap
        else:
            r0, c0, r1, c1 = rect
            region = view[r0 : r1 + 1, c0 : c1 + 1]
            bits = bitmap[r0 : r1 + 1, c0 : c1 + 1]
        region[region == self.label] = 0
        region[(bits != 0) & (region == 0)] = self.label

    # -- operations --------------------------------------------------------

    def set_prompts(self, axis: int, p: PromptSet, index: Optional[int] = None) -> MaskResult:
        """Replace this axis's prompts, infer on the (possibly moved-to) slice,
        and commit the mask.  An empty PromptSet clears the active label on the
        slice instead and returns an all-zero result."""
        sref = SliceRef(axis, self._cursor[axis] if index is None else index)
        self._move(sref)
        rows, cols = slice_shape(self.volume.dims, axis)
        p.validate_for(rows, cols)
        self.prompts[axis] = p
        if not p.has_inference_input:
            self._push_undo([sref], sref)
            view = self.label_volume.slice_view(sref)
            view[view == self.label] = 0
            return self._zero_result(axis)
        mr = self._infer(sref, p)
        self._push_undo([sref], sref)
        self._commit(sref, mr.bitmap)
        return mr

    def propagate_to(self, target: SliceRef) -> MaskResult:
        """Re-run the current axis's prompts, unchanged, on another slice."""
        if target.axis != self.current.axis:
            raise SessionError("propagation stays on one axis; set prompts on the new axis first")
        p = self.prompts[target.axis]
        if not p.has_inference_input:
            raise SessionError("no prompts to propagate")
        self._move(target)
        mr = self._infer(target, p)
        self._push_undo([target], target)
        self._commit(target, mr.bitmap)
        return mr

    def apply_bbox3d(self, box: Box3D,
                     on_slice: Optional[Callable[[SliceRef, MaskResult], None]] = None) -> int:
        """Sweep the box's in-plane projection as a bbox prompt along its
        propagation axis, ascending.  Voxels outside the box are untouched.
        Pushes a single composite undo entry.  Returns slices written."""
        clamped = box.clamped(self.volume.dims)
        if clamped is None:
            raise SessionError("box does not intersect the volume")
        srefs = [SliceRef(clamped.propagation_axis, i) for i in clamped.slice_range()]
        self._push_undo(srefs, srefs[0])
        count = self._sweep(clamped, on_slice)
        self._last_box = clamped
        return count

    def adjust_bbox3d(self, box: Box3D,
                      on_slice: Optional[Callable[[SliceRef, MaskResult], None]] = None) -> int:
        """Clear the previous box's region of the active label, then apply the
        new box; requires a previous apply_bbox3d in this session."""
        if self._last_box is None:
            raise SessionError("no previous 3D box to adjust")
        prev = self._last_box
        clamped = box.clamped(self.volume.dims)
        if clamped is None:
            raise SessionError("box does not intersect the volume")

        prev_refs = [SliceRef(prev.propagation_axis, i) for i in prev.slice_range()]
        new_refs = [SliceRef(clamped.propagation_axis, i) for i in clamped.slice_range()]
        seen, all_refs = set(), []
        for s in prev_refs + new_refs:
            if s not in seen:
                seen.add(s)
                all_refs.append(s)
        self._push_undo(all_refs, new_refs[0])

        lab = self.label_volume.labels
        region = lab[prev.k0 : prev.k1 + 1, prev.j0 : prev.j1 + 1, prev.i0 : prev.i1 + 1]
        region[region == self.label] = 0

        count = self._sweep(clamped, on_slice)
        self._last_box = clamped
        return count

    def _sweep(self, box: Box3D, on_slice) -> int:
        rect = box.in_plane_rect()
        count = 0
        for i in box.slice_range():
            sref = SliceRef(box.propagation_axis, i)
            mr = self._infer(sref, PromptSet(bbox=rect))
            self._commit(sref, mr.bitmap, rect=rect)
            count += 1
            if on_slice is not None:
                on_slice(sref, mr)
        return count

    def undo(self) -> SliceRef:
        """Revert the most recent committing operation exactly."""
        if not self._undo:
            raise SessionError("undo stack is empty")
        restore_to, snap = self._undo.pop()
        for sref, arr in snap:
            self.label_volume.slice_view(sref)[:, :] = arr
        return restore_to

    @property
    def undo_depth(self) -> int:
        return len(self._undo)
