"""Volume data model: orthogonal slices, window/level, coordinate transforms.

Voxels are stored x-fastest: ``Volume.data`` has shape (nz, ny, nx) in C
order, so ``data[z, y, x]`` is the voxel at index (x, y, z).  Axis numbering
follows the anatomical views of an RAS-world volume: 0 = sagittal (fixed x
index), 1 = coronal (fixed y), 2 = axial (fixed z).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

AXIS_SAGITTAL = 0
AXIS_CORONAL = 1
AXIS_AXIAL = 2

_volume_ids = itertools.count(1)


def fresh_volume_id() -> int:
    """Process-local monotonic id; uniqueness across restarts is not promised."""
    return next(_volume_ids)


@dataclass
class Volume:
    """A 3D scalar image with spacing and a voxel-index -> world-mm affine."""

    volume_id: int
    dims: tuple          # (nx, ny, nz)
    spacing: tuple       # (sx, sy, sz) mm/voxel, all > 0
    affine: np.ndarray   # 4x4, voxel index -> world RAS mm
    data: np.ndarray     # float32, shape (nz, ny, nx)
    _inv_affine: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        nx, ny, nz = (int(d) for d in self.dims)
        self.dims = (nx, ny, nz)
        if min(self.dims) < 1:
            raise ValueError("dims must all be >= 1")
        if self.data.dtype != np.float32:
            raise ValueError("voxels must be float32")
        if self.data.shape != (nz, ny, nx):
            raise ValueError(f"data shape {self.data.shape} != {(nz, ny, nx)}")
        self.affine = np.array(self.affine, dtype=np.float64)
        if self.affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if abs(np.linalg.det(self.affine[:3, :3])) <= 1e-12:
            raise ValueError("affine upper-left 3x3 is singular")
        self.spacing = tuple(float(s) for s in self.spacing)
        norms = np.linalg.norm(self.affine[:3, :3], axis=0)
        for s, n in zip(self.spacing, norms):
            if s <= 0:
                raise ValueError("spacing must be positive")
            if abs(s - n) > 1e-4 * max(abs(s), abs(n)):
                raise ValueError(f"spacing {s} disagrees with affine column norm {n}")

    def voxel(self, x: int, y: int, z: int) -> float:
        return float(self.data[z, y, x])

    @property
    def inv_affine(self) -> np.ndarray:
        if self._inv_affine is None:
            self._inv_affine = np.linalg.inv(self.affine)
        return self._inv_affine


@dataclass(frozen=True)
class WindowLevel:
    """Linear display mapping: window = visible intensity width, level = its center."""

    window: float
    level: float

    def __post_init__(self):
        if not self.window > 0:
            raise ValueError("window must be > 0")


@dataclass(frozen=True)
class SliceRef:
    axis: int   # 0 | 1 | 2
    index: int

    def __post_init__(self):
        if self.axis not in (0, 1, 2):
            raise ValueError("axis must be 0, 1 or 2")
        if self.index < 0:
            raise ValueError("index must be >= 0")


@dataclass
class Slice2D:
    rows: int
    cols: int
    pixels: np.ndarray   # float32, shape (rows, cols), row-major
    origin: SliceRef

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("slice must be non-empty")
        if self.pixels.shape != (self.rows, self.cols):
            raise ValueError("pixel buffer does not match rows x cols")


# A NormalizedSlice is a Slice2D whose pixels lie in [0, 1].
NormalizedSlice = Slice2D


@dataclass
class LabelVolume:
    """Per-voxel uint16 labels accumulated over a parent Volume (0 = background)."""

    parent_id: int
    dims: tuple               # matches parent (nx, ny, nz)
    labels: np.ndarray        # uint16, shape (nz, ny, nx)

    def __post_init__(self):
        nx, ny, nz = self.dims
        if self.labels.dtype != np.uint16:
            raise ValueError("labels must be uint16")
        if self.labels.shape != (nz, ny, nx):
            raise ValueError("label buffer does not match dims")

    @classmethod
    def empty_like(cls, v: Volume) -> "LabelVolume":
        nx, ny, nz = v.dims
        return cls(v.volume_id, v.dims, np.zeros((nz, ny, nx), dtype=np.uint16))

    def slice_view(self, s: SliceRef) -> np.ndarray:
        """Writable 2D view with the same (rows, cols) layout as extract_slice."""
        _check_index(self.dims, s)
        if s.axis == 2:
            return self.labels[s.index]
        if s.axis == 1:
            return self.labels[:, s.index, :]
        return self.labels[:, :, s.index]


@dataclass
class TriangleMesh:
    vertices: np.ndarray    # float64, (n, 3), world mm
    triangles: np.ndarray   # int32, (m, 3)
    label: int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if self.triangles.size:
            if self.triangles.max() >= len(self.vertices):
                raise ValueError("triangle index out of range")
            t = self.triangles
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise ValueError("degenerate triangle")


def slice_shape(dims: tuple, axis: int) -> tuple:
    """(rows, cols) of a slice: axis 2 -> (ny, nx), 1 -> (nz, nx), 0 -> (nz, ny)."""
    nx, ny, nz = dims
    if axis == 2:
        return (ny, nx)
    if axis == 1:
        return (nz, nx)
    if axis == 0:
        return (nz, ny)
    raise ValueError("axis must be 0, 1 or 2")


def _check_index(dims, s: SliceRef):
    if not 0 <= s.index < dims[s.axis]:
        raise IndexError(f"slice index {s.index} out of range for axis {s.axis}")


def extract_slice(v: Volume, s: SliceRef) -> Slice2D:
    """Pure index-space extraction, no interpolation.

    axis 2 at k: pixels[r][c] = voxel(c, r, k)
    axis 1 at j: pixels[r][c] = voxel(c, j, r)
    axis 0 at i: pixels[r][c] = voxel(i, c, r)
    """
    _check_index(v.dims, s)
    if s.axis == 2:
        view = v.data[s.index]
    elif s.axis == 1:
        view = v.data[:, s.index, :]
    else:
        view = v.data[:, :, s.index]
    pixels = np.ascontiguousarray(view, dtype=np.float32).copy()
    return Slice2D(pixels.shape[0], pixels.shape[1], pixels, s)


def apply_window_level(s: Slice2D, wl: WindowLevel) -> NormalizedSlice:
    """out = clamp((in - (level - window/2)) / window, 0, 1), computed in float64."""
    lo = wl.level - wl.window / 2.0
    norm = np.clip((s.pixels.astype(np.float64) - lo) / wl.window, 0.0, 1.0)
    return Slice2D(s.rows, s.cols, norm.astype(np.float32), s.origin)


def default_window_level(v: Volume) -> WindowLevel:
    """Full intensity range; a degenerate (constant) volume gets window 1.0."""
    vmin = float(v.data.min())
    vmax = float(v.data.max())
    window = vmax - vmin
    if window <= 0:
        window = 1.0
    return WindowLevel(window=window, level=(vmin + vmax) / 2.0)


def voxel_to_world(v: Volume, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    h = np.append(p, 1.0)
    return (v.affine @ h)[:3]


def world_to_voxel(v: Volume, w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    h = np.append(w, 1.0)
    return (v.inv_affine @ h)[:3]
