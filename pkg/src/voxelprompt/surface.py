"""Isosurface extraction from label volumes, plus binary STL export."""

from __future__ import annotations

import struct

import numpy as np
from scipy.ndimage import gaussian_filter
from skimage import measure

from .volume import LabelVolume, TriangleMesh, Volume

# The indicator field is smoothed before meshing, then nudged so that every
# voxel keeps its in/out classification and no sample sits exactly on the
# iso level.  Raw binary input puts saddle points exactly at 0.5, where the
# triangulation's tie-breaking produces edges shared by more than two faces;
# it also inflates the surface area of curved shapes well past acceptance.
_SIGMA = 0.9
_IN_FLOOR = 0.5 + 2e-3
_OUT_CEIL = 0.5 - 1e-3


def extract_surface(lv: LabelVolume, parent: Volume, label: int) -> TriangleMesh:
    """Mesh the boundary of ``labels == label`` at iso 0.5, in world mm.

    An absent label yields an empty mesh.  Labels not touching the volume
    boundary produce a watertight mesh (the volume is padded by one
    background voxel, so boundary-touching labels are capped too).
    """
    if label <= 0:
        raise ValueError("label must be > 0")
    indicator = (lv.labels == label)
    if not indicator.any():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32), label)

    padded = np.pad(indicator, 1).astype(np.float32)
    field = gaussian_filter(padded, sigma=_SIGMA, mode="constant", cval=0.0)
    inside = padded >= 0.5
    np.maximum(field, _IN_FLOOR, out=field, where=inside)
    np.minimum(field, _OUT_CEIL, out=field, where=~inside)

    verts, faces, _, _ = measure.marching_cubes(field, level=0.5)
    # verts are (z, y, x) in the padded grid; shift off the pad, reorder to
    # (x, y, z) voxel indices, then map through the parent affine.
    vox = verts[:, ::-1].astype(np.float64) - 1.0
    world = vox @ parent.affine[:3, :3].T + parent.affine[:3, 3]

    faces = faces.astype(np.int32)
    t = faces
    ok = (t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])
    return TriangleMesh(world, faces[ok], label)


def mesh_surface_area(mesh: TriangleMesh) -> float:
    v = mesh.vertices
    t = mesh.triangles
    if t.size == 0:
        return 0.0
    a = v[t[:, 1]] - v[t[:, 0]]
    b = v[t[:, 2]] - v[t[:, 0]]
    return float(0.5 * np.linalg.norm(np.cross(a, b), axis=1).sum())


def mesh_to_stl_bytes(mesh: TriangleMesh) -> bytes:
    """Binary STL: 80-byte header, u32 count, 50 bytes per triangle, LE."""
    v = mesh.vertices
    t = mesh.triangles
    n = len(t)
    rec = np.zeros(n, dtype=np.dtype([
        ("normal", "<f4", 3),
        ("v0", "<f4", 3),
        ("v1", "<f4", 3),
        ("v2", "<f4", 3),
        ("attr", "<u2"),
    ]))
    if n:
        p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
        nrm = np.cross(p1 - p0, p2 - p0)
        lens = np.linalg.norm(nrm, axis=1, keepdims=True)
        nz = lens[:, 0] > 1e-30
        nrm[nz] /= lens[nz]
        nrm[~nz] = 0.0
        rec["normal"] = nrm
        rec["v0"], rec["v1"], rec["v2"] = p0, p1, p2
    header = b"voxelprompt surface export".ljust(80, b"\x00")
    return header + struct.pack("<I", n) + rec.tobytes()


def save_stl(mesh: TriangleMesh, path):
    with open(path, "wb") as f:
        f.write(mesh_to_stl_bytes(mesh))
