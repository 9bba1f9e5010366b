"""NIfTI-1 file I/O (.nii / .nii.gz), the single ingestion and export format.

Only 3D single-component images are accepted.  Supported on-disk datatypes:
uint8, int16, uint16, float32, float64; everything is converted to float32
in memory.  The affine is taken from the sform when sform_code > 0, else the
qform, else a diagonal built from pixdim.
"""

from __future__ import annotations

import gzip
import io
import struct
from typing import Tuple

import numpy as np

from .volume import LabelVolume, Volume, fresh_volume_id

HDR_SIZE = 348
MAGIC = b"n+1\x00"

# (name, offset, struct format) for every field we read or write.
_FIELDS = [
    ("sizeof_hdr", 0, "i"),
    ("dim", 40, "8h"),
    ("datatype", 70, "h"),
    ("bitpix", 72, "h"),
    ("pixdim", 76, "8f"),
    ("vox_offset", 108, "f"),
    ("scl_slope", 112, "f"),
    ("scl_inter", 116, "f"),
    ("xyzt_units", 123, "B"),
    ("descrip", 148, "80s"),
    ("qform_code", 252, "h"),
    ("sform_code", 254, "h"),
    ("quatern_b", 256, "f"),
    ("quatern_c", 260, "f"),
    ("quatern_d", 264, "f"),
    ("qoffset_x", 268, "f"),
    ("qoffset_y", 272, "f"),
    ("qoffset_z", 276, "f"),
    ("srow_x", 280, "4f"),
    ("srow_y", 296, "4f"),
    ("srow_z", 312, "4f"),
    ("magic", 344, "4s"),
]

_DTYPES = {2: "u1", 4: "i2", 16: "f4", 64: "f8", 512: "u2"}
_CODES = {"uint8": 2, "int16": 4, "float32": 16, "float64": 64, "uint16": 512}
_BITPIX = {2: 8, 4: 16, 16: 32, 64: 64, 512: 16}


class NiftiError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(f) as g:
                return g.read()
        return f.read()


def _parse_header(raw: bytes) -> Tuple[dict, str]:
    if len(raw) < HDR_SIZE:
        raise NiftiError("file shorter than a NIfTI-1 header")
    for bo in ("<", ">"):
        (size,) = struct.unpack_from(bo + "i", raw, 0)
        if size == HDR_SIZE:
            break
    else:
        raise NiftiError("sizeof_hdr is not 348 in either byte order")
    hdr = {}
    for name, off, fmt in _FIELDS:
        vals = struct.unpack_from(bo + fmt, raw, off)
        hdr[name] = vals[0] if len(vals) == 1 else vals
    return hdr, bo


def _affine_from_header(hdr, spacing) -> np.ndarray:
    if hdr["sform_code"] > 0:
        aff = np.eye(4, dtype=np.float64)
        aff[0, :] = hdr["srow_x"]
        aff[1, :] = hdr["srow_y"]
        aff[2, :] = hdr["srow_z"]
        return aff
    if hdr["qform_code"] > 0:
        b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
        a = float(np.sqrt(max(0.0, 1.0 - b * b - c * c - d * d)))
        qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
        r = np.array(
            [
                [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
                [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
                [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
            ],
            dtype=np.float64,
        )
        aff = np.eye(4, dtype=np.float64)
        aff[:3, 0] = r[:, 0] * spacing[0]
        aff[:3, 1] = r[:, 1] * spacing[1]
        aff[:3, 2] = r[:, 2] * spacing[2] * qfac
        aff[:3, 3] = (hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"])
        return aff
    return np.diag([spacing[0], spacing[1], spacing[2], 1.0])


def load_volume(path) -> Volume:
    raw = _read_bytes(path)
    hdr, bo = _parse_header(raw)
    if hdr["magic"] != MAGIC:
        raise NiftiError(f"bad magic {hdr['magic']!r}, expected {MAGIC!r}")
    dim = hdr["dim"]
    if dim[0] != 3:
        raise NiftiError(f"expected 3 dimensions, header says {dim[0]}")
    nx, ny, nz = int(dim[1]), int(dim[2]), int(dim[3])
    if min(nx, ny, nz) < 1:
        raise NiftiError("non-positive dimension")
    if hdr["datatype"] not in _DTYPES:
        raise NiftiError(f"unsupported datatype code {hdr['datatype']}")
    dt = np.dtype(bo + _DTYPES[hdr["datatype"]])

    offset = int(round(hdr["vox_offset"]))
    if offset < HDR_SIZE:
        raise NiftiError("vox_offset points inside the header")
    count = nx * ny * nz
    if len(raw) < offset + count * dt.itemsize:
        raise NiftiError("file truncated before end of voxel data")
    arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
    # NIfTI stores x-fastest, so a C reshape to (nz, ny, nx) gives arr[z, y, x].
    arr = arr.reshape(nz, ny, nx)

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope not in (0.0, 1.0) or inter != 0.0:
        if slope == 0.0:
            slope = 1.0
        data = (arr.astype(np.float64) * slope + inter).astype(np.float32)
    else:
        data = arr.astype(np.float32)

    pixdim = [float(p) if p > 0 else 1.0 for p in hdr["pixdim"][1:4]]
    affine = _affine_from_header(hdr, pixdim)
    spacing = tuple(np.linalg.norm(affine[:3, :3], axis=0))
    return Volume(fresh_volume_id(), (nx, ny, nz), spacing, affine, np.ascontiguousarray(data))


def _build_header(dims, spacing, affine, datatype_code) -> bytes:
    buf = bytearray(HDR_SIZE)
    values = {
        "sizeof_hdr": HDR_SIZE,
        "dim": (3, dims[0], dims[1], dims[2], 1, 1, 1, 1),
        "datatype": datatype_code,
        "bitpix": _BITPIX[datatype_code],
        "pixdim": (1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0),
        "vox_offset": 352.0,
        "scl_slope": 1.0,
        "scl_inter": 0.0,
        "xyzt_units": 10,  # mm | sec
        "descrip": b"voxelprompt",
        "qform_code": 0,
        "sform_code": 1,
        "quatern_b": 0.0,
        "quatern_c": 0.0,
        "quatern_d": 0.0,
        "qoffset_x": float(affine[0, 3]),
        "qoffset_y": float(affine[1, 3]),
        "qoffset_z": float(affine[2, 3]),
        "srow_x": tuple(float(v) for v in affine[0]),
        "srow_y": tuple(float(v) for v in affine[1]),
        "srow_z": tuple(float(v) for v in affine[2]),
        "magic": MAGIC,
    }
    for name, off, fmt in _FIELDS:
        v = values[name]
        if isinstance(v, tuple):
            struct.pack_into("<" + fmt, buf, off, *v)
        else:
            struct.pack_into("<" + fmt, buf, off, v)
    return bytes(buf)


def _write_nifti(path, arr_zyx: np.ndarray, affine, spacing, datatype_code):
    dims = (arr_zyx.shape[2], arr_zyx.shape[1], arr_zyx.shape[0])
    header = _build_header(dims, spacing, affine, datatype_code)
    dt = np.dtype("<" + _DTYPES[datatype_code])
    body = header + b"\x00\x00\x00\x00" + np.ascontiguousarray(arr_zyx, dtype=dt).tobytes()
    path = str(path)
    if path.endswith(".gz"):
        with open(path, "wb") as f:
            # mtime=0 keeps output byte-identical across runs
            with gzip.GzipFile(filename="", mode="wb", fileobj=f, mtime=0) as g:
                g.write(body)
    else:
        with open(path, "wb") as f:
            f.write(body)


def save_volume(v: Volume, path):
    """Write voxels as float32 with the volume's affine in the sform."""
    _write_nifti(path, v.data, v.affine, v.spacing, _CODES["float32"])


def save_label_volume(lv: LabelVolume, parent: Volume, path):
    """Write labels as uint16; round-trips exactly through load_volume."""
    if tuple(lv.dims) != tuple(parent.dims):
        raise ValueError(f"label dims {lv.dims} != parent dims {parent.dims}")
    _write_nifti(path, lv.labels, parent.affine, parent.spacing, _CODES["uint16"])
