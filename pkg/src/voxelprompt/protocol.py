"""Binary wire protocol: frame envelope, message payloads, RLE mask codec.

Everything on the wire is little-endian.  A frame is a 12-byte header
(magic "SMME", version u8, msg_type u8, flags u16, payload_len u32)
followed by payload_len bytes, capped at 64 MiB.  Strings are u16 length +
UTF-8 bytes.  protocol.md in the repository root documents every payload
field by field; the pack_*/parse_* pairs here are that document in code.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import List, Optional, Tuple

import numpy as np

from . import kernels
from .backend import PromptSet

MAGIC = b"SMME"
VERSION = 1
HEADER = struct.Struct("<4sBBHI")
MAX_PAYLOAD = 64 * 1024 * 1024

FLAG_EVENT = 0x0001   # unsolicited server->client event
FLAG_MORE = 0x0002    # more frames of this response follow


class MsgType(IntEnum):
    HELLO = 0x01
    LOAD_VOLUME = 0x02
    VOLUME_META = 0x03
    SET_WINDOW_LEVEL = 0x04
    SELECT_MODEL = 0x05
    LIST_MODELS = 0x06
    SET_PROMPTS = 0x07
    PROPAGATE_TO = 0x08
    APPLY_BBOX3D = 0x09
    MASK_RESULT = 0x0A
    PRECOMPUTE_STATUS = 0x0B
    UNDO = 0x0C
    EXPORT_LABELS = 0x0D
    ERROR = 0x0E
    REGISTER_WORKER = 0x10
    ENCODE_REQUEST = 0x11
    ENCODE_RESULT = 0x12
    DECODE_REQUEST = 0x13
    DECODE_RESULT = 0x14


# error codes carried by ERROR frames
ERR_UNSUPPORTED = 1
ERR_BAD_PAYLOAD = 2
ERR_UNKNOWN_VOLUME = 3
ERR_UNKNOWN_MODEL = 4
ERR_EMPTY_UNDO = 5
ERR_DUPLICATE_WORKER = 6
ERR_WORKER_LOST = 7


class ProtocolError(Exception):
    """Unrecoverable framing violation; the connection must close."""


class PayloadError(Exception):
    """Malformed payload for an otherwise valid frame (ERROR code 2)."""


class IncompleteFrame(Exception):
    """Not an error: the buffer ends mid-frame, feed more bytes."""


@dataclass
class Frame:
    msg_type: int
    flags: int
    payload: bytes

    @property
    def is_event(self) -> bool:
        return bool(self.flags & FLAG_EVENT)

    @property
    def has_more(self) -> bool:
        return bool(self.flags & FLAG_MORE)


def encode_frame(msg_type: int, payload: bytes = b"", flags: int = 0) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds the 64 MiB cap")
    return HEADER.pack(MAGIC, VERSION, int(msg_type), flags, len(payload)) + payload


def decode_frame(buf: bytes, offset: int = 0) -> Tuple[Frame, int]:
    """Parse one frame at ``offset``; returns (frame, bytes consumed).

    Raises IncompleteFrame when the buffer ends mid-frame and ProtocolError
    on a malformed header.  Garbage bytes are never silently skipped.
    """
    if len(buf) - offset < HEADER.size:
        raise IncompleteFrame()
    magic, version, msg_type, flags, plen = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if plen > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {plen} exceeds the 64 MiB cap")
    if len(buf) - offset < HEADER.size + plen:
        raise IncompleteFrame()
    start = offset + HEADER.size
    return Frame(msg_type, flags, bytes(buf[start : start + plen])), HEADER.size + plen


class StreamDecoder:
    """Incremental frame parser over an arbitrary byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> List[Frame]:
        self._buf.extend(data)
        out = []
        pos = 0
        while True:
            try:
                frame, used = decode_frame(self._buf, pos)
            except IncompleteFrame:
                break
            out.append(frame)
            pos += used
        if pos:
            del self._buf[:pos]
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


# -- primitive readers/writers ----------------------------------------------


class Cursor:
    """Sequential reader; every primitive raises PayloadError on truncation."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise PayloadError("payload truncated")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def u8(self) -> int:
        return self._unpack("<B")[0]

    def u16(self) -> int:
        return self._unpack("<H")[0]

    def u32(self) -> int:
        return self._unpack("<I")[0]

    def u64(self) -> int:
        return self._unpack("<Q")[0]

    def f32(self) -> float:
        return self._unpack("<f")[0]

    def f64(self) -> float:
        return self._unpack("<d")[0]

    def string(self) -> str:
        n = self.u16()
        if self.pos + n > len(self.data):
            raise PayloadError("string truncated")
        s = self.data[self.pos : self.pos + n]
        self.pos += n
        try:
            out = s.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PayloadError(f"invalid UTF-8 string: {exc}") from exc
        return out

    def raw(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise PayloadError("byte field truncated")
        s = self.data[self.pos : self.pos + n]
        self.pos += n
        return bytes(s)

    def done(self):
        if self.pos != len(self.data):
            raise PayloadError(f"{len(self.data) - self.pos} trailing bytes in payload")


def pack_string(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise PayloadError("string longer than 65535 bytes")
    return struct.pack("<H", len(b)) + b


# -- RLE mask codec ----------------------------------------------------------


@dataclass
class RleMask:
    rows: int
    cols: int
    runs: np.ndarray  # uint32, alternating 0-run / 1-run, leading 0-run

    def __post_init__(self):
        self.runs = np.asarray(self.runs, dtype=np.uint32)


def rle_encode(bitmap: np.ndarray) -> RleMask:
    rows, cols = bitmap.shape
    flat = np.ascontiguousarray(bitmap, dtype=np.uint8).ravel()
    return RleMask(rows, cols, kernels.rle_encode_flat(flat))


def rle_decode(m: RleMask) -> np.ndarray:
    total = int(m.runs.astype(np.int64).sum())
    if total != m.rows * m.cols:
        raise PayloadError(f"run sum {total} != {m.rows}x{m.cols}")
    if len(m.runs) > 1 and (m.runs[1:] == 0).any():
        raise PayloadError("zero-length run after the first")
    return kernels.rle_decode_flat(m.runs, m.rows * m.cols).reshape(m.rows, m.cols)


def _pack_rle(m: RleMask) -> bytes:
    return (
        struct.pack("<III", m.rows, m.cols, len(m.runs))
        + m.runs.astype("<u4").tobytes()
    )


def _read_rle(c: Cursor) -> RleMask:
    rows, cols, count = c.u32(), c.u32(), c.u32()
    raw = c.raw(4 * count)
    return RleMask(rows, cols, np.frombuffer(raw, dtype="<u4"))


# -- prompt set codec --------------------------------------------------------


def _pack_prompts(p: PromptSet) -> bytes:
    out = bytearray(struct.pack("<HHB", len(p.positive), len(p.negative), 1 if p.bbox else 0))
    for r, c in p.positive:
        out += struct.pack("<II", r, c)
    for r, c in p.negative:
        out += struct.pack("<II", r, c)
    if p.bbox is not None:
        out += struct.pack("<IIII", *p.bbox)
    return bytes(out)


def _read_prompts(c: Cursor) -> PromptSet:
    npos, nneg, has_bbox = c.u16(), c.u16(), c.u8()
    if has_bbox not in (0, 1):
        raise PayloadError("bbox flag must be 0 or 1")
    pos = tuple((c.u32(), c.u32()) for _ in range(npos))
    neg = tuple((c.u32(), c.u32()) for _ in range(nneg))
    bbox = (c.u32(), c.u32(), c.u32(), c.u32()) if has_bbox else None
    try:
        return PromptSet(pos, neg, bbox)
    except ValueError as exc:
        raise PayloadError(str(exc)) from exc


# -- message payloads --------------------------------------------------------


@dataclass
class HelloReply:
    software: str
    semver: str

    def pack(self) -> bytes:
        return pack_string(self.software) + pack_string(self.semver)

    @classmethod
    def parse(cls, payload: bytes) -> "HelloReply":
        c = Cursor(payload)
        out = cls(c.string(), c.string())
        c.done()
        return out


def pack_load_volume(path: str) -> bytes:
    return pack_string(path)


def parse_load_volume(payload: bytes) -> str:
    c = Cursor(payload)
    path = c.string()
    c.done()
    return path


@dataclass
class VolumeMeta:
    volume_id: int
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    affine: np.ndarray
    vmin: float
    vmax: float

    def pack(self) -> bytes:
        return struct.pack(
            "<QIII3d16d2d",
            self.volume_id,
            *self.dims,
            *self.spacing,
            *np.asarray(self.affine, dtype=np.float64).ravel(),
            self.vmin,
            self.vmax,
        )

    @classmethod
    def parse(cls, payload: bytes) -> "VolumeMeta":
        c = Cursor(payload)
        vid = c.u64()
        dims = (c.u32(), c.u32(), c.u32())
        spacing = (c.f64(), c.f64(), c.f64())
        affine = np.array([c.f64() for _ in range(16)]).reshape(4, 4)
        vmin, vmax = c.f64(), c.f64()
        c.done()
        return cls(vid, dims, spacing, affine, vmin, vmax)


def pack_set_window_level(window: float, level: float) -> bytes:
    return struct.pack("<dd", window, level)


def parse_set_window_level(payload: bytes) -> Tuple[float, float]:
    c = Cursor(payload)
    w, l = c.f64(), c.f64()
    c.done()
    if not w > 0:
        raise PayloadError("window must be > 0")
    return w, l


def pack_select_model(model_id: str) -> bytes:
    return pack_string(model_id)


def parse_select_model(payload: bytes) -> str:
    c = Cursor(payload)
    m = c.string()
    c.done()
    return m


def pack_model_list(models) -> bytes:
    out = bytearray(struct.pack("<H", len(models)))
    for d in models:
        out += pack_string(d.model_id)
        out += struct.pack("<B", 0 if d.kind == "builtin" else 1)
        out += struct.pack("<Q", d.embedding_bytes_estimate)
    return bytes(out)


def parse_model_list(payload: bytes) -> List[Tuple[str, int, int]]:
    c = Cursor(payload)
    out = [(c.string(), c.u8(), c.u64()) for _ in range(c.u16())]
    c.done()
    return out


@dataclass
class SetPromptsMsg:
    axis: int
    slice_index: int
    label: int
    prompts: PromptSet

    def pack(self) -> bytes:
        return struct.pack("<BIH", self.axis, self.slice_index, self.label) + _pack_prompts(
            self.prompts
        )

    @classmethod
    def parse(cls, payload: bytes) -> "SetPromptsMsg":
        c = Cursor(payload)
        axis, index, label = c.u8(), c.u32(), c.u16()
        prompts = _read_prompts(c)
        c.done()
        if axis not in (0, 1, 2):
            raise PayloadError("axis must be 0, 1 or 2")
        return cls(axis, index, label, prompts)


@dataclass
class PropagateToMsg:
    axis: int
    slice_index: int

    def pack(self) -> bytes:
        return struct.pack("<BI", self.axis, self.slice_index)

    @classmethod
    def parse(cls, payload: bytes) -> "PropagateToMsg":
        c = Cursor(payload)
        axis, index = c.u8(), c.u32()
        c.done()
        if axis not in (0, 1, 2):
            raise PayloadError("axis must be 0, 1 or 2")
        return cls(axis, index)


@dataclass
class ApplyBbox3DMsg:
    label: int
    propagation_axis: int
    adjust: bool          # True: clear the previous box first
    bounds: Tuple[int, int, int, int, int, int]  # i0 j0 k0 i1 j1 k1

    def pack(self) -> bytes:
        return struct.pack(
            "<HBB6I", self.label, self.propagation_axis, 1 if self.adjust else 0, *self.bounds
        )

    @classmethod
    def parse(cls, payload: bytes) -> "ApplyBbox3DMsg":
        c = Cursor(payload)
        label, axis, adjust = c.u16(), c.u8(), c.u8()
        bounds = tuple(c.u32() for _ in range(6))
        c.done()
        if axis not in (0, 1, 2):
            raise PayloadError("axis must be 0, 1 or 2")
        if adjust not in (0, 1):
            raise PayloadError("adjust flag must be 0 or 1")
        return cls(label, axis, adjust == 1, bounds)


@dataclass
class MaskResultMsg:
    axis: int
    slice_index: int
    label: int
    score: float
    decode_us: int
    mask: RleMask

    def pack(self) -> bytes:
        return (
            struct.pack("<BIHdI", self.axis, self.slice_index, self.label, self.score, self.decode_us)
            + _pack_rle(self.mask)
        )

    @classmethod
    def parse(cls, payload: bytes) -> "MaskResultMsg":
        c = Cursor(payload)
        axis, index, label = c.u8(), c.u32(), c.u16()
        score, decode_us = c.f64(), c.u32()
        mask = _read_rle(c)
        c.done()
        return cls(axis, index, label, score, decode_us, mask)

    def bitmap(self) -> np.ndarray:
        return rle_decode(self.mask)


@dataclass
class PrecomputeStatusMsg:
    volume_id: int
    fractions: Tuple[float, float, float]

    def pack(self) -> bytes:
        return struct.pack("<Q3d", self.volume_id, *self.fractions)

    @classmethod
    def parse(cls, payload: bytes) -> "PrecomputeStatusMsg":
        c = Cursor(payload)
        vid = c.u64()
        fr = (c.f64(), c.f64(), c.f64())
        c.done()
        return cls(vid, fr)


@dataclass
class UndoReply:
    axis: int
    slice_index: int

    def pack(self) -> bytes:
        return struct.pack("<BI", self.axis, self.slice_index)

    @classmethod
    def parse(cls, payload: bytes) -> "UndoReply":
        c = Cursor(payload)
        out = cls(c.u8(), c.u32())
        c.done()
        return out


EXPORT_MODE_FILE = 0
EXPORT_MODE_STREAM = 1


def pack_export_labels(mode: int, path: str = "") -> bytes:
    if mode == EXPORT_MODE_FILE:
        return struct.pack("<B", mode) + pack_string(path)
    return struct.pack("<B", mode)


def parse_export_labels(payload: bytes) -> Tuple[int, str]:
    c = Cursor(payload)
    mode = c.u8()
    if mode == EXPORT_MODE_FILE:
        path = c.string()
        c.done()
        return mode, path
    if mode == EXPORT_MODE_STREAM:
        c.done()
        return mode, ""
    raise PayloadError(f"unknown export mode {mode}")


@dataclass
class ExportChunk:
    """One piece of a streamed uint16 label volume, in x-fastest voxel order."""

    offset_voxels: int
    labels: np.ndarray  # uint16, 1-D

    def pack(self) -> bytes:
        return (
            struct.pack("<QI", self.offset_voxels, len(self.labels))
            + self.labels.astype("<u2").tobytes()
        )

    @classmethod
    def parse(cls, payload: bytes) -> "ExportChunk":
        c = Cursor(payload)
        off, count = c.u64(), c.u32()
        raw = c.raw(2 * count)
        c.done()
        return cls(off, np.frombuffer(raw, dtype="<u2"))


@dataclass
class ErrorMsg:
    in_reply_to: int   # msg_type this answers, 0 if none
    code: int
    detail: str

    def pack(self) -> bytes:
        return struct.pack("<BH", self.in_reply_to, self.code) + pack_string(self.detail)

    @classmethod
    def parse(cls, payload: bytes) -> "ErrorMsg":
        c = Cursor(payload)
        out = cls(c.u8(), c.u16(), c.string())
        c.done()
        return out


@dataclass
class RegisterWorkerMsg:
    model_id: str
    embedding_bytes_estimate: int

    def pack(self) -> bytes:
        return pack_string(self.model_id) + struct.pack("<Q", self.embedding_bytes_estimate)

    @classmethod
    def parse(cls, payload: bytes) -> "RegisterWorkerMsg":
        c = Cursor(payload)
        out = cls(c.string(), c.u64())
        c.done()
        if not out.model_id:
            raise PayloadError("model_id must be nonempty")
        return out


@dataclass
class EncodeRequestMsg:
    request_id: int
    volume_id: int
    axis: int
    slice_index: int
    wl_hash: int
    rows: int
    cols: int
    pixels: np.ndarray  # float32 (rows, cols), window/level-normalized

    def pack(self) -> bytes:
        return (
            struct.pack(
                "<QQBIQII",
                self.request_id,
                self.volume_id,
                self.axis,
                self.slice_index,
                self.wl_hash,
                self.rows,
                self.cols,
            )
            + np.ascontiguousarray(self.pixels, dtype="<f4").tobytes()
        )

    @classmethod
    def parse(cls, payload: bytes) -> "EncodeRequestMsg":
        c = Cursor(payload)
        rid, vid = c.u64(), c.u64()
        axis, index, wlh = c.u8(), c.u32(), c.u64()
        rows, cols = c.u32(), c.u32()
        raw = c.raw(4 * rows * cols)
        c.done()
        pixels = np.frombuffer(raw, dtype="<f4").reshape(rows, cols)
        return cls(rid, vid, axis, index, wlh, rows, cols, pixels)


@dataclass
class EncodeResultMsg:
    request_id: int
    ok: bool
    rows: int = 0
    cols: int = 0
    blob: bytes = b""
    detail: str = ""

    def pack(self) -> bytes:
        if self.ok:
            return (
                struct.pack("<QBIII", self.request_id, 1, self.rows, self.cols, len(self.blob))
                + self.blob
            )
        return struct.pack("<QB", self.request_id, 0) + pack_string(self.detail)

    @classmethod
    def parse(cls, payload: bytes) -> "EncodeResultMsg":
        c = Cursor(payload)
        rid, ok = c.u64(), c.u8()
        if ok == 1:
            rows, cols, blen = c.u32(), c.u32(), c.u32()
            blob = c.raw(blen)
            c.done()
            return cls(rid, True, rows, cols, blob)
        if ok == 0:
            detail = c.string()
            c.done()
            return cls(rid, False, detail=detail)
        raise PayloadError("ok flag must be 0 or 1")


@dataclass
class DecodeRequestMsg:
    request_id: int
    volume_id: int
    axis: int
    slice_index: int
    wl_hash: int
    rows: int
    cols: int
    prompts: PromptSet

    def pack(self) -> bytes:
        return (
            struct.pack(
                "<QQBIQII",
                self.request_id,
                self.volume_id,
                self.axis,
                self.slice_index,
                self.wl_hash,
                self.rows,
                self.cols,
            )
            + _pack_prompts(self.prompts)
        )

    @classmethod
    def parse(cls, payload: bytes) -> "DecodeRequestMsg":
        c = Cursor(payload)
        rid, vid = c.u64(), c.u64()
        axis, index, wlh = c.u8(), c.u32(), c.u64()
        rows, cols = c.u32(), c.u32()
        prompts = _read_prompts(c)
        c.done()
        return cls(rid, vid, axis, index, wlh, rows, cols, prompts)


DECODE_OK = 0
DECODE_MISSING_EMBEDDING = 1
DECODE_FAILED = 2


@dataclass
class DecodeResultMsg:
    request_id: int
    status: int
    score: float = 0.0
    mask: Optional[RleMask] = None
    detail: str = ""

    def pack(self) -> bytes:
        if self.status == DECODE_OK:
            assert self.mask is not None
            return struct.pack("<QBd", self.request_id, self.status, self.score) + _pack_rle(
                self.mask
            )
        return struct.pack("<QB", self.request_id, self.status) + pack_string(self.detail)

    @classmethod
    def parse(cls, payload: bytes) -> "DecodeResultMsg":
        c = Cursor(payload)
        rid, status = c.u64(), c.u8()
        if status == DECODE_OK:
            score = c.f64()
            mask = _read_rle(c)
            c.done()
            return cls(rid, status, score, mask)
        if status in (DECODE_MISSING_EMBEDDING, DECODE_FAILED):
            detail = c.string()
            c.done()
            return cls(rid, status, detail=detail)
        raise PayloadError(f"unknown decode status {status}")
