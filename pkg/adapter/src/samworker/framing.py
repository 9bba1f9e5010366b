"""Wire codec for the segmentation server's worker channel.

Implemented independently against protocol.md so this package talks to
the server over the socket alone, with no imports from it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Tuple

MAGIC = b"SMME"
VERSION = 1
MAX_PAYLOAD = 64 * 1024 * 1024

_HEADER = struct.Struct("<4sBBHI")
HEADER_SIZE = _HEADER.size

# message type codes used on a worker connection
HELLO = 0x01
ERROR = 0x0E
REGISTER_WORKER = 0x10
ENCODE_REQUEST = 0x11
ENCODE_RESULT = 0x12
DECODE_REQUEST = 0x13
DECODE_RESULT = 0x14

FLAG_EVENT = 0x0001
FLAG_MORE = 0x0002

DECODE_OK = 0
DECODE_MISSING = 1
DECODE_FAILED = 2


class FramingError(Exception):
    """Connection-fatal framing violation (bad magic/version/length)."""


class PayloadTruncated(Exception):
    """Payload shorter than its declared fields."""


def pack_frame(msg_type: int, payload: bytes = b"", flags: int = 0) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise FramingError(f"payload too large: {len(payload)}")
    return _HEADER.pack(MAGIC, VERSION, msg_type, flags, len(payload)) + payload


def parse_header(buf: bytes) -> Tuple[int, int, int]:
    """Returns (msg_type, flags, payload_len). Needs HEADER_SIZE bytes."""
    magic, version, msg_type, flags, n = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FramingError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FramingError(f"unsupported version {version}")
    if n > MAX_PAYLOAD:
        raise FramingError(f"payload length {n} over cap")
    return msg_type, flags, n


class Reader:
    """Cursor over one payload; every read checks the remaining length."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise PayloadTruncated(f"need {n} bytes at {self.pos}, have {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def done(self) -> bool:
        return self.pos == len(self.buf)


def pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FramingError("string too long")
    return struct.pack("<H", len(raw)) + raw


@dataclass
class Prompts:
    positive: Tuple[Tuple[int, int], ...] = ()
    negative: Tuple[Tuple[int, int], ...] = ()
    bbox: Optional[Tuple[int, int, int, int]] = None  # row0, col0, row1, col1 inclusive


def read_prompts(r: Reader) -> Prompts:
    n_pos = r.u16()
    n_neg = r.u16()
    has_bbox = r.u8()
    pos = tuple((r.u32(), r.u32()) for _ in range(n_pos))
    neg = tuple((r.u32(), r.u32()) for _ in range(n_neg))
    bbox = None
    if has_bbox:
        bbox = (r.u32(), r.u32(), r.u32(), r.u32())
    return Prompts(pos, neg, bbox)


def pack_prompts(p: Prompts) -> bytes:
    out = [struct.pack("<HHB", len(p.positive), len(p.negative), 1 if p.bbox else 0)]
    for r, c in p.positive:
        out.append(struct.pack("<II", r, c))
    for r, c in p.negative:
        out.append(struct.pack("<II", r, c))
    if p.bbox:
        out.append(struct.pack("<IIII", *p.bbox))
    return b"".join(out)


def pack_rle(rows: int, cols: int, runs) -> bytes:
    head = struct.pack("<III", rows, cols, len(runs))
    return head + struct.pack(f"<{len(runs)}I", *runs)


def mask_to_runs(flat) -> list:
    """Alternating background/foreground run lengths, leading 0-run allowed.

    `flat` is a row-major iterable of 0/1. Never emits a zero run after
    the first; run sum equals len(flat).
    """
    runs = []
    want = 0  # runs alternate starting with background
    count = 0
    for v in flat:
        v = 1 if v else 0
        if v == want:
            count += 1
        else:
            runs.append(count)
            want = 1 - want
            count = 1
    runs.append(count)
    if not runs:
        runs = [0]
    return runs


# worker-channel message bodies


@dataclass
class RegisterWorker:
    model_id: str
    embedding_bytes_estimate: int

    def pack(self) -> bytes:
        return pack_string(self.model_id) + struct.pack("<Q", self.embedding_bytes_estimate)


@dataclass
class EncodeRequest:
    request_id: int
    volume_id: int
    axis: int
    slice_index: int
    wl_hash: int
    rows: int
    cols: int
    pixels: bytes  # rows*cols little-endian f32, window/level normalized

    @classmethod
    def parse(cls, payload: bytes) -> "EncodeRequest":
        r = Reader(payload)
        rid = r.u64()
        vid = r.u64()
        axis = r.u8()
        idx = r.u32()
        wl = r.u64()
        rows = r.u32()
        cols = r.u32()
        pix = r.take(rows * cols * 4)
        return cls(rid, vid, axis, idx, wl, rows, cols, pix)


def pack_encode_result(request_id: int, rows: int, cols: int, blob: bytes) -> bytes:
    return (
        struct.pack("<QB", request_id, 1)
        + struct.pack("<III", rows, cols, len(blob))
        + blob
    )


def pack_encode_failure(request_id: int, detail: str) -> bytes:
    return struct.pack("<QB", request_id, 0) + pack_string(detail)


@dataclass
class DecodeRequest:
    request_id: int
    volume_id: int
    axis: int
    slice_index: int
    wl_hash: int
    rows: int
    cols: int
    prompts: Prompts = field(default_factory=Prompts)

    @classmethod
    def parse(cls, payload: bytes) -> "DecodeRequest":
        r = Reader(payload)
        rid = r.u64()
        vid = r.u64()
        axis = r.u8()
        idx = r.u32()
        wl = r.u64()
        rows = r.u32()
        cols = r.u32()
        return cls(rid, vid, axis, idx, wl, rows, cols, read_prompts(r))


def pack_decode_result(request_id: int, score: float, rows: int, cols: int, runs) -> bytes:
    return (
        struct.pack("<QBd", request_id, DECODE_OK, score)
        + pack_rle(rows, cols, runs)
    )


def pack_decode_problem(request_id: int, status: int, detail: str) -> bytes:
    # status 1 (missing embedding) or 2 (failed)
    return struct.pack("<QB", request_id, status) + pack_string(detail)


@dataclass
class ErrorReply:
    in_reply_to: int
    code: int
    detail: str

    @classmethod
    def parse(cls, payload: bytes) -> "ErrorReply":
        r = Reader(payload)
        return cls(r.u8(), r.u16(), r.string())
