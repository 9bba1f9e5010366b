"""Worker loop: register with the segmentation server, answer encode and
decode requests over one dedicated connection.

The server never ships embeddings back. This process keeps its own store
keyed (volume_id, axis, slice_index, wl_hash) and answers a decode for an
evicted slice with the missing-embedding status so the server re-encodes.
"""

from __future__ import annotations

import hashlib
import logging
import socket
import struct
from collections import OrderedDict
from typing import Optional

import numpy as np

from . import framing as fr
from .predictor import (
    SlicePredictor,
    mask_to_slice,
    scale_box,
    scale_points,
    to_model_input,
)
from .presets import ModelPreset

log = logging.getLogger("samworker")


class WorkerError(Exception):
    """Registration or transport failure."""


class EmbeddingStore:
    """Entry-capped LRU of model-side embedding handles."""

    def __init__(self, max_entries: int = 2048):
        self.max_entries = max_entries
        self._d = OrderedDict()

    def get(self, key):
        if key not in self._d:
            return None
        self._d.move_to_end(key)
        return self._d[key]

    def put(self, key, value):
        self._d[key] = value
        self._d.move_to_end(key)
        while len(self._d) > self.max_entries:
            self._d.popitem(last=False)

    def __len__(self):
        return len(self._d)


def _blob_token(key) -> bytes:
    # the server caches this opaquely; the tensor itself never leaves the
    # worker, so a stable fingerprint of the store key is all it needs
    return hashlib.blake2b(repr(key).encode(), digest_size=16).digest()


class Worker:
    def __init__(self, host: str, port: int, preset: ModelPreset,
                 predictor: SlicePredictor, store_entries: int = 2048):
        self.host = host
        self.port = port
        self.preset = preset
        self.predictor = predictor
        self.store = EmbeddingStore(store_entries)
        self._sock: Optional[socket.socket] = None
        self.registered = False

    # transport

    def _recv_exact(self, n: int) -> Optional[bytes]:
        chunks = []
        remaining = n
        while remaining:
            try:
                chunk = self._sock.recv(remaining)
            except OSError:
                return None
            if not chunk:
                return None
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def _read_frame(self):
        head = self._recv_exact(fr.HEADER_SIZE)
        if head is None:
            return None
        msg_type, flags, n = fr.parse_header(head)
        payload = self._recv_exact(n) if n else b""
        if n and payload is None:
            return None
        return msg_type, payload

    def _send(self, data: bytes):
        self._sock.sendall(data)

    def connect_and_register(self):
        self._sock = socket.create_connection((self.host, self.port), timeout=30)
        self._sock.settimeout(None)
        reg = fr.RegisterWorker(self.preset.model_id, self.preset.embedding_bytes)
        self._send(fr.pack_frame(fr.REGISTER_WORKER, reg.pack()))
        got = self._read_frame()
        if got is None:
            raise WorkerError("connection closed during registration")
        msg_type, payload = got
        if msg_type == fr.ERROR:
            err = fr.ErrorReply.parse(payload)
            raise WorkerError(f"registration rejected (code {err.code}): {err.detail}")
        if msg_type != fr.REGISTER_WORKER:
            raise WorkerError(f"unexpected reply type 0x{msg_type:02x}")
        self.registered = True
        log.info("registered model %s with %s:%d",
                 self.preset.model_id, self.host, self.port)

    def serve_forever(self):
        while True:
            got = self._read_frame()
            if got is None:
                log.info("server connection closed")
                return
            msg_type, payload = got
            if msg_type == fr.ENCODE_REQUEST:
                self._send(self._handle_encode(payload))
            elif msg_type == fr.DECODE_REQUEST:
                self._send(self._handle_decode(payload))
            else:
                log.warning("ignoring frame type 0x%02x", msg_type)

    def run(self):
        try:
            self.connect_and_register()
            self.serve_forever()
        finally:
            self.close()

    def close(self):
        # the socket object stays put so a reader blocked in recv gets a
        # clean OSError off the closed fd instead of a vanished attribute
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._sock.close()
            except OSError:
                pass

    # request handling; one request at a time keeps a single model call
    # in flight per process

    def _handle_encode(self, payload: bytes) -> bytes:
        try:
            req = fr.EncodeRequest.parse(payload)
        except (fr.PayloadTruncated, struct.error) as exc:
            log.error("bad encode request: %s", exc)
            return fr.pack_frame(fr.ENCODE_RESULT, fr.pack_encode_failure(0, str(exc)))
        try:
            pixels = np.frombuffer(req.pixels, dtype="<f4").reshape(req.rows, req.cols)
            image = to_model_input(pixels, self.predictor.input_size)
            handle = self.predictor.embed(image)
            key = (req.volume_id, req.axis, req.slice_index, req.wl_hash)
            self.store.put(key, handle)
            body = fr.pack_encode_result(req.request_id, req.rows, req.cols,
                                         _blob_token(key))
        except Exception as exc:
            log.exception("encode failed")
            body = fr.pack_encode_failure(req.request_id, str(exc))
        return fr.pack_frame(fr.ENCODE_RESULT, body)

    def _handle_decode(self, payload: bytes) -> bytes:
        try:
            req = fr.DecodeRequest.parse(payload)
        except (fr.PayloadTruncated, struct.error) as exc:
            log.error("bad decode request: %s", exc)
            return fr.pack_frame(
                fr.DECODE_RESULT,
                fr.pack_decode_problem(0, fr.DECODE_FAILED, str(exc)))
        key = (req.volume_id, req.axis, req.slice_index, req.wl_hash)
        handle = self.store.get(key)
        if handle is None:
            body = fr.pack_decode_problem(
                req.request_id, fr.DECODE_MISSING,
                f"no embedding for axis {req.axis} slice {req.slice_index}")
            return fr.pack_frame(fr.DECODE_RESULT, body)
        try:
            body = self._decode(req, handle)
        except Exception as exc:
            log.exception("decode failed")
            body = fr.pack_decode_problem(req.request_id, fr.DECODE_FAILED, str(exc))
        return fr.pack_frame(fr.DECODE_RESULT, body)

    def _decode(self, req: fr.DecodeRequest, handle) -> bytes:
        p = req.prompts
        if not p.positive and p.bbox is None:
            return fr.pack_decode_problem(
                req.request_id, fr.DECODE_FAILED, "prompt set has no foreground")
        size = self.predictor.input_size
        points = list(p.positive) + list(p.negative)
        coords = scale_points(points, req.rows, req.cols, size)
        labels = np.array([1] * len(p.positive) + [0] * len(p.negative),
                          dtype=np.int64)
        box = None
        if p.bbox is not None:
            box = scale_box(p.bbox, req.rows, req.cols, size)
        mask, score = self.predictor.predict(handle, coords, labels, box)
        bitmap = mask_to_slice(np.asarray(mask, dtype=bool), req.rows, req.cols)
        runs = fr.mask_to_runs(bitmap.ravel())
        score = min(max(float(score), 0.0), 1.0)
        return fr.pack_decode_result(req.request_id, score, req.rows, req.cols, runs)
