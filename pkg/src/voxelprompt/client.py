"""Blocking TCP client used by the CLI, the benchmark, and the test suite.

Unsolicited event frames (precompute progress) arriving between a request
and its reply are captured on the side, never returned as replies.
"""

from __future__ import annotations

import socket
import time
from typing import List, Optional, Tuple

import numpy as np

from . import protocol as proto


class ServerError(Exception):
    def __init__(self, err: proto.ErrorMsg, partial: Optional[list] = None):
        super().__init__(f"server error {err.code}: {err.detail}")
        self.code = err.code
        self.detail = err.detail
        self.in_reply_to = err.in_reply_to
        self.partial = partial or []


class Client:
    def __init__(self, host: str = "127.0.0.1", port: int = 8942, timeout: float = 60.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self.sock: Optional[socket.socket] = None
        self.decoder = proto.StreamDecoder()
        self.events: List[proto.PrecomputeStatusMsg] = []
        self._queued: List[proto.Frame] = []

    def connect(self) -> "Client":
        self.sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return self

    def close(self):
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None

    def __enter__(self) -> "Client":
        return self.connect()

    def __exit__(self, *exc):
        self.close()

    # -- framing ----------------------------------------------------------

    def _send(self, msg_type: int, payload: bytes = b"", flags: int = 0):
        self.sock.sendall(proto.encode_frame(msg_type, payload, flags))

    def _next_frame(self) -> proto.Frame:
        while not self._queued:
            data = self.sock.recv(1 << 16)
            if not data:
                raise ConnectionError("server closed the connection")
            self._queued.extend(self.decoder.feed(data))
        return self._queued.pop(0)

    def _next_reply(self) -> proto.Frame:
        while True:
            frame = self._next_frame()
            if frame.is_event:
                if frame.msg_type == proto.MsgType.PRECOMPUTE_STATUS:
                    self.events.append(proto.PrecomputeStatusMsg.parse(frame.payload))
                continue
            return frame

    def _request(self, msg_type: int, payload: bytes = b"",
                 expect: Optional[int] = None) -> proto.Frame:
        self._send(msg_type, payload)
        frame = self._next_reply()
        if frame.msg_type == proto.MsgType.ERROR:
            raise ServerError(proto.ErrorMsg.parse(frame.payload))
        want = expect if expect is not None else msg_type
        if frame.msg_type != want:
            raise proto.ProtocolError(
                f"expected reply 0x{want:02X}, got 0x{frame.msg_type:02X}"
            )
        return frame

    def drain_events(self) -> List[proto.PrecomputeStatusMsg]:
        out, self.events = self.events, []
        return out

    # -- requests -----------------------------------------------------------

    def hello(self) -> Tuple[str, str]:
        frame = self._request(proto.MsgType.HELLO)
        r = proto.HelloReply.parse(frame.payload)
        return r.software, r.semver

    def load_volume(self, path: str) -> proto.VolumeMeta:
        frame = self._request(proto.MsgType.LOAD_VOLUME, proto.pack_load_volume(path),
                              expect=proto.MsgType.VOLUME_META)
        return proto.VolumeMeta.parse(frame.payload)

    def set_window_level(self, window: float, level: float):
        self._request(proto.MsgType.SET_WINDOW_LEVEL, proto.pack_set_window_level(window, level))

    def select_model(self, model_id: str):
        self._request(proto.MsgType.SELECT_MODEL, proto.pack_select_model(model_id))

    def list_models(self) -> List[Tuple[str, int, int]]:
        frame = self._request(proto.MsgType.LIST_MODELS)
        return proto.parse_model_list(frame.payload)

    def set_prompts(self, axis: int, slice_index: int, label: int,
                    prompts) -> proto.MaskResultMsg:
        msg = proto.SetPromptsMsg(axis, slice_index, label, prompts)
        frame = self._request(proto.MsgType.SET_PROMPTS, msg.pack(),
                              expect=proto.MsgType.MASK_RESULT)
        return proto.MaskResultMsg.parse(frame.payload)

    def propagate_to(self, axis: int, slice_index: int) -> proto.MaskResultMsg:
        msg = proto.PropagateToMsg(axis, slice_index)
        frame = self._request(proto.MsgType.PROPAGATE_TO, msg.pack(),
                              expect=proto.MsgType.MASK_RESULT)
        return proto.MaskResultMsg.parse(frame.payload)

    def apply_bbox3d(self, label: int, axis: int, bounds, adjust: bool = False
                     ) -> List[proto.MaskResultMsg]:
        msg = proto.ApplyBbox3DMsg(label, axis, adjust, tuple(bounds))
        self._send(proto.MsgType.APPLY_BBOX3D, msg.pack())
        out: List[proto.MaskResultMsg] = []
        while True:
            frame = self._next_reply()
            if frame.msg_type == proto.MsgType.ERROR:
                raise ServerError(proto.ErrorMsg.parse(frame.payload), partial=out)
            if frame.msg_type != proto.MsgType.MASK_RESULT:
                raise proto.ProtocolError(f"unexpected 0x{frame.msg_type:02X} in box stream")
            out.append(proto.MaskResultMsg.parse(frame.payload))
            if not frame.has_more:
                return out

    def undo(self) -> proto.UndoReply:
        frame = self._request(proto.MsgType.UNDO)
        return proto.UndoReply.parse(frame.payload)

    def export_labels_file(self, path: str):
        self._request(
            proto.MsgType.EXPORT_LABELS, proto.pack_export_labels(proto.EXPORT_MODE_FILE, path)
        )

    def export_labels_stream(self) -> np.ndarray:
        """Returns the uint16 label voxels flat, x-fastest."""
        self._send(
            proto.MsgType.EXPORT_LABELS, proto.pack_export_labels(proto.EXPORT_MODE_STREAM)
        )
        parts: List[np.ndarray] = []
        expect = 0
        while True:
            frame = self._next_reply()
            if frame.msg_type == proto.MsgType.ERROR:
                raise ServerError(proto.ErrorMsg.parse(frame.payload))
            if frame.msg_type != proto.MsgType.EXPORT_LABELS:
                raise proto.ProtocolError(f"unexpected 0x{frame.msg_type:02X} in export stream")
            chunk = proto.ExportChunk.parse(frame.payload)
            if chunk.offset_voxels != expect:
                raise proto.ProtocolError("export chunks out of order")
            expect += len(chunk.labels)
            parts.append(chunk.labels)
            if not frame.has_more:
                return np.concatenate(parts) if parts else np.zeros(0, dtype=np.uint16)

    def precompute_status(self) -> proto.PrecomputeStatusMsg:
        frame = self._request(proto.MsgType.PRECOMPUTE_STATUS)
        return proto.PrecomputeStatusMsg.parse(frame.payload)

    def wait_precomputed(self, timeout: float = 600.0,
                         poll_s: float = 0.05) -> proto.PrecomputeStatusMsg:
        deadline = time.monotonic() + timeout
        while True:
            st = self.precompute_status()
            if all(f >= 1.0 for f in st.fractions):
                return st
            if time.monotonic() > deadline:
                raise TimeoutError(f"precompute incomplete after {timeout}s: {st.fractions}")
            time.sleep(poll_s)

