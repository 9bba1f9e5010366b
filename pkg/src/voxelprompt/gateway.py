"""HTTP gateway for browser clients: a websocket bridge that carries the
binary protocol unchanged (one protocol frame per websocket binary message),
8-bit windowed PNG slice tiles for display, STL mesh downloads, and static
assets.  Enabled by setting gateway_port in the server config.
"""

from __future__ import annotations

import base64
import hashlib
import json
import socket
import struct
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from . import protocol as proto
from .surface import extract_surface, mesh_to_stl_bytes
from .volume import SliceRef, WindowLevel, apply_window_level, extract_slice

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".svg": "image/svg+xml",
    ".png": "image/png",
    ".ico": "image/x-icon",
    ".map": "application/json",
}


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf.extend(chunk)
    return bytes(buf)


def _read_protocol_frame(sock: socket.socket) -> bytes:
    """One whole wire frame, header included, without reinterpreting it."""
    header = _read_exact(sock, proto.HEADER.size)
    magic, version, _, _, plen = proto.HEADER.unpack(header)
    if magic != proto.MAGIC or version != proto.VERSION or plen > proto.MAX_PAYLOAD:
        raise ConnectionError("malformed frame from server")
    return header + _read_exact(sock, plen)


def _ws_send(sock: socket.socket, payload: bytes, opcode: int = 0x2):
    n = len(payload)
    if n < 126:
        head = struct.pack("!BB", 0x80 | opcode, n)
    elif n < 1 << 16:
        head = struct.pack("!BBH", 0x80 | opcode, 126, n)
    else:
        head = struct.pack("!BBQ", 0x80 | opcode, 127, n)
    sock.sendall(head + payload)


def _ws_recv(sock: socket.socket):
    """Returns (opcode, payload) for one complete message, joining fragments."""
    opcode = None
    parts = []
    while True:
        b0, b1 = _read_exact(sock, 2)
        fin = b0 & 0x80
        op = b0 & 0x0F
        masked = b1 & 0x80
        n = b1 & 0x7F
        if n == 126:
            (n,) = struct.unpack("!H", _read_exact(sock, 2))
        elif n == 127:
            (n,) = struct.unpack("!Q", _read_exact(sock, 8))
        mask = _read_exact(sock, 4) if masked else b"\x00" * 4
        data = bytearray(_read_exact(sock, n))
        if masked:
            for i in range(len(data)):
                data[i] ^= mask[i & 3]
        if op in (0x8, 0x9, 0xA):  # control frames never fragment
            return op, bytes(data)
        if opcode is None:
            opcode = op
        parts.append(bytes(data))
        if fin:
            return opcode, b"".join(parts)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "voxelprompt-gateway"

    # set by Gateway
    engine = None     # VoxelPromptServer
    assets_dir = None

    def log_message(self, fmt, *args):
        pass

    def _json_error(self, status: int, message: str):
        body = json.dumps({"error": message}).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_bytes(self, body: bytes, ctype: str, extra=()):
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        for k, v in extra:
            self.send_header(k, v)
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        url = urlparse(self.path)
        if url.path == "/ws":
            self._handle_ws()
            return
        if url.path == "/tile":
            self._handle_tile(parse_qs(url.query))
            return
        if url.path == "/mesh":
            self._handle_mesh(parse_qs(url.query))
            return
        self._handle_static(url.path)

    # -- display tiles -------------------------------------------------------

    def _handle_tile(self, q):
        try:
            vid = int(q["volume"][0])
            axis = int(q["axis"][0])
            index = int(q["index"][0])
            window = float(q["window"][0])
            level = float(q["level"][0])
        except (KeyError, ValueError, IndexError):
            self._json_error(400, "need volume, axis, index, window, level")
            return
        volume = self.engine.volumes.get(vid)
        if volume is None:
            self._json_error(404, f"unknown volume {vid}")
            return
        if axis not in (0, 1, 2) or not 0 <= index < volume.dims[axis] or window <= 0:
            self._json_error(400, "axis, index or window out of range")
            return
        try:
            from PIL import Image
        except ImportError:
            self._json_error(501, "PNG tiles need the Pillow package")
            return
        import io

        norm = apply_window_level(extract_slice(volume, SliceRef(axis, index)),
                                  WindowLevel(window, level))
        gray = np.rint(norm.pixels.astype(np.float64) * 255.0).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(gray, mode="L").save(buf, format="PNG")
        self._send_bytes(buf.getvalue(), "image/png",
                         extra=[("Cache-Control", "no-store")])

    # -- mesh download ---------------------------------------------------------

    def _handle_mesh(self, q):
        try:
            vid = int(q["volume"][0])
            label = int(q["label"][0])
        except (KeyError, ValueError, IndexError):
            self._json_error(400, "need volume and label")
            return
        volume = self.engine.volumes.get(vid)
        session = self.engine.sessions_by_volume.get(vid)
        if volume is None or session is None:
            self._json_error(404, f"unknown volume {vid}")
            return
        try:
            mesh = extract_surface(session.label_volume, volume, label)
        except ValueError as exc:
            self._json_error(400, str(exc))
            return
        data = mesh_to_stl_bytes(mesh)
        self._send_bytes(
            data, "model/stl",
            extra=[("Content-Disposition", f'attachment; filename="label{label}.stl"')],
        )

    # -- static assets -----------------------------------------------------------

    def _handle_static(self, path: str):
        if self.assets_dir is None:
            if path in ("/", "/index.html"):
                self._send_bytes(
                    b"<!doctype html><title>voxelprompt</title>"
                    b"<p>gateway is running; no assets_dir configured</p>",
                    "text/html; charset=utf-8",
                )
                return
            self._json_error(404, "no assets configured")
            return
        rel = path.lstrip("/") or "index.html"
        root = Path(self.assets_dir).resolve()
        target = (root / rel).resolve()
        if root not in target.parents and target != root:
            self._json_error(403, "forbidden")
            return
        if not target.is_file():
            self._json_error(404, "not found")
            return
        ctype = _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        self._send_bytes(target.read_bytes(), ctype)

    # -- websocket bridge -----------------------------------------------------------

    def _handle_ws(self):
        key = self.headers.get("Sec-WebSocket-Key")
        if self.headers.get("Upgrade", "").lower() != "websocket" or not key:
            self._json_error(400, "websocket upgrade required")
            return
        accept = base64.b64encode(
            hashlib.sha1((key + _WS_GUID).encode()).digest()
        ).decode()
        self.send_response(101, "Switching Protocols")
        self.send_header("Upgrade", "websocket")
        self.send_header("Connection", "Upgrade")
        self.send_header("Sec-WebSocket-Accept", accept)
        self.end_headers()

        ws = self.connection
        ws.settimeout(None)
        upstream = socket.create_connection(
            (self.engine.config.host, self.engine.port)
        )
        upstream.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        send_lock = threading.Lock()
        done = threading.Event()

        def pump_upstream():
            # server -> browser: one protocol frame per ws binary message
            try:
                while not done.is_set():
                    frame = _read_protocol_frame(upstream)
                    with send_lock:
                        _ws_send(ws, frame)
            except (ConnectionError, OSError):
                pass
            finally:
                done.set()
                try:
                    ws.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass

        t = threading.Thread(target=pump_upstream, daemon=True)
        t.start()
        try:
            while not done.is_set():
                op, payload = _ws_recv(ws)
                if op == 0x8:
                    break
                if op == 0x9:
                    with send_lock:
                        _ws_send(ws, payload, opcode=0xA)
                    continue
                if op == 0x2 and payload:
                    upstream.sendall(payload)
        except (ConnectionError, OSError):
            pass
        finally:
            done.set()
            try:
                upstream.close()
            except OSError:
                pass
            self.close_connection = True


class Gateway:
    def __init__(self, engine, config, port=None):
        self.engine = engine
        self.config = config
        if port is None:
            port = config.gateway_port if config.gateway_port is not None else 8943
        self.port = port
        handler = type("BoundHandler", (_Handler,), {
            "engine": engine,
            "assets_dir": config.assets_dir,
        })
        self.httpd = ThreadingHTTPServer((config.host, self.port), handler)
        self.httpd.daemon_threads = True
        self.port = self.httpd.server_address[1]
        self._thread = None

    def start(self) -> int:
        self._thread = threading.Thread(target=self.httpd.serve_forever,
                                        name="vp-gateway", daemon=True)
        self._thread.start()
        return self.port

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
