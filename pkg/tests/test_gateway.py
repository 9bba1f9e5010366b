"""Gateway tests: tile rendering, mesh download, static assets, and the
websocket bridge, all against live sockets."""

import base64
import hashlib
import http.client
import io
import socket
import struct

import numpy as np
import pytest

from voxelprompt import protocol as proto
from voxelprompt.backend import PromptSet
from voxelprompt.client import Client
from voxelprompt.config import ServerConfig
from voxelprompt.gateway import Gateway
from voxelprompt.nifti import save_volume
from voxelprompt.volume import SliceRef, WindowLevel, apply_window_level, extract_slice


@pytest.fixture
def stack(server_factory, cylinder_volume, tmp_path):
    """(gateway, engine, volume_id, volume) with the cylinder loaded."""
    engine = server_factory()
    gateway = Gateway(engine, ServerConfig(), port=0)
    gateway.start()
    path = tmp_path / "cyl.nii"
    save_volume(cylinder_volume, path)
    client = Client(port=engine.port).connect()
    meta = client.load_volume(str(path))
    client.set_prompts(2, 10, 1, PromptSet(positive=((16, 16),)))
    yield gateway, engine, meta.volume_id, cylinder_volume, client
    client.close()
    gateway.stop()


def get(gateway, path):
    conn = http.client.HTTPConnection("127.0.0.1", gateway.port, timeout=10)
    conn.request("GET", path)
    resp = conn.getresponse()
    body = resp.read()
    headers = dict(resp.getheaders())
    conn.close()
    return resp.status, headers, body


class TestTiles:
    def test_png_pixels_match_window_level(self, stack):
        gateway, engine, vid, volume, _ = stack
        status, headers, body = get(
            gateway, f"/tile?volume={vid}&axis=2&index=10&window=100&level=100"
        )
        assert status == 200
        assert headers["Content-Type"] == "image/png"
        from PIL import Image

        img = np.asarray(Image.open(io.BytesIO(body)))
        norm = apply_window_level(
            extract_slice(volume, SliceRef(2, 10)), WindowLevel(100.0, 100.0)
        )
        want = np.rint(norm.pixels.astype(np.float64) * 255.0).astype(np.uint8)
        assert np.array_equal(img, want)

    def test_unknown_volume_404(self, stack):
        gateway = stack[0]
        status, _, _ = get(gateway, "/tile?volume=999999&axis=2&index=0&window=1&level=0")
        assert status == 404

    @pytest.mark.parametrize(
        "query",
        [
            "volume={vid}&axis=3&index=0&window=1&level=0",
            "volume={vid}&axis=2&index=999&window=1&level=0",
            "volume={vid}&axis=2&index=0&window=0&level=0",
            "volume={vid}&axis=2&index=0",
            "volume=x&axis=2&index=0&window=1&level=0",
        ],
    )
    def test_bad_params_400(self, stack, query):
        gateway, _, vid, _, _ = stack
        status, _, _ = get(gateway, "/tile?" + query.format(vid=vid))
        assert status == 400


class TestMesh:
    def test_stl_download(self, stack):
        gateway, _, vid, _, _ = stack
        status, headers, body = get(gateway, f"/mesh?volume={vid}&label=1")
        assert status == 200
        assert headers["Content-Type"] == "model/stl"
        assert 'filename="label1.stl"' in headers["Content-Disposition"]
        count = struct.unpack_from("<I", body, 80)[0]
        assert len(body) == 84 + 50 * count
        assert count > 0  # the prompted slice has labeled voxels

    def test_absent_label_is_empty_stl(self, stack):
        gateway, _, vid, _, _ = stack
        status, _, body = get(gateway, f"/mesh?volume={vid}&label=9")
        assert status == 200
        assert struct.unpack_from("<I", body, 80)[0] == 0

    def test_label_zero_400(self, stack):
        gateway, _, vid, _, _ = stack
        status, _, _ = get(gateway, f"/mesh?volume={vid}&label=0")
        assert status == 400

    def test_unknown_volume_404(self, stack):
        gateway = stack[0]
        status, _, _ = get(gateway, "/mesh?volume=424242&label=1")
        assert status == 404


class TestStatic:
    def test_fallback_page_without_assets(self, stack):
        gateway = stack[0]
        status, headers, body = get(gateway, "/")
        assert status == 200
        assert b"gateway is running" in body

    def test_asset_serving_and_types(self, server_factory, tmp_path):
        assets = tmp_path / "assets"
        assets.mkdir()
        (assets / "index.html").write_text("<h1>ui</h1>")
        (assets / "app.js").write_text("console.log(1)")
        engine = server_factory()
        gw = Gateway(engine, ServerConfig(assets_dir=str(assets)), port=0)
        gw.start()
        try:
            status, headers, body = get(gw, "/")
            assert (status, body) == (200, b"<h1>ui</h1>")
            status, headers, _ = get(gw, "/app.js")
            assert status == 200
            assert headers["Content-Type"].startswith("text/javascript")
            status, _, _ = get(gw, "/missing.css")
            assert status == 404
        finally:
            gw.stop()

    def test_path_traversal_blocked(self, server_factory, tmp_path):
        assets = tmp_path / "assets"
        assets.mkdir()
        (assets / "index.html").write_text("x")
        secret = tmp_path / "secret.txt"
        secret.write_text("top secret")
        engine = server_factory()
        gw = Gateway(engine, ServerConfig(assets_dir=str(assets)), port=0)
        gw.start()
        try:
            status, _, body = get(gw, "/../secret.txt")
            assert status in (403, 404)
            assert b"top secret" not in body
        finally:
            gw.stop()


class WsClient:
    """Minimal websocket client for the bridge endpoint."""

    def __init__(self, port):
        self.sock = socket.create_connection(("127.0.0.1", port), timeout=10)
        key = base64.b64encode(b"0123456789abcdef").decode()
        req = (
            f"GET /ws HTTP/1.1\r\nHost: 127.0.0.1:{port}\r\n"
            "Upgrade: websocket\r\nConnection: Upgrade\r\n"
            f"Sec-WebSocket-Key: {key}\r\nSec-WebSocket-Version: 13\r\n\r\n"
        )
        self.sock.sendall(req.encode())
        response = b""
        while b"\r\n\r\n" not in response:
            response += self.sock.recv(4096)
        head, _, rest = response.partition(b"\r\n\r\n")
        assert b"101" in head.split(b"\r\n")[0]
        want = base64.b64encode(
            hashlib.sha1((key + "258EAFA5-E914-47DA-95CA-C5AB0DC85B11").encode()).digest()
        )
        assert want in head
        self._buf = rest

    def _read_exact(self, n):
        while len(self._buf) < n:
            chunk = self.sock.recv(1 << 16)
            if not chunk:
                raise ConnectionError("closed")
            self._buf += chunk
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def send_binary(self, payload: bytes):
        # client frames must be masked
        mask = b"\x11\x22\x33\x44"
        n = len(payload)
        if n < 126:
            head = struct.pack("!BB", 0x82, 0x80 | n)
        else:
            head = struct.pack("!BBH", 0x82, 0x80 | 126, n)
        body = bytes(b ^ mask[i & 3] for i, b in enumerate(payload))
        self.sock.sendall(head + mask + body)

    def recv_message(self):
        b0, b1 = self._read_exact(2)
        n = b1 & 0x7F
        if n == 126:
            (n,) = struct.unpack("!H", self._read_exact(2))
        elif n == 127:
            (n,) = struct.unpack("!Q", self._read_exact(8))
        payload = self._read_exact(n)
        return b0 & 0x0F, payload

    def close(self):
        self.sock.close()


class TestWebsocketBridge:
    def test_hello_round_trip(self, stack):
        gateway = stack[0]
        ws = WsClient(gateway.port)
        try:
            ws.send_binary(proto.encode_frame(proto.MsgType.HELLO))
            op, payload = ws.recv_message()
            assert op == 0x2
            frame, used = proto.decode_frame(payload)
            assert used == len(payload)  # exactly one frame per message
            assert frame.msg_type == proto.MsgType.HELLO
            reply = proto.HelloReply.parse(frame.payload)
            assert reply.software == "voxelprompt"
        finally:
            ws.close()

    def test_mask_request_through_bridge(self, stack, cylinder_volume, tmp_path):
        gateway = stack[0]
        path = tmp_path / "ws_cyl.nii"
        save_volume(cylinder_volume, path)
        ws = WsClient(gateway.port)
        try:
            ws.send_binary(proto.encode_frame(
                proto.MsgType.LOAD_VOLUME, proto.pack_load_volume(str(path))
            ))
            frame = None
            while frame is None or frame.is_event:
                op, payload = ws.recv_message()
                frame, _ = proto.decode_frame(payload)
            assert frame.msg_type == proto.MsgType.VOLUME_META

            msg = proto.SetPromptsMsg(2, 10, 1, PromptSet(positive=((16, 16),)))
            ws.send_binary(proto.encode_frame(proto.MsgType.SET_PROMPTS, msg.pack()))
            frame = None
            while frame is None or frame.is_event:
                op, payload = ws.recv_message()
                frame, _ = proto.decode_frame(payload)
            assert frame.msg_type == proto.MsgType.MASK_RESULT
            result = proto.MaskResultMsg.parse(frame.payload)
            assert result.bitmap().any()
        finally:
            ws.close()

    def test_ping_gets_pong(self, stack):
        gateway = stack[0]
        ws = WsClient(gateway.port)
        try:
            mask = b"\x00\x00\x00\x00"
            ws.sock.sendall(struct.pack("!BB", 0x89, 0x80 | 4) + mask + b"ping")
            op, payload = ws.recv_message()
            assert (op, payload) == (0xA, b"ping")
        finally:
            ws.close()

    def test_plain_get_on_ws_path_400(self, stack):
        gateway = stack[0]
        status, _, _ = get(gateway, "/ws")
        assert status == 400
