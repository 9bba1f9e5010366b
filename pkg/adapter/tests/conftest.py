"""Fixtures: a real segmentation server in a subprocess plus fake predictors.

The server is driven purely over its TCP socket; nothing here imports the
server package. The fixture volume file is written by a local NIfTI-1
writer so the file format is exercised from a second implementation too.
"""

import os
import signal
import socket
import struct
import subprocess
import sys
import threading
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from samworker.predictor import SlicePredictor
from samworker.presets import ModelPreset
from samworker.worker import Worker


def write_nifti(path, data_zyx: np.ndarray, spacing=(1.0, 1.0, 1.0)):
    """float32 single-file NIfTI-1; data arrives as (nz, ny, nx)."""
    nz, ny, nx = data_zyx.shape
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, 16)  # float32
    struct.pack_into("<h", hdr, 72, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[0], spacing[1], spacing[2],
                     0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)    # scl_slope
    struct.pack_into("<h", hdr, 254, 1)      # sform_code
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], 0.0)
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    with open(path, "wb") as f:
        # x varies fastest on disk, which is exactly C order of (z, y, x)
        f.write(bytes(hdr) + b"\x00\x00\x00\x00"
                + np.ascontiguousarray(data_zyx, dtype="<f4").tobytes())


def free_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


@pytest.fixture(scope="session")
def fixture_volume(tmp_path_factory):
    rng = np.random.default_rng(7)
    data = rng.normal(100.0, 15.0, size=(8, 64, 64)).astype(np.float32)
    data[3:5, 20:44, 20:44] += 200.0
    path = tmp_path_factory.mktemp("vol") / "cube.nii"
    write_nifti(path, data)
    return str(path)


@pytest.fixture(scope="session")
def server_proc(tmp_path_factory):
    port = free_port()
    cfg = tmp_path_factory.mktemp("cfg") / "server.conf"
    cfg.write_text(
        f"port = {port}\n"
        "host = 127.0.0.1\n"
        "workers = 2\n"
        "cache_bytes = 268435456\n"
        "log_level = WARNING\n"
    )
    proc = subprocess.Popen(
        [sys.executable, "-m", "voxelprompt", "serve", "--config", str(cfg)],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True)
    line = proc.stdout.readline()
    assert "listening on" in line, f"server failed to start: {line!r}"
    yield ("127.0.0.1", port)
    proc.send_signal(signal.SIGINT)
    try:
        proc.wait(timeout=15)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.wait()


class FakePredictor(SlicePredictor):
    """Deterministic stand-in: boxes fill their rectangle, positive points
    stamp a 9x9 square, negative points clear a 17x17 one, in that order."""

    def __init__(self, input_size=128):
        self.input_size = input_size
        self.embeds = 0
        self.fail_embed = False
        self.fail_predict = False
        self._lock = threading.Lock()

    def embed(self, image):
        if self.fail_embed:
            raise RuntimeError("encoder exploded")
        with self._lock:
            self.embeds += 1
        return image[:, :, 0].copy()

    def predict(self, embedding, point_coords, point_labels, box):
        if self.fail_predict:
            raise RuntimeError("decoder exploded")
        size = self.input_size
        mask = np.zeros((size, size), dtype=bool)
        if box is not None:
            r0, c0, r1, c1 = (int(round(v)) for v in box)
            mask[max(0, r0):r1 + 1, max(0, c0):c1 + 1] = True
        for (r, c), lab in zip(point_coords, point_labels):
            rr, cc = int(round(r)), int(round(c))
            if lab == 1:
                mask[max(0, rr - 4):rr + 5, max(0, cc - 4):cc + 5] = True
            else:
                mask[max(0, rr - 8):rr + 9, max(0, cc - 8):cc + 9] = False
        return mask, 0.875


def start_worker(host, port, model_id, predictor, store_entries=256):
    preset = ModelPreset(model_id, weights="unused", input_size=predictor.input_size,
                         embedding_bytes=64)
    worker = Worker(host, port, preset, predictor, store_entries=store_entries)
    thread = threading.Thread(target=worker.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10
    while not worker.registered:
        if time.monotonic() > deadline:
            worker.close()
            raise RuntimeError(f"worker {model_id} never registered")
        time.sleep(0.01)
    return worker, thread


@pytest.fixture(scope="module")
def fake_worker(server_proc):
    host, port = server_proc
    predictor = FakePredictor(input_size=128)
    worker, thread = start_worker(host, port, "fake_vit", predictor)
    yield worker, predictor
    worker.close()
    thread.join(timeout=5)
