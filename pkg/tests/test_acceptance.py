"""Release acceptance suite: one test per numbered criterion.

Each test carries the ``acceptance`` marker; the terminal summary prints a
pass/fail line per criterion. Everything here goes through public entry
points and, where a criterion demands equivalence, compares against the
independent oracles in oracles.py rather than package internals.
"""

import math
import time

import numpy as np
import pytest

from conftest import _make_volume
from oracles import brute_decode, mesh_edge_census, sweep_box_oracle

from voxelprompt import protocol as proto
from voxelprompt.backend import ModelRegistry, PromptSet, ReferenceBackend
from voxelprompt.bench import run_bench
from voxelprompt.cache import EmbeddingCache, EmbeddingKey, wl_hash
from voxelprompt.nifti import load_volume, save_label_volume, save_volume
from voxelprompt.session import Box3D, DirectRoute, Session
from voxelprompt.surface import extract_surface, mesh_surface_area
from voxelprompt.tasks import Task, TaskKind, TaskQueue
from voxelprompt.volume import (
    LabelVolume,
    Slice2D,
    SliceRef,
    Volume,
    WindowLevel,
    apply_window_level,
    default_window_level,
    extract_slice,
    fresh_volume_id,
)


def _fresh_session(volume, cache_bytes=256 << 20):
    return Session(volume, DirectRoute(ModelRegistry(), EmbeddingCache(cache_bytes)))


def _independent_mask(volume, sref, prompts, wl):
    backend = ReferenceBackend()
    e = backend.encode_slice(apply_window_level(extract_slice(volume, sref), wl))
    return backend.decode_mask(e, prompts)


@pytest.fixture(scope="module")
def full_size_volume_path(tmp_path_factory):
    """256x256x130 noise with an embedded bright ellipsoid."""
    gen = np.random.default_rng(7)
    data = gen.normal(100.0, 20.0, size=(130, 256, 256))
    zz, yy, xx = np.ogrid[0:130, 0:256, 0:256]
    ball = (xx - 128) ** 2 + (yy - 128) ** 2 + ((zz - 65) * 2) ** 2 <= 60**2
    data[ball] += 300.0
    path = tmp_path_factory.mktemp("latency") / "full.nii"
    save_volume(_make_volume(data.astype(np.float32)), path)
    return str(path)


@pytest.mark.acceptance(num=1, name="cycle latency")
def test_full_size_prompt_cycle_latency(full_size_volume_path):
    t0 = time.perf_counter()
    report = run_bench(full_size_volume_path, trials=500, warmup=10, seed=11,
                       out=lambda s: None)
    wall = time.perf_counter() - t0
    assert report.trials == 500
    assert report.mask_cycle_median_s <= 0.060, f"median {report.mask_cycle_median_s:.4f}s"
    assert report.mask_cycle_p99_s <= 0.100, f"p99 {report.mask_cycle_p99_s:.4f}s"
    assert report.inference_median_s <= 0.008, f"decode median {report.inference_median_s:.4f}s"
    assert wall < 120.0, f"bench took {wall:.1f}s"


@pytest.mark.acceptance(num=2, name="propagation equivalence")
def test_propagation_matches_per_slice_inference(cylinder_volume):
    session = _fresh_session(cylinder_volume)
    prompts = PromptSet(positive=((16, 16),), negative=((2, 2),), bbox=(4, 4, 28, 28))
    session.set_prompts(2, prompts, index=10)
    wl = default_window_level(cylinder_volume)
    for k in range(11, 31):
        got = session.propagate_to(SliceRef(2, k))
        want = _independent_mask(cylinder_volume, SliceRef(2, k), prompts, wl)
        assert np.array_equal(got.bitmap, want.bitmap), f"slice {k} diverged"


@pytest.mark.acceptance(num=3, name="3D box / 2D sweep equivalence")
def test_box3d_matches_sequential_sweep():
    gen = np.random.default_rng(13)
    backend = ReferenceBackend()
    for trial in range(50):
        data = gen.normal(80.0, 15.0, size=(32, 32, 32))
        cx, cy, cz = (int(v) for v in gen.integers(6, 26, size=3))
        r = int(gen.integers(4, 10))
        zz, yy, xx = np.ogrid[0:32, 0:32, 0:32]
        data[(xx - cx) ** 2 + (yy - cy) ** 2 + (zz - cz) ** 2 <= r * r] += 120.0
        volume = _make_volume(data.astype(np.float32))
        session = _fresh_session(volume, cache_bytes=64 << 20)
        label = int(gen.integers(1, 6))
        session.set_label(label)
        axis = int(gen.integers(0, 3))
        lo = gen.integers(0, 28, size=3)
        hi = lo + gen.integers(0, 18, size=3)  # may overshoot: exercises clamping
        box = Box3D(int(lo[0]), int(lo[1]), int(lo[2]),
                    int(hi[0]), int(hi[1]), int(hi[2]), axis)
        session.apply_bbox3d(box)

        wl = default_window_level(volume)

        def decode_slice(ax, index, rect):
            e = backend.encode_slice(
                apply_window_level(extract_slice(volume, SliceRef(ax, index)), wl))
            return backend.decode_mask(e, PromptSet(bbox=rect)).bitmap

        want = sweep_box_oracle(decode_slice, volume.dims, axis,
                                (box.i0, box.j0, box.k0, box.i1, box.j1, box.k1),
                                label)
        assert np.array_equal(session.label_volume.labels, want), f"trial {trial}"


def _random_prompts(gen, rows, cols):
    pos = tuple((int(gen.integers(0, rows)), int(gen.integers(0, cols)))
                for _ in range(int(gen.integers(0, 3))))
    neg = tuple((int(gen.integers(0, rows)), int(gen.integers(0, cols)))
                for _ in range(int(gen.integers(0, 3))))
    bbox = None
    if not pos or gen.random() < 0.5:
        r = sorted(int(v) for v in gen.integers(0, rows, size=2))
        c = sorted(int(v) for v in gen.integers(0, cols, size=2))
        bbox = (r[0], c[0], r[1], c[1])
    return PromptSet(pos, neg, bbox)


@pytest.mark.acceptance(num=4, name="decode vs brute-force oracle")
def test_decode_matches_brute_force():
    gen = np.random.default_rng(17)
    backend = ReferenceBackend()
    for trial in range(1000):
        pixels = gen.random((16, 16), dtype=np.float32)
        if trial % 3 == 0:
            # bright block on a dark background: clean two-class histogram
            pixels = pixels * np.float32(0.2)
            r0, c0 = (int(v) for v in gen.integers(0, 10, size=2))
            pixels[r0:r0 + 6, c0:c0 + 6] += np.float32(0.7)
        if trial % 7 == 0:
            pixels[:] = np.float32(gen.random())  # flat: variance gate path
        s = Slice2D(16, 16, pixels, SliceRef(2, 0))
        prompts = _random_prompts(gen, 16, 16)

        got = backend.decode_mask(backend.encode_slice(s), prompts)
        q8 = np.rint(pixels.astype(np.float64) * 255.0).astype(np.uint8)
        want_bitmap, want_score = brute_decode(
            q8, prompts.positive, prompts.negative, prompts.bbox)
        assert np.array_equal(got.bitmap, want_bitmap), f"trial {trial}"
        assert got.score == want_score, f"trial {trial}: {got.score} != {want_score}"


def _fuzz_pool():
    """Valid frames of every message shape, both directions."""
    bitmap = np.zeros((24, 24), dtype=np.uint8)
    bitmap[4:12, 6:20] = 1
    rle = proto.rle_encode(bitmap)
    prompts = PromptSet(positive=((3, 4), (5, 6)), negative=((1, 1),), bbox=(2, 2, 20, 21))
    M = proto.MsgType
    return [
        proto.encode_frame(M.HELLO),
        proto.encode_frame(M.HELLO, proto.HelloReply("voxelprompt", "1.0.0").pack()),
        proto.encode_frame(M.LOAD_VOLUME, proto.pack_load_volume("/data/scan.nii")),
        proto.encode_frame(M.VOLUME_META, proto.VolumeMeta(
            9, (64, 64, 32), (1.0, 1.0, 2.0), np.eye(4), 0.0, 255.0).pack()),
        proto.encode_frame(M.SET_WINDOW_LEVEL, proto.pack_set_window_level(350.0, 40.0)),
        proto.encode_frame(M.SELECT_MODEL, proto.pack_select_model("reference")),
        proto.encode_frame(M.SET_PROMPTS, proto.SetPromptsMsg(2, 16, 1, prompts).pack()),
        proto.encode_frame(M.PROPAGATE_TO, proto.PropagateToMsg(2, 17).pack()),
        proto.encode_frame(M.APPLY_BBOX3D, proto.ApplyBbox3DMsg(
            1, 2, False, (1, 2, 3, 10, 11, 12)).pack()),
        proto.encode_frame(M.MASK_RESULT, proto.MaskResultMsg(
            2, 16, 1, 0.75, 412, rle).pack(), flags=proto.FLAG_MORE),
        proto.encode_frame(M.PRECOMPUTE_STATUS, proto.PrecomputeStatusMsg(
            9, (1.0, 0.5, 0.0)).pack(), flags=proto.FLAG_EVENT),
        proto.encode_frame(M.UNDO),
        proto.encode_frame(M.UNDO, proto.UndoReply(2, 16).pack()),
        proto.encode_frame(M.EXPORT_LABELS, proto.pack_export_labels(
            proto.EXPORT_MODE_FILE, "/tmp/out.nii")),
        proto.encode_frame(M.EXPORT_LABELS, proto.ExportChunk(
            128, np.arange(50, dtype=np.uint16)).pack(), flags=proto.FLAG_MORE),
        proto.encode_frame(M.ERROR, proto.ErrorMsg(
            int(M.SET_PROMPTS), proto.ERR_BAD_PAYLOAD, "bad").pack()),
        proto.encode_frame(M.REGISTER_WORKER, proto.RegisterWorkerMsg(
            "sam_vit_b", 17 << 20).pack()),
        proto.encode_frame(M.ENCODE_REQUEST, proto.EncodeRequestMsg(
            7, 9, 2, 16, 123, 8, 8, np.zeros((8, 8), np.float32)).pack()),
        proto.encode_frame(M.ENCODE_RESULT, proto.EncodeResultMsg(
            7, True, 8, 8, b"x" * 64).pack()),
        proto.encode_frame(M.ENCODE_RESULT, proto.EncodeResultMsg(
            7, False, detail="boom").pack()),
        proto.encode_frame(M.DECODE_REQUEST, proto.DecodeRequestMsg(
            8, 9, 2, 16, 123, 24, 24, prompts).pack()),
        proto.encode_frame(M.DECODE_RESULT, proto.DecodeResultMsg(
            8, proto.DECODE_OK, 0.5, rle).pack()),
        proto.encode_frame(M.DECODE_RESULT, proto.DecodeResultMsg(
            8, proto.DECODE_MISSING_EMBEDDING, detail="gone").pack()),
    ]


_PARSERS = {
    int(proto.MsgType.HELLO): (proto.HelloReply.parse,),
    int(proto.MsgType.LOAD_VOLUME): (proto.parse_load_volume,),
    int(proto.MsgType.VOLUME_META): (proto.VolumeMeta.parse,),
    int(proto.MsgType.SET_WINDOW_LEVEL): (proto.parse_set_window_level,),
    int(proto.MsgType.SELECT_MODEL): (proto.parse_select_model,),
    int(proto.MsgType.LIST_MODELS): (proto.parse_model_list,),
    int(proto.MsgType.SET_PROMPTS): (proto.SetPromptsMsg.parse,),
    int(proto.MsgType.PROPAGATE_TO): (proto.PropagateToMsg.parse,),
    int(proto.MsgType.APPLY_BBOX3D): (proto.ApplyBbox3DMsg.parse,),
    int(proto.MsgType.MASK_RESULT): (proto.MaskResultMsg.parse,),
    int(proto.MsgType.PRECOMPUTE_STATUS): (proto.PrecomputeStatusMsg.parse,),
    int(proto.MsgType.UNDO): (proto.UndoReply.parse,),
    int(proto.MsgType.EXPORT_LABELS): (proto.parse_export_labels, proto.ExportChunk.parse),
    int(proto.MsgType.ERROR): (proto.ErrorMsg.parse,),
    int(proto.MsgType.REGISTER_WORKER): (proto.RegisterWorkerMsg.parse,),
    int(proto.MsgType.ENCODE_REQUEST): (proto.EncodeRequestMsg.parse,),
    int(proto.MsgType.ENCODE_RESULT): (proto.EncodeResultMsg.parse,),
    int(proto.MsgType.DECODE_REQUEST): (proto.DecodeRequestMsg.parse,),
    int(proto.MsgType.DECODE_RESULT): (proto.DecodeResultMsg.parse,),
}


@pytest.mark.acceptance(num=5, name="codec round-trip and fuzz")
def test_codec_round_trips_and_survives_fuzzing():
    gen = np.random.default_rng(23)

    for _ in range(10_000):
        msg_type = int(gen.integers(0, 256))
        flags = int(gen.integers(0, 4))
        payload = gen.bytes(int(gen.integers(0, 600)))
        raw = proto.encode_frame(msg_type, payload, flags=flags)
        frame, used = proto.decode_frame(raw)
        assert used == len(raw)
        assert (frame.msg_type, frame.flags, frame.payload) == (msg_type, flags, payload)

    for _ in range(10_000):
        rows = int(gen.integers(1, 48))
        cols = int(gen.integers(1, 48))
        bitmap = (gen.random((rows, cols)) < gen.random()).astype(np.uint8)
        assert np.array_equal(proto.rle_decode(proto.rle_encode(bitmap)), bitmap)

    # fuzz: mutate valid frames a million+ times; any outcome but a clean
    # parse or a codec error is a crash
    pool = [bytes(f) for f in _fuzz_pool()]
    n_cases = 1_200_000
    which = gen.integers(0, len(pool), size=n_cases).tolist()
    ops = gen.integers(0, 8, size=n_cases).tolist()
    positions = gen.integers(0, 1 << 30, size=n_cases).tolist()
    values = gen.integers(0, 256, size=n_cases).tolist()
    garbage = gen.bytes(64)
    codec_errors = (proto.ProtocolError, proto.PayloadError, proto.IncompleteFrame)

    parsed = rejected = 0
    for i in range(n_cases):
        op = ops[i]
        if op == 0:
            buf = pool[which[i]][: positions[i] % (len(pool[which[i]]) + 1)]
        elif op == 1:
            buf = pool[which[i]] + garbage[: values[i] % 16]
        elif op == 7:
            start = values[i] % 32
            buf = garbage[start : start + positions[i] % 33]
        else:
            mutable = bytearray(pool[which[i]])
            mutable[positions[i] % len(mutable)] = values[i]
            buf = bytes(mutable)
        try:
            frame, _ = proto.decode_frame(buf)
        except codec_errors:
            rejected += 1
            continue
        parsed += 1
        for parse in _PARSERS.get(frame.msg_type, ()):
            try:
                parse(frame.payload)
            except proto.PayloadError:
                pass
        if i % 64 == 0:
            # same bytes through the incremental path, sandwiched in noise
            try:
                proto.StreamDecoder().feed(buf + pool[0] + garbage)
            except codec_errors:
                pass
    assert parsed + rejected == n_cases
    assert parsed > 0 and rejected > 0  # the mutator reached both regimes


@pytest.mark.acceptance(num=6, name="cache correctness")
def test_cache_keyed_miss_and_byte_cap():
    backend = ReferenceBackend()
    e = backend.encode_slice(
        Slice2D(8, 8, np.linspace(0, 1, 64, dtype=np.float32).reshape(8, 8),
                SliceRef(2, 0)))

    # window/level is part of the key: changing it can never serve the old blob
    cache = EmbeddingCache(1 << 20)
    key_a = EmbeddingKey(1, "reference", 2, 0, wl_hash(WindowLevel(100.0, 50.0)))
    key_b = EmbeddingKey(1, "reference", 2, 0, wl_hash(WindowLevel(200.0, 50.0)))
    cache.put(key_a, e)
    assert cache.get(key_b) is None
    assert cache.get(key_a) is e

    # 2x overcommit: cap always honored, oldest half evicted
    cap = 64 * len(e.blob)
    cache = EmbeddingCache(cap)
    for i in range(128):
        cache.put(EmbeddingKey(7, "reference", 2, i, 0), e)
        assert cache.stats().total_bytes <= cap
    assert cache.stats().entries == 64
    for i in range(64):
        assert cache.get(EmbeddingKey(7, "reference", 2, i, 0)) is None
    for i in range(64, 128):
        assert cache.get(EmbeddingKey(7, "reference", 2, i, 0)) is e


@pytest.mark.acceptance(num=7, name="NIfTI round-trip")
def test_nifti_round_trip_exactness(tmp_path):
    gen = np.random.default_rng(29)
    data = gen.normal(0.0, 100.0, size=(9, 7, 5)).astype(np.float32)
    # header floats are f32: keep the affine exactly representable
    affine = np.array([
        [0.5, 0.0, 0.0, -12.25],
        [0.0, -0.25, 0.0, 100.5],
        [0.0, 0.0, 2.5, 30.125],
        [0.0, 0.0, 0.0, 1.0],
    ])
    volume = Volume(fresh_volume_id(), (5, 7, 9), (0.5, 0.25, 2.5), affine, data)

    p1, p2 = tmp_path / "a.nii", tmp_path / "b.nii"
    save_volume(volume, p1)
    v1 = load_volume(p1)
    save_volume(v1, p2)
    v2 = load_volume(p2)
    assert v1.data.tobytes() == data.tobytes()  # 0 ULP
    assert v2.data.tobytes() == data.tobytes()
    assert v1.dims == (5, 7, 9) and v2.dims == (5, 7, 9)
    np.testing.assert_allclose(v1.affine, affine, atol=1e-6)
    np.testing.assert_allclose(v2.affine, v1.affine, atol=1e-6)

    labels = gen.integers(0, 65536, size=(9, 7, 5)).astype(np.uint16)
    lv = LabelVolume(volume.volume_id, volume.dims, labels)
    lp = tmp_path / "labels.nii"
    save_label_volume(lv, volume, lp)
    back = load_volume(lp)
    assert np.array_equal(back.data.astype(np.uint16), labels)
    np.testing.assert_allclose(back.affine, affine, atol=1e-6)


@pytest.mark.acceptance(num=8, name="surface extraction")
def test_sphere_mesh_closed_and_sized(sphere_labels):
    lv, parent, radius = sphere_labels
    mesh = extract_surface(lv, parent, 1)
    census = mesh_edge_census(mesh.triangles)
    assert set(census.values()) == {2}, "mesh is not closed"
    area = mesh_surface_area(mesh)
    want = 4.0 * math.pi * radius**2
    assert abs(area - want) / want <= 0.05


@pytest.mark.acceptance(num=9, name="scheduler priority")
def test_precompute_never_outranks_pending_interactive():
    gen = np.random.default_rng(31)
    for _ in range(10):
        queue = TaskQueue()
        p_interactive = float(gen.uniform(0.1, 0.9))
        remaining = 1000
        pending_interactive = pending_precompute = 0
        while remaining or pending_interactive or pending_precompute:
            backlog = pending_interactive + pending_precompute
            if remaining and (backlog == 0 or gen.random() < 0.5):
                if gen.random() < p_interactive:
                    queue.schedule(Task(kind=TaskKind.INTERACTIVE_DECODE))
                    pending_interactive += 1
                else:
                    queue.schedule(Task(kind=TaskKind.PRECOMPUTE_ENCODE))
                    pending_precompute += 1
                remaining -= 1
            else:
                task = queue.next_task(block=False)
                assert task is not None
                if task.kind == TaskKind.PRECOMPUTE_ENCODE:
                    assert pending_interactive == 0, \
                        "precompute dequeued ahead of a pending interactive task"
                    pending_precompute -= 1
                else:
                    pending_interactive -= 1
        queue.close()
