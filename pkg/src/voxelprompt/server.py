"""TCP server: connection handling, session registry, worker routing, and the
priority queue that keeps embedding precompute beneath interactive traffic.

Threads: one acceptor, one reader per connection, and a task pool of
``config.workers`` threads of which the first only ever takes interactive
tasks, so a queued wall of precompute work can never delay a prompt.
"""

from __future__ import annotations

import itertools
import logging
import socket
import struct
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import protocol as proto
from .backend import (
    Embedding,
    KIND_EXTERNAL,
    ModelDescriptor,
    ModelRegistry,
    PromptSet,
)
from .cache import EmbeddingCache, EmbeddingKey, precompute_plan, wl_hash
from .config import ServerConfig
from .nifti import NiftiError, load_volume, save_label_volume
from .session import Box3D, Session, SessionError
from .tasks import Task, TaskKind, TaskQueue
from .volume import (
    SliceRef,
    WindowLevel,
    apply_window_level,
    extract_slice,
    slice_shape,
)

log = logging.getLogger("voxelprompt.server")

_EXPORT_CHUNK_VOXELS = 1 << 20


class WorkerLostError(Exception):
    pass


class EmptyUndoError(SessionError):
    pass


@dataclass(eq=False)
class _ConnState:
    sock: socket.socket
    addr: tuple
    send_lock: threading.Lock = field(default_factory=threading.Lock)
    session: Optional[Session] = None
    worker_model: Optional[str] = None
    precompute_gen: int = 0
    closed: bool = False

    def send_frame(self, data: bytes) -> None:
        # one frame per sendall keeps event interleaving frame-atomic
        with self.send_lock:
            if not self.closed:
                self.sock.sendall(data)


class _WorkerLink:
    """Routes encode/decode requests to one registered worker connection."""

    def __init__(self, model_id: str, state: _ConnState):
        self.model_id = model_id
        self.state = state
        self.pending: Dict[int, Future] = {}
        self.lock = threading.Lock()
        self.alive = True

    def request(self, request_id: int, frame: bytes, timeout: float):
        fut: Future = Future()
        with self.lock:
            if not self.alive:
                raise WorkerLostError(f"worker {self.model_id!r} is gone")
            self.pending[request_id] = fut
        try:
            self.state.send_frame(frame)
            return fut.result(timeout=timeout)
        except TimeoutError:
            raise WorkerLostError(f"worker {self.model_id!r} timed out")
        except OSError:
            raise WorkerLostError(f"worker {self.model_id!r} connection failed")
        finally:
            with self.lock:
                self.pending.pop(request_id, None)

    def resolve(self, request_id: int, result) -> None:
        with self.lock:
            fut = self.pending.pop(request_id, None)
        if fut is not None:
            fut.set_result(result)

    def fail_all(self) -> None:
        with self.lock:
            self.alive = False
            pending, self.pending = self.pending, {}
        for fut in pending.values():
            fut.set_exception(WorkerLostError(f"worker {self.model_id!r} disconnected"))


@dataclass
class _PrecomputeJob:
    volume_id: int
    model_id: str
    sref: SliceRef
    wl: WindowLevel
    generation: int


class ServerRoute:
    """Session-facing inference route that dispatches builtin models directly
    and external models through their worker link."""

    def __init__(self, server: "VoxelPromptServer"):
        self.server = server

    def embedding(self, volume, model_id, sref, wl):
        srv = self.server
        key = EmbeddingKey(volume.volume_id, model_id, sref.axis, sref.index, wl_hash(wl))
        e = srv.cache.get(key)
        if e is not None:
            return e
        desc, handler = srv.registry.get(model_id)
        norm = apply_window_level(extract_slice(volume, sref), wl)
        if desc.kind == KIND_EXTERNAL:
            e = srv._worker_encode(model_id, key, norm)
        else:
            e = handler.encode_slice(norm)
        srv.cache.put(key, e)
        return e

    def decode(self, model_id, e, p, volume=None, sref=None, wl=None):
        srv = self.server
        desc, handler = srv.registry.get(model_id)
        if desc.kind != KIND_EXTERNAL:
            return handler.decode_mask(e, p)
        return srv._worker_decode(model_id, e, p, volume, sref, wl)


class VoxelPromptServer:
    def __init__(self, config: Optional[ServerConfig] = None, port: Optional[int] = None):
        self.config = config or ServerConfig()
        self._port_override = port
        self.registry = ModelRegistry()
        self.cache = EmbeddingCache(self.config.cache_bytes)
        self.queue = TaskQueue()
        self.route = ServerRoute(self)
        self.volumes: Dict[int, object] = {}
        self.sessions_by_volume: Dict[int, Session] = {}
        self.workers: Dict[str, _WorkerLink] = {}
        self._state_lock = threading.Lock()
        self._request_ids = itertools.count(1)
        self._threads: list = []
        self._listener: Optional[socket.socket] = None
        self._conns: set = set()
        self._stopping = False
        self.port: Optional[int] = None

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> int:
        port = self._port_override if self._port_override is not None else self.config.port
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.config.host, port))
        sock.listen(64)
        # a blocked accept() pins the socket past close(); poll instead
        sock.settimeout(0.2)
        self._listener = sock
        self.port = sock.getsockname()[1]
        t = threading.Thread(target=self._accept_loop, name="vp-accept", daemon=True)
        t.start()
        self._threads.append(t)
        for i in range(max(2, self.config.workers)):
            t = threading.Thread(
                target=self._pool_loop,
                args=(i == 0,),
                name=f"vp-pool-{i}",
                daemon=True,
            )
            t.start()
            self._threads.append(t)
        log.info("listening on %s:%d", self.config.host, self.port)
        return self.port

    def stop(self) -> None:
        self._stopping = True
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._state_lock:
            conns = list(self._conns)
        for st in conns:
            try:
                # shutdown (not close) wakes the reader blocked in recv
                st.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self.queue.close()
        for t in self._threads:
            t.join(timeout=5.0)

    def _accept_loop(self):
        while not self._stopping:
            try:
                sock, addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.settimeout(None)  # accepted sockets inherit the listener timeout
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            st = _ConnState(sock, addr)
            with self._state_lock:
                self._conns.add(st)
            threading.Thread(
                target=self._serve_conn, args=(st,), name=f"vp-conn-{addr[1]}", daemon=True
            ).start()

    def _pool_loop(self, interactive_only: bool):
        while True:
            task = self.queue.next_task(block=True, interactive_only=interactive_only, timeout=0.5)
            if task is None:
                if self._stopping:
                    return
                continue
            try:
                if task.fn is not None:
                    task.fn()
            except Exception:
                log.exception("task failed")

    # -- connection handling --------------------------------------------------

    def _serve_conn(self, st: _ConnState):
        decoder = proto.StreamDecoder()
        try:
            while True:
                data = st.sock.recv(1 << 16)
                if not data:
                    return
                try:
                    frames = decoder.feed(data)
                except proto.ProtocolError as exc:
                    log.info("framing error from %s: %s", st.addr, exc)
                    return
                for frame in frames:
                    self._dispatch(st, frame)
        except OSError:
            return
        finally:
            self._drop_conn(st)

    def _drop_conn(self, st: _ConnState):
        st.closed = True
        with self._state_lock:
            self._conns.discard(st)
        try:
            st.sock.close()
        except OSError:
            pass
        if st.worker_model is not None:
            self._deregister_worker(st.worker_model)
        if st.session is not None:
            vid = st.session.volume.volume_id
            self._unload_volume(vid)
            st.session = None

    def _unload_volume(self, volume_id: int):
        with self._state_lock:
            self.volumes.pop(volume_id, None)
            self.sessions_by_volume.pop(volume_id, None)
        self.queue.cancel_precompute(
            lambda t: isinstance(t.payload, _PrecomputeJob) and t.payload.volume_id == volume_id
        )
        self.cache.invalidate(volume_id)

    def _deregister_worker(self, model_id: str):
        with self._state_lock:
            link = self.workers.pop(model_id, None)
        if link is not None:
            link.fail_all()
        try:
            self.registry.deregister(model_id)
        except ValueError:
            pass

    # -- dispatch --------------------------------------------------------------

    def _dispatch(self, st: _ConnState, frame: proto.Frame):
        t0 = time.perf_counter_ns()
        sess_id = st.session.session_id if st.session else 0
        try:
            handler = _HANDLERS.get(frame.msg_type)
            if handler is None:
                self._error(st, frame, proto.ERR_UNSUPPORTED, f"unsupported message type 0x{frame.msg_type:02X}")
                return
            handler(self, st, frame)
        except proto.PayloadError as exc:
            self._error(st, frame, proto.ERR_BAD_PAYLOAD, str(exc))
        except _NoSession:
            self._error(st, frame, proto.ERR_UNKNOWN_VOLUME, "no volume loaded on this connection")
        except KeyError as exc:
            self._error(st, frame, proto.ERR_UNKNOWN_MODEL, str(exc.args[0]) if exc.args else "unknown model")
        except EmptyUndoError as exc:
            self._error(st, frame, proto.ERR_EMPTY_UNDO, str(exc))
        except WorkerLostError as exc:
            self._error(st, frame, proto.ERR_WORKER_LOST, str(exc))
        except (SessionError, NiftiError, ValueError, IndexError, OSError) as exc:
            self._error(st, frame, proto.ERR_BAD_PAYLOAD, str(exc))
        finally:
            us = (time.perf_counter_ns() - t0) // 1000
            log.info(
                "handled session=%d type=0x%02X latency_us=%d", sess_id, frame.msg_type, us
            )

    def _error(self, st: _ConnState, frame: proto.Frame, code: int, detail: str):
        payload = proto.ErrorMsg(frame.msg_type, code, detail).pack()
        try:
            st.send_frame(proto.encode_frame(proto.MsgType.ERROR, payload))
        except OSError:
            pass

    def _run_interactive(self, session_id: int, fn):
        fut: Future = Future()

        def run():
            try:
                fut.set_result(fn())
            except BaseException as exc:
                fut.set_exception(exc)

        try:
            self.queue.schedule(Task(TaskKind.INTERACTIVE_DECODE, session_id=session_id, fn=run))
        except RuntimeError:
            raise SessionError("server is shutting down")
        return fut.result()

    def _session(self, st: _ConnState) -> Session:
        if st.session is None:
            raise _NoSession()
        return st.session

    # -- precompute ------------------------------------------------------------

    def _replan(self, st: _ConnState):
        sess = st.session
        if sess is None:
            return
        vid = sess.volume.volume_id
        st.precompute_gen += 1
        gen = st.precompute_gen
        self.queue.cancel_precompute(
            lambda t: isinstance(t.payload, _PrecomputeJob) and t.payload.volume_id == vid
        )
        wlh = wl_hash(sess.wl)
        model = sess.model_id
        for sref in precompute_plan(sess.volume.dims, sess.current):
            key = EmbeddingKey(vid, model, sref.axis, sref.index, wlh)
            if key in self.cache:
                continue
            job = _PrecomputeJob(vid, model, sref, sess.wl, gen)
            try:
                self.queue.schedule(
                    Task(
                        TaskKind.PRECOMPUTE_ENCODE,
                        session_id=sess.session_id,
                        payload=job,
                        fn=lambda j=job, s=st: self._do_precompute(s, j),
                        generation=gen,
                    )
                )
            except RuntimeError:
                return  # shutting down


    def _do_precompute(self, st: _ConnState, job: _PrecomputeJob):
        if st.closed or job.generation != st.precompute_gen:
            return
        with self._state_lock:
            volume = self.volumes.get(job.volume_id)
        if volume is None:
            return
        try:
            self.route.embedding(volume, job.model_id, job.sref, job.wl)
        except (WorkerLostError, KeyError):
            return
        self._emit_status(st, job.volume_id, job.model_id, job.wl)

    def _emit_status(self, st: _ConnState, volume_id: int, model_id: str, wl: WindowLevel):
        with self._state_lock:
            volume = self.volumes.get(volume_id)
        if volume is None or st.closed:
            return
        fr = self.cache.status(volume_id, model_id, wl_hash(wl), volume.dims)
        payload = proto.PrecomputeStatusMsg(volume_id, fr).pack()
        try:
            st.send_frame(
                proto.encode_frame(proto.MsgType.PRECOMPUTE_STATUS, payload, flags=proto.FLAG_EVENT)
            )
        except OSError:
            pass

    # -- worker routing ----------------------------------------------------------

    def _worker_link(self, model_id: str) -> _WorkerLink:
        with self._state_lock:
            link = self.workers.get(model_id)
        if link is None:
            raise WorkerLostError(f"worker {model_id!r} is not connected")
        return link

    def _worker_encode(self, model_id: str, key: EmbeddingKey, norm) -> Embedding:
        link = self._worker_link(model_id)
        rid = next(self._request_ids)
        msg = proto.EncodeRequestMsg(
            rid, key.volume_id, key.axis, key.slice_index, key.wl_hash,
            norm.rows, norm.cols, norm.pixels,
        )
        frame = proto.encode_frame(proto.MsgType.ENCODE_REQUEST, msg.pack())
        res = link.request(rid, frame, self.config.worker_timeout_s)
        if not isinstance(res, proto.EncodeResultMsg) or not res.ok:
            detail = getattr(res, "detail", "encode failed")
            raise WorkerLostError(f"worker {model_id!r} encode failed: {detail}")
        return Embedding(model_id, res.rows, res.cols, res.blob)

    def _worker_decode(self, model_id: str, e: Embedding, p: PromptSet, volume, sref, wl):
        link = self._worker_link(model_id)
        key = EmbeddingKey(volume.volume_id, model_id, sref.axis, sref.index, wl_hash(wl))

        for attempt in (0, 1):
            rid = next(self._request_ids)
            msg = proto.DecodeRequestMsg(
                rid, key.volume_id, key.axis, key.slice_index, key.wl_hash,
                e.rows, e.cols, p,
            )
            frame = proto.encode_frame(proto.MsgType.DECODE_REQUEST, msg.pack())
            res = link.request(rid, frame, self.config.worker_timeout_s)
            if not isinstance(res, proto.DecodeResultMsg):
                raise WorkerLostError(f"worker {model_id!r} sent an unexpected reply")
            if res.status == proto.DECODE_OK:
                bitmap = proto.rle_decode(res.mask)
                from .backend import MaskResult

                return MaskResult(bitmap, min(1.0, max(0.0, res.score)), model_id)
            if res.status == proto.DECODE_MISSING_EMBEDDING and attempt == 0:
                # the worker restarted without its store; recompute through it
                norm = apply_window_level(extract_slice(volume, sref), wl)
                self.cache.put(key, self._worker_encode(model_id, key, norm))
                continue
            raise WorkerLostError(f"worker {model_id!r} decode failed: {res.detail}")

    # -- handlers -----------------------------------------------------------------

    def _on_hello(self, st, frame):
        from . import __version__

        payload = proto.HelloReply("voxelprompt", __version__).pack()
        st.send_frame(proto.encode_frame(proto.MsgType.HELLO, payload))

    def _on_load_volume(self, st, frame):
        path = proto.parse_load_volume(frame.payload)
        volume = load_volume(path)
        if st.session is not None:
            self._unload_volume(st.session.volume.volume_id)
        session = Session(volume, self.route)
        st.session = session
        with self._state_lock:
            self.volumes[volume.volume_id] = volume
            self.sessions_by_volume[volume.volume_id] = session
        meta = proto.VolumeMeta(
            volume.volume_id,
            volume.dims,
            volume.spacing,
            volume.affine,
            float(volume.data.min()),
            float(volume.data.max()),
        )
        st.send_frame(proto.encode_frame(proto.MsgType.VOLUME_META, meta.pack()))
        self._replan(st)

    def _on_set_window_level(self, st, frame):
        w, l = proto.parse_set_window_level(frame.payload)
        sess = self._session(st)
        sess.set_window_level(WindowLevel(w, l))
        st.send_frame(proto.encode_frame(proto.MsgType.SET_WINDOW_LEVEL))
        self._replan(st)

    def _on_select_model(self, st, frame):
        model_id = proto.parse_select_model(frame.payload)
        sess = self._session(st)
        self.registry.get(model_id)  # raises KeyError -> ERROR 4
        sess.select_model(model_id)
        st.send_frame(proto.encode_frame(proto.MsgType.SELECT_MODEL))
        self._replan(st)

    def _on_list_models(self, st, frame):
        payload = proto.pack_model_list(self.registry.list_models())
        st.send_frame(proto.encode_frame(proto.MsgType.LIST_MODELS, payload))

    def _on_set_prompts(self, st, frame):
        msg = proto.SetPromptsMsg.parse(frame.payload)
        sess = self._session(st)
        sess.set_label(msg.label)

        def work():
            return sess.set_prompts(msg.axis, msg.prompts, index=msg.slice_index)

        mr = self._run_interactive(sess.session_id, work)
        out = proto.MaskResultMsg(
            msg.axis, msg.slice_index, msg.label, mr.score, sess.last_decode_us,
            proto.rle_encode(mr.bitmap),
        )
        st.send_frame(proto.encode_frame(proto.MsgType.MASK_RESULT, out.pack()))
        self._replan(st)

    def _on_propagate_to(self, st, frame):
        msg = proto.PropagateToMsg.parse(frame.payload)
        sess = self._session(st)

        def work():
            return sess.propagate_to(SliceRef(msg.axis, msg.slice_index))

        mr = self._run_interactive(sess.session_id, work)
        out = proto.MaskResultMsg(
            msg.axis, msg.slice_index, sess.label, mr.score, sess.last_decode_us,
            proto.rle_encode(mr.bitmap),
        )
        st.send_frame(proto.encode_frame(proto.MsgType.MASK_RESULT, out.pack()))
        self._replan(st)

    def _on_apply_bbox3d(self, st, frame):
        msg = proto.ApplyBbox3DMsg.parse(frame.payload)
        sess = self._session(st)
        sess.set_label(msg.label)
        i0, j0, k0, i1, j1, k1 = msg.bounds
        try:
            box = Box3D(i0, j0, k0, i1, j1, k1, msg.propagation_axis)
        except ValueError as exc:
            raise proto.PayloadError(str(exc))
        clamped = box.clamped(sess.volume.dims)
        if clamped is None:
            raise SessionError("box does not intersect the volume")
        total = len(clamped.slice_range())
        sent = [0]

        def on_slice(sref, mr):
            sent[0] += 1
            flags = proto.FLAG_MORE if sent[0] < total else 0
            out = proto.MaskResultMsg(
                sref.axis, sref.index, msg.label, mr.score, sess.last_decode_us,
                proto.rle_encode(mr.bitmap),
            )
            st.send_frame(proto.encode_frame(proto.MsgType.MASK_RESULT, out.pack(), flags=flags))

        def work():
            if msg.adjust:
                return sess.adjust_bbox3d(box, on_slice=on_slice)
            return sess.apply_bbox3d(box, on_slice=on_slice)

        self._run_interactive(sess.session_id, work)
        self._replan(st)

    def _on_undo(self, st, frame):
        sess = self._session(st)
        try:
            restored = self._run_interactive(sess.session_id, sess.undo)
        except SessionError as exc:
            raise EmptyUndoError(str(exc))
        out = proto.UndoReply(restored.axis, restored.index)
        st.send_frame(proto.encode_frame(proto.MsgType.UNDO, out.pack()))

    def _on_export_labels(self, st, frame):
        mode, path = proto.parse_export_labels(frame.payload)
        sess = self._session(st)
        if mode == proto.EXPORT_MODE_FILE:
            save_label_volume(sess.label_volume, sess.volume, path)
            st.send_frame(
                proto.encode_frame(
                    proto.MsgType.EXPORT_LABELS, proto.pack_export_labels(mode, path)
                )
            )
            return
        flat = sess.label_volume.labels.ravel()
        total = flat.size
        offset = 0
        while True:
            count = min(_EXPORT_CHUNK_VOXELS, total - offset)
            chunk = proto.ExportChunk(offset, flat[offset : offset + count])
            offset += count
            flags = proto.FLAG_MORE if offset < total else 0
            st.send_frame(
                proto.encode_frame(proto.MsgType.EXPORT_LABELS, chunk.pack(), flags=flags)
            )
            if offset >= total:
                break

    def _on_precompute_status(self, st, frame):
        proto.Cursor(frame.payload).done()
        sess = self._session(st)
        vid = sess.volume.volume_id
        fr = self.cache.status(vid, sess.model_id, wl_hash(sess.wl), sess.volume.dims)
        payload = proto.PrecomputeStatusMsg(vid, fr).pack()
        st.send_frame(proto.encode_frame(proto.MsgType.PRECOMPUTE_STATUS, payload))

    def _on_register_worker(self, st, frame):
        msg = proto.RegisterWorkerMsg.parse(frame.payload)
        link = _WorkerLink(msg.model_id, st)
        desc = ModelDescriptor(msg.model_id, KIND_EXTERNAL, msg.embedding_bytes_estimate)
        with self._state_lock:
            if msg.model_id in self.workers:
                self._error(st, frame, proto.ERR_DUPLICATE_WORKER,
                            f"model {msg.model_id!r} already has a worker")
                return
            self.workers[msg.model_id] = link
        try:
            self.registry.register(desc, link)
        except KeyError:
            with self._state_lock:
                self.workers.pop(msg.model_id, None)
            self._error(st, frame, proto.ERR_DUPLICATE_WORKER,
                        f"model {msg.model_id!r} already registered")
            return
        st.worker_model = msg.model_id
        st.send_frame(proto.encode_frame(proto.MsgType.REGISTER_WORKER))

    def _on_worker_result(self, st, frame):
        if st.worker_model is None:
            self._error(st, frame, proto.ERR_UNSUPPORTED, "not a registered worker")
            return
        link = self._worker_link(st.worker_model)
        if frame.msg_type == proto.MsgType.ENCODE_RESULT:
            msg = proto.EncodeResultMsg.parse(frame.payload)
        else:
            msg = proto.DecodeResultMsg.parse(frame.payload)
        link.resolve(msg.request_id, msg)


class _NoSession(Exception):
    pass


_HANDLERS = {
    proto.MsgType.HELLO: VoxelPromptServer._on_hello,
    proto.MsgType.LOAD_VOLUME: VoxelPromptServer._on_load_volume,
    proto.MsgType.SET_WINDOW_LEVEL: VoxelPromptServer._on_set_window_level,
    proto.MsgType.SELECT_MODEL: VoxelPromptServer._on_select_model,
    proto.MsgType.LIST_MODELS: VoxelPromptServer._on_list_models,
    proto.MsgType.SET_PROMPTS: VoxelPromptServer._on_set_prompts,
    proto.MsgType.PROPAGATE_TO: VoxelPromptServer._on_propagate_to,
    proto.MsgType.APPLY_BBOX3D: VoxelPromptServer._on_apply_bbox3d,
    proto.MsgType.UNDO: VoxelPromptServer._on_undo,
    proto.MsgType.EXPORT_LABELS: VoxelPromptServer._on_export_labels,
    proto.MsgType.PRECOMPUTE_STATUS: VoxelPromptServer._on_precompute_status,
    proto.MsgType.REGISTER_WORKER: VoxelPromptServer._on_register_worker,
    proto.MsgType.ENCODE_RESULT: VoxelPromptServer._on_worker_result,
    proto.MsgType.DECODE_RESULT: VoxelPromptServer._on_worker_result,
}
