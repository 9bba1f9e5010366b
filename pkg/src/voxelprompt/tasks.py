"""Priority task queue: interactive decodes always outrank precompute encodes,
FIFO within each kind.  next_task blocks on a condition variable (no spinning).
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional


class TaskKind(IntEnum):
    INTERACTIVE_DECODE = 0
    PRECOMPUTE_ENCODE = 1


@dataclass
class Task:
    kind: TaskKind
    session_id: int = 0
    payload: object = None
    fn: Optional[Callable[[], None]] = None
    enqueue_seq: int = field(default=-1)  # assigned by the queue
    generation: int = 0                   # precompute tasks of a stale generation are dropped


class TaskQueue:
    def __init__(self):
        self._cond = threading.Condition()
        self._interactive = deque()
        self._precompute = deque()
        self._seq = 0
        self._closed = False

    def schedule(self, t: Task) -> None:
        with self._cond:
            if self._closed:
                raise RuntimeError("queue is closed")
            t.enqueue_seq = self._seq
            self._seq += 1
            if t.kind == TaskKind.INTERACTIVE_DECODE:
                self._interactive.append(t)
            else:
                self._precompute.append(t)
            self._cond.notify()

    def next_task(self, block: bool = True, interactive_only: bool = False,
                  timeout: Optional[float] = None) -> Optional[Task]:
        """Highest-priority oldest task; None on timeout, non-blocking miss,
        or queue closure."""
        with self._cond:
            while True:
                if self._interactive:
                    return self._interactive.popleft()
                if self._precompute and not interactive_only:
                    return self._precompute.popleft()
                if self._closed or not block:
                    return None
                if not self._cond.wait(timeout=timeout):
                    return None

    def cancel_precompute(self, pred: Callable[[Task], bool]) -> int:
        """Drop pending precompute tasks matching pred; returns count dropped."""
        with self._cond:
            keep = deque(t for t in self._precompute if not pred(t))
            dropped = len(self._precompute) - len(keep)
            self._precompute = keep
            return dropped

    def pending(self) -> tuple:
        with self._cond:
            return len(self._interactive), len(self._precompute)

    def close(self) -> None:
        """Wake all waiters; subsequent next_task calls drain and then return None."""
        with self._cond:
            self._closed = True
            self._cond.notify_all()
