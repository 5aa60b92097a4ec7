from __future__ import annotations

import logging
import queue
import threading
from collections.abc import Callable, Iterable, Iterator
from typing import Generic, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
S = TypeVar("S")

_DONE = object()


class _Failure:
    def __init__(self, exc: BaseException) -> None:
        self.exc = exc


class Prefetcher(Generic[S, T]):
    """
    Build items on a background thread, at most `max_pending` ahead.

    Items come out in input order. An exception in the worker is re-raised
    in the consumer at the position where it happened.
    """

    def __init__(self, inputs: Iterable[S], build: Callable[[S], T], max_pending: int = 2) -> None:
        if max_pending < 1:
            raise ValueError("max_pending must be >= 1")
        self.inputs = inputs
        self.build = build
        self._queue: queue.Queue = queue.Queue(maxsize=max_pending)
        self._stop_event = threading.Event()
        self._thread: threading.Thread | None = None

    def __iter__(self) -> Iterator[T]:
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        try:
            while True:
                item = self._queue.get()
                if item is _DONE:
                    return
                if isinstance(item, _Failure):
                    raise item.exc
                yield item
        finally:
            self.shutdown()

    def shutdown(self) -> None:
        self._stop_event.set()
        # Unblock a worker waiting on a full queue.
        try:
            while True:
                self._queue.get_nowait()
        except queue.Empty:
            pass
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def _put(self, item: object) -> bool:
        while not self._stop_event.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self) -> None:
        try:
            for value in self.inputs:
                if self._stop_event.is_set():
                    return
                if not self._put(self.build(value)):
                    return
        except Exception as exc:
            logger.exception("prefetch worker failed")
            self._put(_Failure(exc))
            return
        self._put(_DONE)
