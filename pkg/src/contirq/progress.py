"""Progress engine: move transport events into completions, then dispatch.

Every communication call runs one pass of ``progress_once``; an optional
background thread can run passes too. Nothing here is signal driven.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from typing import TYPE_CHECKING, Any, Callable

from .errors import ErrorClass, Shutdown, UsageError
from .requests import StatusRecord

if TYPE_CHECKING:
    from .continuations import ContinuationRequest
    from .runtime import Context

log = logging.getLogger(__name__)

BATCH = 64
IDLE_SPINS = 100


def drain(ctx: "Context", max_events: int = BATCH) -> int:
    """Pull up to ``max_events`` envelopes through matching and complete
    whatever they finish. Continuations made ready are only queued."""
    if ctx.closed:
        raise Shutdown(f"rank {ctx.rank} is shut down")
    ep = ctx.endpoint
    if not ep.pending():
        # still surfaces transport faults
        ep.poll(0)
        return 0
    lock = ctx._poll_lock
    if not lock.acquire(False):
        return 0
    try:
        envs = ep.poll(max_events)
        deliver = ctx.matching.deliver
        matched = [(env, deliver(env)) for env in envs]
    finally:
        lock.release()
    for env, posting in matched:
        if env.origin is not None:
            env.origin._complete(StatusRecord(env.dst, env.tag, len(env.payload)))
        if posting is not None:
            ctx._finish_recv(posting.owner, env)
    return len(matched)


def progress_once(ctx: "Context") -> bool:
    """One progress pass. Returns whether anything happened."""
    n = drain(ctx)
    engine = ctx.engine
    # fast path: an idle engine costs two attribute checks
    if engine is not None and (engine._ready or engine.poisoned is not None):
        n += engine.dispatch_ready()
    return n > 0


class ProgressThread:
    """Background thread running progress passes.

    After ``IDLE_SPINS`` consecutive idle passes it sleeps ``interval``
    seconds between passes; an interval of 0 busy-polls (yielding the CPU).
    """

    def __init__(self, ctx: "Context", interval: float):
        if interval < 0:
            raise ValueError("interval must be >= 0")
        self.ctx = ctx
        self.interval = interval
        self._stop = threading.Event()
        self.error: BaseException | None = None
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name=f"contirq-progress-{ctx.rank}")

    def start(self) -> "ProgressThread":
        self._thread.start()
        return self

    def _run(self) -> None:
        idle = 0
        stop = self._stop
        try:
            while not stop.is_set():
                if progress_once(self.ctx):
                    idle = 0
                    continue
                idle += 1
                if idle < IDLE_SPINS or self.interval == 0:
                    os.sched_yield()
                else:
                    stop.wait(self.interval)
        except Shutdown:
            pass
        except BaseException as exc:
            self.error = exc
            log.error("progress thread for rank %d died: %r", self.ctx.rank, exc)

    @property
    def alive(self) -> bool:
        return self._thread.is_alive()

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        if self._thread.is_alive() and self._thread is not threading.current_thread():
            self._thread.join(timeout)


def spawn_progress_thread(ctx: "Context", interval: float = 1e-4) -> ProgressThread:
    current = ctx._progress_thread
    if current is not None and current.alive:
        raise UsageError(ErrorClass.ALREADY_ACTIVE, f"rank {ctx.rank} already has a progress thread")
    pt = ProgressThread(ctx, interval)
    ctx._progress_thread = pt
    return pt.start()


def polling_service(ctx: "Context", cr: "ContinuationRequest") -> Callable[[], bool]:
    """Wrap ``cr_test`` as a periodically invoked service.

    The returned callable tests the CR, ignores the flag, and returns False
    ("call me again") until the CR has been freed, then True. Concurrent
    invocations are skipped rather than serialized, since only one thread
    may test a CR at a time.
    """
    busy = threading.Lock()

    def poll() -> bool:
        if cr.freed or ctx.closed:
            return True
        if not busy.acquire(False):
            return False
        try:
            ctx.cr_test(cr)
        finally:
            busy.release()
        return False

    return poll


def register_polling_service(ctx: "Context", cr: "ContinuationRequest",
                             registrar: Callable[[Callable[[], bool]], Any]) -> Any:
    """Hand a ``polling_service`` for ``cr`` to ``registrar``; returns its result."""
    return registrar(polling_service(ctx, cr))
