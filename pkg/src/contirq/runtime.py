"""Rank contexts: the library surface applications call."""

from __future__ import annotations

import os
import threading
import time
from typing import Any, Callable, Optional, Sequence

from . import progress
from .continuations import (ContinuationBody, ContinuationEngine,
                            ContinuationRequest, CRState, attach)
from .errors import ErrorClass, Shutdown, TransportError, UsageError
from .matching import ANY_SOURCE, ANY_TAG, Envelope, MatchState, RecvPosting
from .requests import (REQUEST_NULL, ErrorCode, Kind, OpRequest, RequestState,
                       StatusRecord)
from .transport import Endpoint, InprocHub, connect_tcp

# blocking-call backoff: a few yielding passes, then condition waits
# doubling from SLEEP_MIN up to SLEEP_MAX
SPIN_PASSES = 4
SLEEP_MIN = 20e-6
SLEEP_MAX = 1e-3


class Context:
    """One rank's view of the runtime.

    All methods may be called from any thread. ``continuations=False``
    builds the runtime without the continuation engine (no dispatch step in
    progress passes); it exists as a performance baseline.
    """

    def __init__(self, endpoint: Endpoint, continuations: bool = True):
        self.endpoint = endpoint
        self.rank = endpoint.rank
        self.size = endpoint.world_size
        self.matching = MatchState(self.rank, self.size)
        self._cond = threading.Condition(threading.Lock())
        self._epoch = 0
        self._sleepers = 0
        self.engine: Optional[ContinuationEngine] = ContinuationEngine(self._bump) if continuations else None
        self._pending: set[OpRequest] = set()
        self._send_locks = [threading.Lock() for _ in range(self.size)]
        self._poll_lock = threading.Lock()
        self._progress_thread: Optional[progress.ProgressThread] = None
        self.blocked: dict[int, int] = {}
        self.closed = False
        endpoint.set_listener(self._bump)

    def __repr__(self):
        return f"<Context rank={self.rank}/{self.size}>"

    @classmethod
    def tcp(cls, rank: int, peers: Sequence[tuple[str, int]], bind=None,
            continuations: bool = True, timeout: float = 30.0) -> "Context":
        return cls(connect_tcp(rank, peers, bind=bind, timeout=timeout), continuations)

    # -- wakeups -----------------------------------------------------------

    def _bump(self) -> None:
        self._epoch += 1
        if self._sleepers:
            with self._cond:
                self._cond.notify_all()

    @property
    def epoch(self) -> int:
        """Counter advanced by every arrival, completion and dispatch."""
        return self._epoch

    def _block_until(self, probe: Callable[[], Any]) -> Any:
        me = threading.get_ident()
        self.blocked[me] = self.blocked.get(me, 0) + 1
        try:
            delay = SLEEP_MIN
            spins = 0
            while True:
                if self.closed:
                    raise Shutdown(f"rank {self.rank} is shut down")
                epoch = self._epoch
                progress.progress_once(self)
                result = probe()
                if result is not None:
                    return result
                if self._epoch != epoch:
                    delay = SLEEP_MIN
                    spins = 0
                    continue
                if spins < SPIN_PASSES:
                    spins += 1
                    os.sched_yield()
                    continue
                if self.endpoint.closed_peers:
                    self._check_orphans()
                with self._cond:
                    self._sleepers += 1
                    try:
                        if self._epoch == epoch and not self.closed:
                            self._cond.wait(delay)
                    finally:
                        self._sleepers -= 1
                delay = min(delay * 2, SLEEP_MAX)
        finally:
            left = self.blocked[me] - 1
            if left:
                self.blocked[me] = left
            else:
                del self.blocked[me]

    def _check_orphans(self) -> None:
        """Fail if a pending receive can only be matched by closed peers."""
        ep = self.endpoint
        if ep.pending():
            return
        closed = ep.closed_peers
        open_peers = set(range(self.size)) - set(closed)
        for op in list(self._pending):
            if op.kind is not Kind.RECV:
                continue
            if op.peer in closed or (op.peer == ANY_SOURCE and not open_peers):
                raise TransportError(f"peer {op.peer} closed the connection; "
                                     f"receive tag={op.tag} can never complete")

    # -- argument checks ----------------------------------------------------

    def _check_rank(self, rank: int, wildcard: bool = False) -> None:
        if wildcard and rank == ANY_SOURCE:
            return
        if not isinstance(rank, int) or not 0 <= rank < self.size:
            raise UsageError(ErrorClass.INVALID_RANK, f"{rank} (world size {self.size})")

    def _check_tag(self, tag: int, wildcard: bool = False) -> None:
        if wildcard and tag == ANY_TAG:
            return
        if not isinstance(tag, int) or tag < 0:
            raise UsageError(ErrorClass.INVALID_TAG, str(tag))

    # -- point to point -----------------------------------------------------

    def _post_send(self, req: OpRequest) -> None:
        dst = req.peer
        ep = self.endpoint
        with self._send_locks[dst]:
            seq = self.matching.stamp(dst)
            env = Envelope(self.rank, dst, req.tag, seq, req.payload,
                           None if ep.completes_on_send else req)
            ep.send(env, on_full=self._drain_only)
        if ep.completes_on_send:
            req._complete(StatusRecord(dst, req.tag, len(req.payload)))

    def _drain_only(self) -> None:
        progress.drain(self)

    def _post_recv(self, req: OpRequest) -> None:
        env = self.matching.post_receive(RecvPosting(req.peer, req.tag, req.buffer, req))
        if env is not None:
            self._finish_recv(req, env)

    def _finish_recv(self, req: OpRequest, env: Envelope) -> None:
        buf = req.buffer
        payload = env.payload
        capacity = 0 if buf is None else len(buf)
        n = len(payload)
        error = ErrorCode.OK
        if n > capacity:
            n = capacity
            error = ErrorCode.TRUNCATE
        if n:
            buf[:n] = payload[:n]
        req._complete(StatusRecord(env.src, env.tag, n, error))

    def isend(self, payload, dst: int, tag: int) -> OpRequest:
        """Start sending ``payload`` (bytes-like, copied) to ``dst``."""
        self._check_rank(dst)
        self._check_tag(tag)
        req = OpRequest(self, Kind.SEND, dst, tag, payload=bytes(payload))
        req._activate()
        self._post_send(req)
        progress.progress_once(self)
        return req

    def irecv(self, buffer, src: int = ANY_SOURCE, tag: int = ANY_TAG) -> OpRequest:
        """Start receiving into ``buffer`` (a writable bytes-like or None)."""
        self._check_rank(src, wildcard=True)
        self._check_tag(tag, wildcard=True)
        req = OpRequest(self, Kind.RECV, src, tag, buffer=buffer)
        req._activate()
        self._post_recv(req)
        progress.progress_once(self)
        return req

    def send_init(self, buffer, dst: int, tag: int) -> OpRequest:
        """Persistent send; ``buffer`` is read at every ``start``."""
        self._check_rank(dst)
        self._check_tag(tag)
        return OpRequest(self, Kind.SEND, dst, tag, buffer=buffer, persistent=True)

    def recv_init(self, buffer, src: int = ANY_SOURCE, tag: int = ANY_TAG) -> OpRequest:
        self._check_rank(src, wildcard=True)
        self._check_tag(tag, wildcard=True)
        return OpRequest(self, Kind.RECV, src, tag, buffer=buffer, persistent=True)

    def start(self, req: OpRequest) -> None:
        if not isinstance(req, OpRequest) or not req.persistent or req.freed:
            raise UsageError(ErrorClass.NOT_PERSISTENT, repr(req))
        req._activate()
        if req.kind is Kind.SEND:
            req.payload = bytes(req.buffer) if req.buffer is not None else b""
            self._post_send(req)
        else:
            self._post_recv(req)
        progress.progress_once(self)

    def send(self, payload, dst: int, tag: int) -> StatusRecord:
        return self.wait(self.isend(payload, dst, tag))

    def recv(self, buffer, src: int = ANY_SOURCE, tag: int = ANY_TAG) -> StatusRecord:
        return self.wait(self.irecv(buffer, src, tag))

    def test(self, req) -> tuple[bool, Optional[StatusRecord]]:
        """One progress pass, then ``(flag, status)``; status is None while active."""
        progress.progress_once(self)
        if req is REQUEST_NULL:
            return True, StatusRecord()
        status = req._try_consume()
        return status is not None, status

    def wait(self, req) -> StatusRecord:
        """Block the calling thread until ``req`` completes."""
        if req is REQUEST_NULL or req.released:
            progress.progress_once(self)
            return StatusRecord()
        with req._lock:
            if req._waiting:
                raise UsageError(ErrorClass.CONCURRENT_WAIT, repr(req))
            req._waiting = True
        try:
            return self._block_until(req._try_consume)
        finally:
            req._waiting = False

    def waitall(self, reqs: Sequence) -> list[StatusRecord]:
        return [self.wait(r) for r in reqs]

    def request_free(self, req) -> None:
        if req is REQUEST_NULL or req.released:
            return
        with req._lock:
            if req.state is RequestState.ACTIVE:
                raise UsageError(ErrorClass.FREE_ACTIVE, repr(req))
            req.released = True
            req.freed = True

    # -- continuations ------------------------------------------------------

    def _need_engine(self) -> ContinuationEngine:
        if self.engine is None:
            raise RuntimeError("this context was built without continuation support")
        return self.engine

    def continue_init(self, on_transition=None) -> ContinuationRequest:
        """Create an inactive continuation request.

        ``on_transition(cr, old, new)`` is called for every state change,
        under the CR's lock.
        """
        return ContinuationRequest(self._need_engine(), on_transition)

    def attach_continue(self, op, body: ContinuationBody, data: Any,
                        status: Optional[StatusRecord], cr: ContinuationRequest) -> bool:
        """Attach ``body`` to one operation (an OpRequest or a CR).

        Returns True when ``op`` had already completed: ``status`` is then
        filled in and ``body`` will never run. Never invokes continuations.
        """
        if self.engine is None:
            self._need_engine()
        return attach((op,), body, data, status, cr, True)

    def attach_continueall(self, ops: Sequence, body: ContinuationBody, data: Any,
                           statuses: Optional[list], cr: ContinuationRequest) -> bool:
        """Like ``attach_continue`` but ``body`` runs once all ``ops`` completed.

        ``statuses`` is a list with one slot per op, or None.
        """
        if self.engine is None:
            self._need_engine()
        return attach(ops if type(ops) is tuple else tuple(ops), body, data, statuses, cr, False)

    def cr_test(self, cr: ContinuationRequest) -> bool:
        cr._claim()
        try:
            progress.progress_once(self)
            return cr._complete_if_idle()
        finally:
            cr._unclaim()

    def cr_wait(self, cr: ContinuationRequest) -> None:
        cr._claim()
        try:
            self._block_until(cr._idle_probe)
        finally:
            cr._unclaim()

    def cr_free(self, cr: ContinuationRequest) -> None:
        cr._free()

    # -- lifecycle ----------------------------------------------------------

    def pending_operations(self) -> list[OpRequest]:
        return list(self._pending)

    def close(self) -> None:
        if self._progress_thread is not None:
            self._progress_thread.stop()
        self.closed = True
        with self._cond:
            self._cond.notify_all()
        self.endpoint.close()


class World:
    """An in-process world: ``size`` ranks sharing one hub."""

    def __init__(self, size: int, continuations: bool = True, capacity: Optional[int] = None):
        kw = {} if capacity is None else {"capacity": capacity}
        self.hub = InprocHub(size, **kw)
        self.ranks = [Context(ep, continuations) for ep in self.hub.endpoints]

    @property
    def size(self) -> int:
        return len(self.ranks)

    def __getitem__(self, rank: int) -> Context:
        return self.ranks[rank]

    def __iter__(self):
        return iter(self.ranks)

    def shutdown(self) -> None:
        for ctx in self.ranks:
            ctx.close()
        self.hub.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


__all__ = ["Context", "World", "CRState"]
