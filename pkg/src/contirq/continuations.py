"""Continuations and continuation requests.

A continuation is a callback bound to one or more operations. Once all of
them complete it becomes ready and is invoked by whichever thread next
enters the library (or by a progress thread), never from inside
``attach_continue``/``attach_continueall`` and never from inside another
continuation.

A continuation request (CR) tracks the continuations registered with it::

    INACTIVE --register--> ACTIVE_REFERENCED --last done--> ACTIVE_IDLE
    ACTIVE_IDLE --register--> ACTIVE_REFERENCED
    ACTIVE_IDLE --test/wait--> COMPLETE --> INACTIVE
    (any) --free, once nothing is registered--> RELEASED
"""

from __future__ import annotations

import logging
import threading
from threading import Lock
from collections import deque
from enum import Enum
from typing import Any, Callable, Optional

from .errors import ErrorClass, RuntimeFault, UsageError
from .requests import REQUEST_NULL, StatusRecord

log = logging.getLogger(__name__)

# body(statuses, data); ``statuses`` is whatever the caller passed at attach time.
ContinuationBody = Callable[[Any, Any], Any]


class ContState(Enum):
    PENDING = "pending"
    READY = "ready"
    RUNNING = "running"
    DONE = "done"
    DROPPED = "dropped"


_PENDING, _READY = ContState.PENDING, ContState.READY


class CRState(Enum):
    INACTIVE = "inactive"
    ACTIVE_REFERENCED = "active-referenced"
    ACTIVE_IDLE = "active-idle"
    COMPLETE = "complete"
    RELEASED = "released"


LEGAL_TRANSITIONS = frozenset({
    (CRState.INACTIVE, CRState.ACTIVE_REFERENCED),
    (CRState.ACTIVE_REFERENCED, CRState.ACTIVE_REFERENCED),
    (CRState.ACTIVE_REFERENCED, CRState.ACTIVE_IDLE),
    (CRState.ACTIVE_IDLE, CRState.ACTIVE_REFERENCED),
    (CRState.ACTIVE_IDLE, CRState.COMPLETE),
    (CRState.COMPLETE, CRState.INACTIVE),
    (CRState.INACTIVE, CRState.RELEASED),
    (CRState.ACTIVE_IDLE, CRState.RELEASED),
    (CRState.ACTIVE_REFERENCED, CRState.RELEASED),
})


class _ThreadFlags(threading.local):
    depth = 0       # > 0 while running a continuation body
    attaching = 0   # > 0 inside attach_continue[all]


_flags = _ThreadFlags()


def in_continuation() -> bool:
    return _flags.depth > 0


class Continuation:
    __slots__ = ("body", "data", "statuses", "remaining", "cr", "state", "_lock")

    def __init__(self, body: ContinuationBody, data: Any, statuses: Any,
                 cr: "ContinuationRequest", remaining: int):
        self.body = body
        self.data = data
        self.statuses = statuses
        self.cr = cr
        self.remaining = remaining
        self.state = _PENDING
        self._lock = Lock()

    def _write_status(self, index: Optional[int], status: StatusRecord) -> None:
        slots = self.statuses
        if slots is None:
            return
        if index is None:
            slots.assign(status)
        else:
            slots[index] = status.copy()

    def _op_done(self, index: Optional[int], status: StatusRecord) -> None:
        if self.statuses is not None:
            self._write_status(index, status)
        with self._lock:
            self.remaining -= 1
            if self.remaining or self.state is not _PENDING:
                return
            self.state = _READY
        self.cr.engine._enqueue(self)


class DispatchStats:
    """Counters kept by the engine; the restriction counters must stay 0."""

    def __init__(self):
        self._lock = threading.Lock()
        self.invocations = 0
        self.during_attach = 0
        self.nested = 0

    def record(self, flags) -> None:
        with self._lock:
            self.invocations += 1
            if flags.attaching:
                self.during_attach += 1
            if flags.depth:
                self.nested += 1


class ContinuationEngine:
    """Ready queue and dispatcher for one rank."""

    def __init__(self, notify: Callable[[], None] = lambda: None):
        self._ready: deque[Continuation] = deque()
        self._notify = notify
        self.stats = DispatchStats()
        self.poisoned: Optional[BaseException] = None

    def _enqueue(self, cont: Continuation) -> None:
        self._ready.append(cont)
        self._notify()

    def has_ready(self) -> bool:
        return bool(self._ready)

    def dispatch_ready(self) -> int:
        """Run the continuations that were ready on entry, FIFO.

        Does nothing on a thread that is inside a continuation or inside
        an attach call.
        """
        if self.poisoned is not None:
            raise RuntimeFault("a continuation failed earlier") from self.poisoned
        ready = self._ready
        if not ready or _flags.depth or _flags.attaching:
            return 0
        n = 0
        for _ in range(len(ready)):
            try:
                cont = ready.popleft()
            except IndexError:
                break
            self._run(cont)
            n += 1
        return n

    def _run(self, cont: Continuation) -> None:
        flags = _flags
        self.stats.record(flags)
        cont.state = ContState.RUNNING
        flags.depth += 1
        try:
            cont.body(cont.statuses, cont.data)
        except BaseException as exc:
            self.poisoned = exc
            log.critical("continuation %r raised; runtime poisoned", cont.body, exc_info=exc)
            raise RuntimeFault(f"continuation {cont.body!r} failed: {exc!r}") from exc
        finally:
            flags.depth -= 1
        cont.state = ContState.DONE
        cont.cr._deregister()
        self._notify()


class ContinuationRequest:
    """Aggregates registered continuations; see the module docstring."""

    def __init__(self, engine: ContinuationEngine,
                 on_transition: Optional[Callable[["ContinuationRequest", CRState, CRState], None]] = None):
        self.engine = engine
        self.state = CRState.INACTIVE
        self.registered = 0
        self.freed = False
        self._on_transition = on_transition
        self._hooks: list = []
        self._waiter: Optional[int] = None
        self._lock = threading.Lock()

    def __repr__(self):
        return f"<ContinuationRequest {self.state.value} registered={self.registered}>"

    @property
    def released(self) -> bool:
        return self.state is CRState.RELEASED

    def _move(self, new: CRState) -> None:
        old = self.state
        self.state = new
        if self._on_transition is not None:
            self._on_transition(self, old, new)

    def _register(self) -> None:
        with self._lock:
            if self.freed:
                raise UsageError(ErrorClass.CR_FREED)
            self.registered += 1
            if self._on_transition is None:
                self.state = CRState.ACTIVE_REFERENCED
            else:
                self._move(CRState.ACTIVE_REFERENCED)

    def _deregister(self) -> None:
        with self._lock:
            self.registered -= 1
            if self.registered:
                return
            self._move(CRState.RELEASED if self.freed else CRState.ACTIVE_IDLE)
            hooks = self._hooks
            if not hooks:
                return
            self._hooks = []
        for cont, index in hooks:
            cont._op_done(index, StatusRecord())

    def _check_attachable(self) -> None:
        pass

    def _add_hook(self, cont: Continuation, index) -> Optional[StatusRecord]:
        # A CR used as an operation completes when nothing is registered.
        with self._lock:
            if self.registered == 0:
                return StatusRecord()
            self._hooks.append((cont, index))
            return None

    def _complete_if_idle(self) -> bool:
        """Completion-call step: True iff nothing is registered."""
        with self._lock:
            if self.registered:
                return False
            if self.state is CRState.ACTIVE_IDLE:
                self._move(CRState.COMPLETE)
                self._move(CRState.INACTIVE)
            return True

    def _idle_probe(self) -> Optional[bool]:
        return True if self._complete_if_idle() else None

    def _free(self) -> None:
        with self._lock:
            if self.freed:
                return
            self.freed = True
            if self.registered == 0:
                self._move(CRState.RELEASED)

    def _claim(self) -> None:
        me = threading.get_ident()
        with self._lock:
            if self._waiter is not None and self._waiter != me:
                raise UsageError(ErrorClass.CONCURRENT_WAIT, repr(self))
            self._waiter = me

    def _unclaim(self) -> None:
        self._waiter = None


def attach(ops, body: ContinuationBody, data: Any, statuses: Any,
           cr: ContinuationRequest, single: bool) -> bool:
    """Shared registration path for attach_continue and attach_continueall.

    Returns the flag: True when every operation had already completed, in
    which case statuses are written but the body is neither registered nor
    invoked.
    """
    if cr.freed:
        raise UsageError(ErrorClass.CR_FREED)
    n = len(ops)
    for op in ops:
        if op is not None and op is not REQUEST_NULL:
            op._check_attachable()
    if n > 1:
        live = [id(op) for op in ops if op is not None and op is not REQUEST_NULL]
        if len(set(live)) != len(live):
            raise UsageError(ErrorClass.SECOND_ATTACH, "operation listed twice")
    # One extra count held by this call keeps the continuation from
    # becoming ready before it is registered with the CR.
    cont = Continuation(body, data, statuses, cr, n + 1)
    flags = _flags
    flags.attaching += 1
    try:
        done = 1
        index = None
        for i, op in enumerate(ops):
            if not single:
                index = i
            status = StatusRecord() if op is None or op is REQUEST_NULL else op._add_hook(cont, index)
            if status is not None:
                if statuses is not None:
                    cont._write_status(index, status)
                done += 1
        with cont._lock:
            cont.remaining -= done
            if cont.remaining == 0:
                cont.state = ContState.DONE
                return True
            try:
                cr._register()
            except UsageError:
                cont.state = ContState.DROPPED
                raise
            return False
    finally:
        flags.attaching -= 1
