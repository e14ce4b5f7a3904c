"""Operation requests and completion status."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import TYPE_CHECKING, Any, Optional

from .errors import ErrorClass, RuntimeFault, UsageError
from .matching import ANY_SOURCE, ANY_TAG

if TYPE_CHECKING:
    from .runtime import Context


class ErrorCode(IntEnum):
    OK = 0
    TRUNCATE = 1


@dataclass(slots=True)
class StatusRecord:
    source: int = ANY_SOURCE
    tag: int = ANY_TAG
    length: int = 0
    error: ErrorCode = ErrorCode.OK

    def copy(self) -> "StatusRecord":
        return StatusRecord(self.source, self.tag, self.length, self.error)

    def assign(self, other: "StatusRecord") -> None:
        self.source = other.source
        self.tag = other.tag
        self.length = other.length
        self.error = other.error


# Pass in place of a status object when the caller does not want one.
STATUS_IGNORE = None
STATUSES_IGNORE = None


class RequestState(Enum):
    INACTIVE = "inactive"
    ACTIVE = "active"
    COMPLETE = "complete"
    CONSUMED = "consumed"


class Kind(Enum):
    SEND = "send"
    RECV = "recv"


class _NullRequest:
    """The handle value of a released request."""

    def __eq__(self, other):
        return other is self or (isinstance(other, OpRequest) and other.released)

    def __hash__(self):
        return 0

    def __repr__(self):
        return "REQUEST_NULL"


REQUEST_NULL = _NullRequest()


class OpRequest:
    """Handle to one (possibly persistent) send or receive.

    Once the library takes the handle back (a successful test/wait on a
    non-persistent request, or attaching a continuation to it), the handle
    compares equal to ``REQUEST_NULL`` and behaves like it.
    """

    __slots__ = ("ctx", "kind", "peer", "tag", "buffer", "payload", "persistent",
                 "state", "status", "released", "freed", "_hooks", "_attached",
                 "_waiting", "_lock", "__weakref__")

    def __init__(self, ctx: "Context", kind: Kind, peer: int, tag: int,
                 buffer: Any = None, payload: bytes = b"", persistent: bool = False):
        self.ctx = ctx
        self.kind = kind
        self.peer = peer
        self.tag = tag
        self.buffer = buffer
        self.payload = payload
        self.persistent = persistent
        self.state = RequestState.INACTIVE
        self.status: Optional[StatusRecord] = None
        self.released = False
        self.freed = False
        self._hooks: list = []
        self._attached = False
        self._waiting = False
        self._lock = threading.Lock()

    def __eq__(self, other):
        if isinstance(other, _NullRequest):
            return self.released
        return self is other

    __hash__ = object.__hash__

    @property
    def is_null(self) -> bool:
        return self.released

    def __repr__(self):
        what = "null" if self.released else self.state.value
        return f"<OpRequest {self.kind.value} peer={self.peer} tag={self.tag} {what}>"

    def _activate(self) -> None:
        with self._lock:
            if self.state is RequestState.ACTIVE:
                raise UsageError(ErrorClass.ALREADY_ACTIVE, repr(self))
            self.state = RequestState.ACTIVE
            self.status = None
        self.ctx._pending.add(self)

    def _complete(self, status: StatusRecord) -> None:
        """Record the result and fire completion hooks, status first."""
        with self._lock:
            if self.state is not RequestState.ACTIVE:
                raise RuntimeFault(f"completion of non-active request {self!r}")
            self.status = status
            self.state = RequestState.COMPLETE
            hooks = self._hooks
            if hooks:
                self._hooks = []
        self.ctx._pending.discard(self)
        for cont, index in hooks:
            cont._op_done(index, status)
        self.ctx._bump()

    def _add_hook(self, cont, index) -> Optional[StatusRecord]:
        """Bind ``cont`` to this request's next completion.

        Returns None when bound, or the status to report when the request
        has already completed (the continuation is then not bound).
        """
        with self._lock:
            if self.released:
                if self._attached:
                    raise UsageError(ErrorClass.SECOND_ATTACH, repr(self))
                return StatusRecord()
            if not self.persistent:
                self._attached = True
                self.released = True
            if self.state is RequestState.ACTIVE:
                self._hooks.append((cont, index))
                return None
            status = self.status.copy() if self.status is not None else StatusRecord()
            if self.persistent:
                self.state = RequestState.INACTIVE
                self.status = None
            else:
                self.state = RequestState.CONSUMED
            return status

    def _check_attachable(self) -> None:
        if self.released and self._attached:
            raise UsageError(ErrorClass.SECOND_ATTACH, repr(self))

    def _try_consume(self) -> Optional[StatusRecord]:
        """Completion-call semantics of test: status if done, else None."""
        with self._lock:
            if self.released:
                return StatusRecord()
            state = self.state
            if state is RequestState.ACTIVE:
                return None
            if state is RequestState.INACTIVE or self.status is None:
                return StatusRecord()
            status = self.status
            if self.persistent:
                self.state = RequestState.INACTIVE
                self.status = None
            else:
                self.state = RequestState.CONSUMED
                self.released = True
            return status
