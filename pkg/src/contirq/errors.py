"""Exception hierarchy shared by every layer of the runtime."""

from enum import Enum


class ErrorClass(Enum):
    INVALID_RANK = "invalid rank"
    INVALID_TAG = "invalid tag"
    ALREADY_ACTIVE = "request already active"
    FREE_ACTIVE = "cannot free an active request"
    NOT_PERSISTENT = "request is not persistent"
    SECOND_ATTACH = "operation already has a continuation"
    CR_FREED = "continuation request was freed"
    CONCURRENT_WAIT = "another thread is testing or waiting on this request"
    SHUTDOWN = "runtime shut down"


class ContirqError(Exception):
    """Base class for all runtime errors."""


class UsageError(ContirqError):
    """The caller violated an API precondition. ``code`` names the rule."""

    def __init__(self, code: ErrorClass, detail: str = ""):
        self.code = code
        msg = code.value if not detail else f"{code.value}: {detail}"
        super().__init__(msg)


class TransportError(ContirqError):
    """A connection fault or malformed frame."""


class RuntimeFault(ContirqError):
    """Unrecoverable internal fault; the runtime refuses further work."""


class Shutdown(ContirqError):
    """Raised out of blocking calls once the runtime is torn down."""
