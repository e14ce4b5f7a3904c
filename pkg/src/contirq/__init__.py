"""Continuations for a small message-passing runtime."""

from .continuations import CRState, ContinuationRequest, LEGAL_TRANSITIONS, in_continuation
from .errors import (ContirqError, ErrorClass, RuntimeFault, Shutdown,
                     TransportError, UsageError)
from .matching import ANY_SOURCE, ANY_TAG
from .progress import polling_service, progress_once, spawn_progress_thread
from .requests import (REQUEST_NULL, STATUS_IGNORE, STATUSES_IGNORE, ErrorCode,
                       OpRequest, RequestState, StatusRecord)
from .runtime import Context, World

__all__ = [
    "ANY_SOURCE", "ANY_TAG", "CRState", "Context", "ContinuationRequest",
    "ContirqError", "ErrorClass", "ErrorCode", "LEGAL_TRANSITIONS", "OpRequest",
    "REQUEST_NULL", "RequestState", "RuntimeFault", "STATUSES_IGNORE",
    "STATUS_IGNORE", "Shutdown", "StatusRecord", "TransportError", "UsageError",
    "World", "in_continuation", "polling_service", "progress_once",
    "spawn_progress_thread",
]
