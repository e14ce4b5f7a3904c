"""Per-rank message matching.

Receives are matched against arriving envelopes with MPI's non-overtaking
rule: among envelopes, the oldest arrival wins; among postings, the lowest
post order wins.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Optional

from .errors import RuntimeFault

ANY_SOURCE = -1
ANY_TAG = -1


@dataclass(slots=True)
class Envelope:
    src: int
    dst: int
    tag: int
    seq: int
    payload: bytes
    # In-process only: the sending request, completed on delivery.
    origin: Any = field(default=None, compare=False, repr=False)


@dataclass(slots=True)
class RecvPosting:
    source_sel: int
    tag_sel: int
    dest_buffer: Any = None
    owner: Any = None
    post_order: int = 0

    def matches(self, env: Envelope) -> bool:
        return ((self.source_sel == ANY_SOURCE or self.source_sel == env.src)
                and (self.tag_sel == ANY_TAG or self.tag_sel == env.tag))


class MatchState:
    """Posted-receive and unexpected-message queues for one rank.

    All public methods serialize on an internal lock; none of them call
    back into user code.
    """

    def __init__(self, rank: int, world_size: int):
        self.rank = rank
        self.world_size = world_size
        self.posted: list[RecvPosting] = []
        self.unexpected: list[Envelope] = []
        self.next_seq_out = [1] * world_size
        self.next_seq_in = [1] * world_size
        self._order = itertools.count(1)
        self._lock = threading.Lock()

    def stamp(self, dst: int) -> int:
        """Take the next outbound sequence number for ``dst``."""
        with self._lock:
            seq = self.next_seq_out[dst]
            self.next_seq_out[dst] = seq + 1
            return seq

    def post_receive(self, p: RecvPosting) -> Optional[Envelope]:
        """Match ``p`` against the oldest unexpected envelope, or queue it.

        Returns the matched envelope, or None if ``p`` was queued.
        """
        with self._lock:
            if not p.post_order:
                p.post_order = next(self._order)
            for i, env in enumerate(self.unexpected):
                if p.matches(env):
                    del self.unexpected[i]
                    return env
            self.posted.append(p)
            return None

    def deliver(self, env: Envelope) -> Optional[RecvPosting]:
        """Hand an arriving envelope to the earliest matching posting.

        Returns the matched posting, or None if ``env`` went to the
        unexpected queue.
        """
        with self._lock:
            expected = self.next_seq_in[env.src]
            if env.seq != expected:
                raise RuntimeFault(
                    f"rank {self.rank}: out-of-order envelope from {env.src}: "
                    f"seq {env.seq}, expected {expected}")
            self.next_seq_in[env.src] = expected + 1
            for i, p in enumerate(self.posted):
                if p.matches(env):
                    del self.posted[i]
                    return p
            self.unexpected.append(env)
            return None

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return len(self.posted), len(self.unexpected)
