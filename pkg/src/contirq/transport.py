"""Byte-moving layer: an in-process hub and a TCP full mesh.

Both deliver envelopes in per-(src, dst) FIFO order. The TCP wire format
is a fixed big-endian header followed by the payload::

    magic "CTRQ" | version u8 | src u32 | dst u32 | tag i64 | seq u64 | len u32
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from collections import deque
from typing import Callable, Optional, Sequence

from .errors import TransportError
from .matching import Envelope

log = logging.getLogger(__name__)

MAGIC = b"CTRQ"
VERSION = 0x01
HEADER = struct.Struct(">4sBIIqQI")
HELLO = struct.Struct(">4sBII")
INPROC_CAPACITY = 1024


class FrameError(TransportError):
    pass


def encode_frame(env: Envelope) -> bytes:
    payload = bytes(env.payload)
    return HEADER.pack(MAGIC, VERSION, env.src, env.dst, env.tag, env.seq,
                       len(payload)) + payload


def decode_header(buf: bytes) -> tuple[int, int, int, int, int]:
    """Parse a frame header into ``(src, dst, tag, seq, length)``."""
    if len(buf) != HEADER.size:
        raise FrameError(f"short header: {len(buf)} bytes")
    magic, version, src, dst, tag, seq, length = HEADER.unpack(buf)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported frame version {version}")
    return src, dst, tag, seq, length


def decode_frame(data: bytes) -> tuple[Envelope, int]:
    """Decode one frame from the front of ``data``.

    Returns the envelope and the number of bytes consumed.
    """
    src, dst, tag, seq, length = decode_header(bytes(data[:HEADER.size]))
    end = HEADER.size + length
    if len(data) < end:
        raise FrameError(f"truncated payload: need {length} bytes")
    return Envelope(src, dst, tag, seq, bytes(data[HEADER.size:end])), end


class Endpoint:
    """Interface shared by the transports."""

    rank: int
    world_size: int
    # True when a send is finished once ``send`` returns.
    completes_on_send: bool
    # peers that shut their side down cleanly; nothing more will arrive
    closed_peers: frozenset = frozenset()

    def send(self, env: Envelope, on_full: Optional[Callable[[], None]] = None) -> None:
        raise NotImplementedError

    def poll(self, max_events: int) -> list[Envelope]:
        raise NotImplementedError

    def pending(self) -> int:
        raise NotImplementedError

    def set_listener(self, fn: Callable[[], None]) -> None:
        self._listener = fn

    def close(self) -> None:
        pass


class InprocEndpoint(Endpoint):
    completes_on_send = False

    def __init__(self, hub: "InprocHub", rank: int):
        self.hub = hub
        self.rank = rank
        self.world_size = hub.size
        self._inbound: deque[Envelope] = deque()
        self._lock = threading.Lock()
        self._space = threading.Condition(self._lock)
        self._full_waiters = 0
        self._listener: Callable[[], None] = lambda: None

    def _push(self, env: Envelope, on_full) -> None:
        with self._lock:
            while len(self._inbound) >= self.hub.capacity:
                if self.hub.closed:
                    raise TransportError("transport closed")
                self._full_waiters += 1
                try:
                    if on_full is not None:
                        self._lock.release()
                        try:
                            on_full()
                        finally:
                            self._lock.acquire()
                        if len(self._inbound) < self.hub.capacity:
                            break
                    self._space.wait(0.001)
                finally:
                    self._full_waiters -= 1
            self._inbound.append(env)
        self._listener()

    def send(self, env, on_full=None):
        if self.hub.closed:
            raise TransportError("transport closed")
        self.hub.endpoints[env.dst]._push(env, on_full)

    def poll(self, max_events):
        q = self._inbound
        if not q:
            return []
        out = []
        try:
            while len(out) < max_events:
                out.append(q.popleft())
        except IndexError:
            pass
        if self._full_waiters:
            with self._lock:
                self._space.notify_all()
        return out

    def pending(self):
        return len(self._inbound)


class InprocHub:
    """Shared registry of in-process endpoints, one per rank."""

    def __init__(self, size: int, capacity: int = INPROC_CAPACITY):
        if size < 1:
            raise ValueError("world size must be positive")
        self.size = size
        self.capacity = capacity
        self.closed = False
        self.endpoints = [InprocEndpoint(self, r) for r in range(size)]

    def close(self) -> None:
        self.closed = True
        for ep in self.endpoints:
            with ep._lock:
                ep._space.notify_all()


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:])
        if k == 0:
            return None
        got += k
    return bytes(buf)


class TcpEndpoint(Endpoint):
    """One rank of a TCP full mesh: one duplex socket per peer."""

    completes_on_send = True

    def __init__(self, rank: int, world_size: int, socks: dict[int, socket.socket]):
        self.rank = rank
        self.world_size = world_size
        self._socks = socks
        self._send_locks = {p: threading.Lock() for p in socks}
        self._inbound: deque[Envelope] = deque()
        self._fault: Optional[TransportError] = None
        self.closed_peers: set[int] = set()
        self._closing = False
        self._listener: Callable[[], None] = lambda: None
        self._readers = []
        for peer, s in socks.items():
            t = threading.Thread(target=self._reader, args=(peer, s),
                                 name=f"tcp-reader-{rank}<-{peer}", daemon=True)
            t.start()
            self._readers.append(t)

    def _reader(self, peer: int, sock: socket.socket) -> None:
        try:
            while True:
                head = _recv_exact(sock, HEADER.size)
                if head is None:
                    # clean close at a frame boundary; only an error for
                    # whoever still expects something from this peer
                    self.closed_peers.add(peer)
                    break
                src, dst, tag, seq, length = decode_header(head)
                if src != peer or dst != self.rank:
                    raise FrameError(f"misrouted frame {src}->{dst} on link to {peer}")
                payload = _recv_exact(sock, length) if length else b""
                if payload is None:
                    raise TransportError(f"peer {peer} closed mid-frame")
                self._inbound.append(Envelope(src, dst, tag, seq, payload))
                self._listener()
        except TransportError as exc:
            self._fault = exc
        except OSError as exc:
            if not self._closing:
                self._fault = TransportError(f"link to {peer}: {exc}")
        finally:
            self._listener()

    def send(self, env, on_full=None):
        if self._fault is not None:
            raise self._fault
        if env.dst == self.rank:
            self._inbound.append(Envelope(env.src, env.dst, env.tag, env.seq, bytes(env.payload)))
            self._listener()
            return
        if env.dst in self.closed_peers:
            raise TransportError(f"peer {env.dst} closed the connection")
        frame = encode_frame(env)
        with self._send_locks[env.dst]:
            try:
                self._socks[env.dst].sendall(frame)
            except OSError as exc:
                raise TransportError(f"send to {env.dst}: {exc}") from exc

    def poll(self, max_events):
        q = self._inbound
        if not q:
            if self._fault is not None:
                raise self._fault
            return []
        out = []
        try:
            while len(out) < max_events:
                out.append(q.popleft())
        except IndexError:
            pass
        return out

    def pending(self):
        return len(self._inbound)

    def close(self):
        self._closing = True
        for s in self._socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()


def parse_peers(spec: str) -> list[tuple[str, int]]:
    """Parse ``host:port,host:port,...`` (one entry per rank, in rank order)."""
    peers = []
    for item in spec.split(","):
        host, _, port = item.strip().rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad peer address {item!r}")
        peers.append((host, int(port)))
    return peers


def _hello(rank: int, size: int) -> bytes:
    return HELLO.pack(MAGIC, VERSION, rank, size)


def _read_hello(sock: socket.socket) -> tuple[int, int]:
    data = _recv_exact(sock, HELLO.size)
    if data is None:
        raise TransportError("connection closed during handshake")
    magic, version, rank, size = HELLO.unpack(data)
    if magic != MAGIC or version != VERSION:
        raise FrameError(f"bad handshake {data!r}")
    return rank, size


def connect_tcp(rank: int, peers: Sequence[tuple[str, int]],
                bind: Optional[tuple[str, int]] = None,
                timeout: float = 30.0) -> TcpEndpoint:
    """Join a TCP full mesh.

    Every rank listens on ``bind`` (default ``peers[rank]``). For each pair
    the lower rank connects to the higher one; both sides exchange
    ``(rank, world_size)`` before any frame flows.
    """
    size = len(peers)
    if not 0 <= rank < size:
        raise ValueError(f"rank {rank} outside world of {size}")
    socks: dict[int, socket.socket] = {}
    errors: list[BaseException] = []
    deadline = time.monotonic() + timeout

    listener = None
    n_accept = rank
    if n_accept:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind(bind or peers[rank])
        listener.listen(size)
        listener.settimeout(timeout)

    def accept_all():
        try:
            for _ in range(n_accept):
                conn, _ = listener.accept()
                conn.settimeout(timeout)
                peer, psize = _read_hello(conn)
                if psize != size or not 0 <= peer < rank:
                    raise TransportError(f"handshake mismatch: peer {peer}, size {psize}")
                conn.sendall(_hello(rank, size))
                socks[peer] = conn
        except BaseException as exc:  # surfaced by the joining thread
            errors.append(exc)

    acceptor = None
    if listener is not None:
        acceptor = threading.Thread(target=accept_all, daemon=True)
        acceptor.start()

    for peer in range(rank + 1, size):
        while True:
            try:
                s = socket.create_connection(peers[peer], timeout=timeout)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise TransportError(f"could not reach rank {peer} at {peers[peer]}")
                time.sleep(0.05)
        s.sendall(_hello(rank, size))
        prank, psize = _read_hello(s)
        if prank != peer or psize != size:
            raise TransportError(f"handshake mismatch: expected rank {peer}, got {prank}")
        socks[peer] = s

    if acceptor is not None:
        acceptor.join(max(0.0, deadline - time.monotonic()))
        listener.close()
        if errors:
            raise TransportError(f"accept failed: {errors[0]}")
        if len(socks) != size - 1:
            raise TransportError("timed out waiting for peers")

    for s in socks.values():
        s.settimeout(None)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    log.debug("rank %d connected to %d peers", rank, len(socks))
    return TcpEndpoint(rank, size, socks)
