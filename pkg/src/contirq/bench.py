"""Experiment drivers shared by the CLI and the test-suite.

Every driver is written per rank so the same code runs with in-process
ranks (one thread per rank) or with one OS process per rank over TCP.
"""

from __future__ import annotations

import hashlib
import random
import statistics
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .adapters import (Completed, CoopExecutor, Deadlock, EventCounter,
                       PreemptiveExecutor, detached_task_guard, fiber_block_on,
                       quiescence_detect)
from .progress import polling_service
from .runtime import Context, World

PINGPONG_TAG = 1
MODES = ("waitpath", "continuation")


# -- ping-pong ----------------------------------------------------------------

def pingpong_initiator(ctx: Context, mode: str, size: int, iters: int,
                       peer: int = 1, verify: bool = False, seed: int = 0) -> list[int]:
    """Rank-0 side: returns one round-trip time (ns) per iteration."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    rng = random.Random(seed)
    payload = bytes(size)
    rbuf = bytearray(size)
    times = []
    clock = time.perf_counter_ns
    if mode == "waitpath":
        for _ in range(iters):
            if verify:
                payload = rng.randbytes(size)
            t0 = clock()
            s = ctx.isend(payload, peer, PINGPONG_TAG)
            r = ctx.irecv(rbuf, peer, PINGPONG_TAG)
            ctx.wait(r)
            ctx.wait(s)
            times.append(clock() - t0)
            if verify and rbuf != payload:
                raise AssertionError("ping-pong payload corrupted")
    else:
        cr = ctx.continue_init()
        for _ in range(iters):
            if verify:
                payload = rng.randbytes(size)
            t0 = clock()
            s = ctx.isend(payload, peer, PINGPONG_TAG)
            r = ctx.irecv(rbuf, peer, PINGPONG_TAG)
            ctx.attach_continueall((s, r), _noop, None, None, cr)
            ctx.cr_wait(cr)
            times.append(clock() - t0)
            if verify and rbuf != payload:
                raise AssertionError("ping-pong payload corrupted")
        ctx.cr_free(cr)
    return times


def _noop(statuses, data):
    pass


def pingpong_responder(ctx: Context, mode: str, size: int, iters: int, peer: int = 0) -> None:
    """Echo side. In continuation mode the reply is sent from the body."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    buf = bytearray(size)
    if mode == "waitpath":
        for _ in range(iters):
            ctx.wait(ctx.irecv(buf, peer, PINGPONG_TAG))
            ctx.wait(ctx.isend(buf, peer, PINGPONG_TAG))
        return
    if iters == 0:
        return
    cr = ctx.continue_init()
    left = [iters]

    def reply(status, _):
        ctx.isend(buf, peer, PINGPONG_TAG)
        left[0] -= 1
        if left[0]:
            ctx.attach_continue(ctx.irecv(buf, peer, PINGPONG_TAG), reply, None, None, cr)

    if ctx.attach_continue(ctx.irecv(buf, peer, PINGPONG_TAG), reply, None, None, cr):
        reply(None, None)
    ctx.cr_wait(cr)
    ctx.cr_free(cr)


def pingpong_inproc(mode: str, size: int, iters: int, continuations: bool = True,
                    world: Optional[World] = None) -> list[int]:
    own = world is None
    world = world or World(2, continuations=continuations)
    err: list[BaseException] = []

    def responder():
        try:
            pingpong_responder(world[1], mode, size, iters)
        except BaseException as exc:
            err.append(exc)

    t = threading.Thread(target=responder, daemon=True)
    t.start()
    try:
        times = pingpong_initiator(world[0], mode, size, iters)
    finally:
        t.join()
        if own:
            world.shutdown()
    if err:
        raise err[0]
    return times


@dataclass(frozen=True)
class PingpongConfig:
    mode: str
    continuations: bool = True

    @property
    def label(self) -> str:
        engine = "engine" if self.continuations else "no-engine"
        return f"{self.mode}/{engine}"


def compare_pingpong(configs: Sequence[PingpongConfig], size: int, iters: int,
                     block: int = 500) -> dict[PingpongConfig, list[int]]:
    """Round-trip samples for several configurations, interleaved.

    Each configuration keeps its own world; blocks of ``block`` iterations
    rotate through the configurations so slow drift in machine state hits
    all of them alike.
    """
    worlds = {c: World(2, continuations=c.continuations) for c in configs}
    samples: dict[PingpongConfig, list[int]] = {c: [] for c in configs}
    try:
        done = 0
        while done < iters:
            n = min(block, iters - done)
            for c in configs:
                samples[c] += pingpong_inproc(c.mode, size, n, world=worlds[c])
            done += n
    finally:
        for w in worlds.values():
            w.shutdown()
    return samples


def summarize(values_us: Sequence[float]) -> tuple[float, float]:
    if len(values_us) == 1:
        return values_us[0], 0.0
    return statistics.fmean(values_us), statistics.stdev(values_us)


# -- multi-worker latency -----------------------------------------------------

@dataclass
class LatencyMtResult:
    round_us: list[float]
    received: dict[int, list[int]]

    @property
    def messages(self) -> int:
        return sum(len(v) for v in self.received.values())


def _mt_payload(size: int, job: int, it: int) -> bytes:
    if size >= 8:
        return struct.pack(">II", job, it) + bytes(size - 8)
    return bytes(size)


def latency_mt_sender(ctx: Context, jobs: int, size: int, iters: int, peer: int = 1) -> list[float]:
    """One thread driving ``jobs`` concurrent ping-pongs; returns the
    one-way latency (half the round time, in us) of every round."""
    bufs = [bytearray(size) for _ in range(jobs)]
    out = []
    for it in range(iters):
        t0 = time.perf_counter_ns()
        sends = [ctx.isend(_mt_payload(size, j, it), peer, j) for j in range(jobs)]
        recvs = [ctx.irecv(bufs[j], peer, j) for j in range(jobs)]
        ctx.waitall(recvs)
        ctx.waitall(sends)
        out.append((time.perf_counter_ns() - t0) / 2000.0)
    return out


def latency_mt_receiver(ctx: Context, threads: int, fibers: int, size: int, iters: int,
                        peer: int = 0) -> dict[int, list[int]]:
    """``threads`` workers hosting ``threads * fibers`` parked-job echoers."""
    jobs = threads * fibers
    received: dict[int, list[int]] = {j: [] for j in range(jobs)}
    cr = ctx.continue_init()
    ex = CoopExecutor(threads, name=f"latmt-r{ctx.rank}")
    ex.register_polling_service(polling_service(ctx, cr))

    def echo(j):
        buf = bytearray(size)
        for it in range(iters):
            r = ctx.irecv(buf, peer, j)
            yield from fiber_block_on(ctx, [r], cr)
            if size >= 8:
                received[j].append(struct.unpack_from(">II", buf)[1])
            else:
                received[j].append(it)
            s = ctx.isend(buf, peer, j)
            yield from fiber_block_on(ctx, [s], cr)

    for j in range(jobs):
        ex.submit(echo, j, name=f"echo-{j}")
    ex.join()
    failures = list(ex.failures)
    ctx.cr_free(cr)
    ex.shutdown()
    if failures:
        raise failures[0][1]
    return received


def latency_mt_inproc(threads: int, fibers: int, size: int, iters: int) -> LatencyMtResult:
    world = World(2)
    box: dict[str, object] = {}

    def recv_side():
        try:
            box["received"] = latency_mt_receiver(world[1], threads, fibers, size, iters)
        except BaseException as exc:
            box["error"] = exc

    t = threading.Thread(target=recv_side, daemon=True)
    t.start()
    try:
        rounds = latency_mt_sender(world[0], threads * fibers, size, iters)
    finally:
        t.join()
        world.shutdown()
    if "error" in box:
        raise box["error"]
    return LatencyMtResult(rounds, box["received"])


# -- halo exchange ------------------------------------------------------------

ZONE_ROWS = 16
ZONE_COLS = 16


def zone_owner(zone: int, zones: int, procs: int) -> int:
    return zone * procs // zones


def _halo_tag(phase: int, zones: int, dst_zone: int, side: int) -> int:
    return (phase * zones + dst_zone) * 2 + side


def init_zone(zone: int, seed: int, rows: int = ZONE_ROWS, cols: int = ZONE_COLS) -> np.ndarray:
    u = np.zeros((rows + 2, cols + 2))
    u[1:-1, 1:-1] = np.random.default_rng(seed + zone).random((rows, cols))
    return u


def jacobi(u: np.ndarray) -> None:
    """One 5-point averaging sweep of the interior, in place."""
    u[1:-1, 1:-1] = (u[1:-1, 1:-1] + u[:-2, 1:-1] + u[2:, 1:-1]
                     + u[1:-1, :-2] + u[1:-1, 2:]) / 5.0


def checksum(zones: dict[int, np.ndarray]) -> str:
    h = hashlib.sha256()
    for z in sorted(zones):
        h.update(np.ascontiguousarray(zones[z][1:-1, 1:-1]).tobytes())
    return h.hexdigest()[:16]


class _ZoneComm:
    """Boundary send/receive plumbing for one zone."""

    # side 0 = ghost column on the left, side 1 = ghost column on the right

    def __init__(self, ctx: Context, zone: int, zones: int, procs: int, rows: int):
        self.ctx = ctx
        self.zone = zone
        self.zones = zones
        self.procs = procs
        self.recvbuf = [bytearray(rows * 8), bytearray(rows * 8)]

    def neighbours(self):
        if self.zone > 0:
            yield 0, self.zone - 1
        if self.zone < self.zones - 1:
            yield 1, self.zone + 1

    def start(self, u: np.ndarray, phase: int) -> list:
        ctx, reqs = self.ctx, []
        for side, nb in self.neighbours():
            owner = zone_owner(nb, self.zones, self.procs)
            reqs.append(ctx.irecv(self.recvbuf[side], owner, _halo_tag(phase, self.zones, self.zone, side)))
            # our left edge lands in the neighbour's right ghost and vice versa
            col = u[1:-1, 1] if side == 0 else u[1:-1, -2]
            reqs.append(ctx.isend(np.ascontiguousarray(col).tobytes(), owner,
                                  _halo_tag(phase, self.zones, nb, 1 - side)))
        return reqs

    def integrate(self, u: np.ndarray) -> None:
        for side, _ in self.neighbours():
            col = np.frombuffer(self.recvbuf[side], dtype=np.float64)
            if side == 0:
                u[1:-1, 0] = col
            else:
                u[1:-1, -1] = col


def halo_rank(ctx: Context, zones: int, steps: int, mode: str, workers: int,
              seed: int = 0, rows: int = ZONE_ROWS, cols: int = ZONE_COLS,
              events: Optional[list] = None) -> dict[int, np.ndarray]:
    """Run this rank's zones; returns their final arrays.

    ``events`` (optional) collects ``(kind, zone, phase)`` tuples: "start"
    when a zone task begins, "comm" when its boundary exchange completed.
    """
    procs = ctx.size
    local = [z for z in range(zones) if zone_owner(z, zones, procs) == ctx.rank]
    fields = {z: init_zone(z, seed, rows, cols) for z in local}
    comms = {z: _ZoneComm(ctx, z, zones, procs, rows) for z in local}
    log = events.append if events is not None else None
    if mode == "forkjoin":
        _halo_forkjoin(ctx, fields, comms, steps, workers, log)
    elif mode == "continuation":
        _halo_continuation(ctx, fields, comms, steps, workers, log)
    else:
        raise ValueError(f"unknown halo mode {mode!r}")
    return fields


def _halo_forkjoin(ctx, fields, comms, steps, workers, log):
    ex = CoopExecutor(workers, name=f"halo-fj-r{ctx.rank}")
    try:
        for phase in range(steps + 1):
            if phase:
                for z, u in fields.items():
                    ex.submit(jacobi, u)
                ex.join()
            reqs = []
            for z, u in fields.items():
                if log:
                    log(("start", z, phase))
                reqs += comms[z].start(u, phase)
            ctx.waitall(reqs)
            for z, u in fields.items():
                if log:
                    log(("comm", z, phase))
                comms[z].integrate(u)
        if ex.failures:
            raise ex.failures[0][1]
    finally:
        ex.shutdown()


def _halo_continuation(ctx, fields, comms, steps, workers, log):
    cr = ctx.continue_init()
    ex = CoopExecutor(workers, name=f"halo-ct-r{ctx.rank}")
    ex.register_polling_service(polling_service(ctx, cr))

    def task(z, phase, job_holder):
        u = fields[z]
        comm = comms[z]
        if log:
            log(("start", z, phase))
        if phase:
            comm.integrate(u)
            jacobi(u)
        reqs = comm.start(u, phase)
        job = job_holder[0]
        detached_task_guard(ctx, job.events, reqs, cr)

    def submit(z, phase):
        holder: list = []

        def released(job):
            if log:
                log(("comm", z, phase))
            if phase < steps:
                submit(z, phase + 1)

        holder.append(ex.submit(task, z, phase, holder, on_release=released,
                                name=f"zone{z}@{phase}"))

    try:
        for z in fields:
            submit(z, 0)
        while not ex.join(0.05):
            if ex.failures:
                break
        if ex.failures:
            raise ex.failures[0][1]
        # the last exchange also filled the ghosts
        for z, u in fields.items():
            comms[z].integrate(u)
    finally:
        ctx.cr_free(cr)
        ex.shutdown()


def halo_inproc(zones: int, steps: int, mode: str, workers: int, procs: int = 2,
                seed: int = 0, events: Optional[list] = None) -> tuple[float, str]:
    """Returns ``(runtime seconds, checksum)``."""
    if zones < procs:
        raise ValueError(f"need at least as many zones ({zones}) as processes ({procs})")
    world = World(procs)
    results: dict[int, np.ndarray] = {}
    errors: list[BaseException] = []
    lock = threading.Lock()

    def run(rank):
        try:
            out = halo_rank(world[rank], zones, steps, mode, workers, seed, events=events)
            with lock:
                results.update(out)
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=run, args=(r,), daemon=True) for r in range(procs)]
    t0 = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t0
    world.shutdown()
    if errors:
        raise errors[0]
    return elapsed, checksum(results)


GATHER_TAG_BASE = 1 << 40


def gather_zones(ctx: Context, fields: dict[int, np.ndarray], zones: int,
                 rows: int = ZONE_ROWS, cols: int = ZONE_COLS) -> Optional[dict[int, np.ndarray]]:
    """Collect every zone on rank 0 (returns None elsewhere)."""
    if ctx.rank != 0:
        ctx.waitall([ctx.isend(u.tobytes(), 0, GATHER_TAG_BASE + z) for z, u in fields.items()])
        return None
    out = dict(fields)
    for z in range(zones):
        if z in out:
            continue
        buf = bytearray((rows + 2) * (cols + 2) * 8)
        ctx.recv(buf, zone_owner(z, zones, ctx.size), GATHER_TAG_BASE + z)
        out[z] = np.frombuffer(bytes(buf)).reshape(rows + 2, cols + 2)
    return out


# -- deadlock demonstration ---------------------------------------------------

DEMO_MODES = ("threads", "fibers", "fibers-cont")


@dataclass
class DemoOutcome:
    mode: str
    tasks: int
    workers: int
    result: object
    expected: type

    @property
    def as_expected(self) -> bool:
        return isinstance(self.result, self.expected)


def expected_outcome(mode: str, tasks: int, workers: int) -> type:
    if mode == "fibers" and tasks >= workers:
        return Deadlock
    return Completed


def deadlock_demo(mode: str, tasks: int, workers: int, grace: float = 0.5,
                  timeout: float = 30.0) -> DemoOutcome:
    """Receivers created first, then one sender, all on a single rank.

    threads: every task gets its own preemptive thread and blocks in recv.
    fibers: tasks share ``workers`` cooperative workers and block in recv.
    fibers-cont: tasks park on a continuation instead of blocking.
    """
    if mode not in DEMO_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    world = World(1)
    ctx = world[0]
    cr = None
    if mode == "threads":
        ex = PreemptiveExecutor()
    else:
        ex = CoopExecutor(workers, name=f"demo-{mode}")

    def blocking_receiver(i):
        buf = bytearray(4)
        ctx.recv(buf, 0, i)

    def blocking_sender():
        for i in range(tasks):
            ctx.send(struct.pack(">i", i), 0, i)

    try:
        if mode == "fibers-cont":
            cr = ctx.continue_init()
            ex.register_polling_service(polling_service(ctx, cr))

            def parked_receiver(i):
                buf = bytearray(4)
                yield from fiber_block_on(ctx, [ctx.irecv(buf, 0, i)], cr)

            def parked_sender():
                sends = [ctx.isend(struct.pack(">i", i), 0, i) for i in range(tasks)]
                yield from fiber_block_on(ctx, sends, cr)

            for i in range(tasks):
                ex.submit(parked_receiver, i, name=f"recv-{i}")
            ex.submit(parked_sender, name="send")
        else:
            for i in range(tasks):
                ex.submit(blocking_receiver, i, name=f"recv-{i}")
            ex.submit(blocking_sender, name="send")
        result = quiescence_detect(ex, [ctx], grace=grace, timeout=timeout)
    finally:
        if cr is not None and not cr.freed:
            ctx.cr_free(cr)
        ex.stop()
        world.shutdown()
        ex.shutdown()
    if isinstance(result, Completed) and ex.failures:
        raise ex.failures[0][1]
    return DemoOutcome(mode, tasks, workers, result, expected_outcome(mode, tasks, workers))
