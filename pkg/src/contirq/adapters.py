"""Task-runtime integration: parked jobs and detached-task event counters.

Jobs running on a ``CoopExecutor`` are generators. A job parks by yielding
a ``Latch``; the worker thread is then free to run other jobs until the
latch is set, possibly from a continuation running on another thread::

    def job(ctx, cr):
        req = ctx.irecv(buf, 0, tag)
        statuses = yield from fiber_block_on(ctx, [req], cr)

Plain functions are accepted too; they simply occupy a worker until they
return, which is what a fiber blocked inside a library call does.
"""

from __future__ import annotations

import inspect
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

from .errors import RuntimeFault, Shutdown
from .requests import StatusRecord

log = logging.getLogger(__name__)

DEADLOCK_GRACE = 0.5


class ExecutorShutdown(Shutdown):
    pass


class Latch:
    """One-shot wake latch. ``set`` before the park is not lost."""

    __slots__ = ("_lock", "is_set", "_waiter")

    def __init__(self):
        self._lock = threading.Lock()
        self.is_set = False
        self._waiter = None

    def set(self) -> None:
        with self._lock:
            self.is_set = True
            waiter, self._waiter = self._waiter, None
        if waiter is not None:
            executor, job = waiter
            executor._wake(job)

    def _park(self, executor, job) -> bool:
        """Register ``job`` as waiting; False if already set."""
        with self._lock:
            if self.is_set:
                return False
            self._waiter = (executor, job)
            return True


class EventCounter:
    """Counter gating a task's dependency release.

    ``on_zero`` runs each time the count drops to zero. Going negative is a
    fault.
    """

    def __init__(self, on_zero: Optional[Callable[[], None]] = None, initial: int = 0):
        if initial < 0:
            raise ValueError("initial count must be >= 0")
        self.value = initial
        self.on_zero = on_zero
        self._lock = threading.Lock()

    def increase(self, n: int = 1) -> None:
        with self._lock:
            self.value += n

    def decrease(self, n: int = 1) -> None:
        with self._lock:
            self.value -= n
            value = self.value
        if value < 0:
            raise RuntimeFault(f"event counter went negative ({value})")
        if value == 0 and self.on_zero is not None:
            self.on_zero()


class Job:
    """A unit of work on an executor.

    Its event counter starts at 1 for the body itself; dependencies are
    released (``on_release``) once the body returned and every event bound
    with ``detached_task_guard`` has been fulfilled.
    """

    def __init__(self, fn: Callable, args: tuple, on_release: Optional[Callable[["Job"], None]], name: str):
        self.fn = fn
        self.args = args
        self.name = name
        self.on_release = on_release
        self.events = EventCounter(self._released, initial=1)
        self.result: Any = None
        self.error: Optional[BaseException] = None
        self.finished = False
        self.released = threading.Event()
        self._gen = None
        self._send: Any = None
        self._executor: Any = None

    def __repr__(self):
        return f"<Job {self.name}>"

    def _released(self) -> None:
        self.released.set()
        if self.on_release is not None:
            self.on_release(self)
        if self._executor is not None:
            self._executor._job_released(self)


class _ExecutorBase:
    def __init__(self):
        self._lock = threading.Lock()
        self._all_released = threading.Condition(self._lock)
        self._unreleased = 0
        self._steps = 0
        self.failures: list[tuple[Job, BaseException]] = []

    def _new_job(self, fn, args, on_release, name) -> Job:
        job = Job(fn, args, on_release, name or getattr(fn, "__name__", "job"))
        job._executor = self
        with self._lock:
            self._unreleased += 1
        return job

    def _job_released(self, job: Job) -> None:
        with self._lock:
            self._unreleased -= 1
            self._steps += 1
            if self._unreleased == 0:
                self._all_released.notify_all()

    @property
    def unreleased(self) -> int:
        return self._unreleased

    @property
    def steps(self) -> int:
        return self._steps

    def join(self, timeout: Optional[float] = None) -> bool:
        """Wait until every submitted job has been released."""
        with self._lock:
            return self._all_released.wait_for(lambda: self._unreleased == 0, timeout)


class CoopExecutor(_ExecutorBase):
    """W worker threads running jobs cooperatively from one FIFO queue.

    A running job is never preempted; it gives its worker up only by
    returning or by parking on a latch. Idle workers invoke the registered
    polling services.
    """

    def __init__(self, workers: int, name: str = "coop", poll_interval: float = 50e-6):
        super().__init__()
        if workers < 1:
            raise ValueError("need at least one worker")
        self.workers = workers
        self.poll_interval = poll_interval
        self._runnable: deque[Job] = deque()
        self._cv = threading.Condition(threading.Lock())
        self._parked: set[Job] = set()
        self._services: list[Callable[[], bool]] = []
        self._services_lock = threading.Lock()
        self._stopping = False
        self.worker_state = ["idle"] * workers
        self.worker_ident = [0] * workers
        self._threads = [threading.Thread(target=self._worker, args=(i,), daemon=True,
                                          name=f"{name}-worker-{i}")
                         for i in range(workers)]
        for t in self._threads:
            t.start()

    def submit(self, fn: Callable, *args, on_release: Optional[Callable[[Job], None]] = None,
               name: Optional[str] = None) -> Job:
        if self._stopping:
            raise ExecutorShutdown("executor is shut down")
        job = self._new_job(fn, args, on_release, name)
        self._wake(job)
        return job

    def register_polling_service(self, fn: Callable[[], bool]) -> Callable[[], bool]:
        """Run ``fn`` from idle workers until it returns True."""
        with self._services_lock:
            self._services.append(fn)
        with self._cv:
            self._cv.notify_all()
        return fn

    def unregister_polling_service(self, fn: Callable[[], bool]) -> None:
        with self._services_lock:
            if fn in self._services:
                self._services.remove(fn)

    @property
    def parked(self) -> int:
        return len(self._parked)

    def _wake(self, job: Job) -> None:
        with self._cv:
            self._parked.discard(job)
            self._runnable.append(job)
            self._cv.notify()

    def _run_services(self) -> bool:
        services = self._services
        if not services:
            return False
        with self._services_lock:
            services = list(services)
        for fn in services:
            try:
                done = fn()
            except Shutdown:
                done = True
            if done:
                self.unregister_polling_service(fn)
        return True

    def _next_job(self, i: int) -> Optional[Job]:
        while True:
            with self._cv:
                if self._stopping:
                    return None
                if self._runnable:
                    self.worker_state[i] = "running"
                    return self._runnable.popleft()
                self.worker_state[i] = "idle"
                if not self._services:
                    self._cv.wait()
                    continue
            self._run_services()
            with self._cv:
                if not self._runnable and not self._stopping:
                    self._cv.wait(self.poll_interval)

    def _worker(self, i: int) -> None:
        self.worker_ident[i] = threading.get_ident()
        while True:
            job = self._next_job(i)
            if job is None:
                return
            self._step(job)
            with self._lock:
                self._steps += 1

    def _step(self, job: Job) -> None:
        try:
            if job._gen is None:
                out = job.fn(*job.args)
                if not inspect.isgenerator(out):
                    self._finish(job, out)
                    return
                job._gen = out
                token = next(out)
            else:
                send, job._send = job._send, None
                if isinstance(send, BaseException):
                    token = job._gen.throw(send)
                else:
                    token = job._gen.send(send)
        except StopIteration as stop:
            self._finish(job, stop.value)
            return
        except BaseException as exc:
            self._fail(job, exc)
            return
        if not isinstance(token, Latch):
            self._fail(job, TypeError(f"job yielded {token!r}; only Latch objects park"))
            return
        with self._cv:
            self._parked.add(job)
        if not token._park(self, job):
            self._wake(job)

    def _finish(self, job: Job, result: Any) -> None:
        job.result = result
        job.finished = True
        job.events.decrease(1)

    def _fail(self, job: Job, exc: BaseException) -> None:
        if not isinstance(exc, Shutdown):
            log.error("job %s failed: %r", job.name, exc)
        job.error = exc
        with self._lock:
            self.failures.append((job, exc))
        job.finished = True
        job.events.decrease(1)

    def stop(self) -> None:
        """Stop handing out jobs; queued jobs are dropped."""
        with self._cv:
            self._stopping = True
            self._cv.notify_all()

    def shutdown(self, timeout: float = 5.0) -> None:
        """Stop the workers; parked jobs are resumed with ExecutorShutdown."""
        with self._cv:
            self._stopping = True
            parked = list(self._parked)
            self._parked.clear()
            self._cv.notify_all()
        for job in parked:
            if job._gen is not None:
                try:
                    job._gen.throw(ExecutorShutdown("executor shut down while parked"))
                except BaseException:
                    pass
            if not job.finished:
                job.finished = True
                job.events.decrease(1)
        deadline = time.monotonic() + timeout
        for t in self._threads:
            if t is not threading.current_thread():
                t.join(max(0.0, deadline - time.monotonic()))


class PreemptiveExecutor(_ExecutorBase):
    """One OS thread per job; the kernel schedules them preemptively."""

    def __init__(self, name: str = "threads"):
        super().__init__()
        self.name = name
        self._threads: list[threading.Thread] = []
        self._jobs: list[Job] = []

    def submit(self, fn: Callable, *args, on_release=None, name=None) -> Job:
        job = self._new_job(fn, args, on_release, name)
        t = threading.Thread(target=self._run, args=(job,), daemon=True,
                             name=f"{self.name}-{len(self._threads)}")
        self._threads.append(t)
        self._jobs.append(job)
        t.start()
        return job

    def _run(self, job: Job) -> None:
        try:
            job.result = job.fn(*job.args)
        except BaseException as exc:
            if not isinstance(exc, Shutdown):
                log.error("job %s failed: %r", job.name, exc)
            job.error = exc
            with self._lock:
                self.failures.append((job, exc))
        job.finished = True
        job.events.decrease(1)

    @property
    def worker_state(self) -> list[str]:
        return ["running" if t.is_alive() else "idle" for t in self._threads]

    @property
    def worker_ident(self) -> list[int]:
        return [t.ident or 0 for t in self._threads]

    @property
    def parked(self) -> int:
        return 0

    def stop(self) -> None:
        pass

    def shutdown(self, timeout: float = 5.0) -> None:
        deadline = time.monotonic() + timeout
        for t in self._threads:
            t.join(max(0.0, deadline - time.monotonic()))


def _wake_latch(statuses, latch: Latch) -> None:
    latch.set()


def fiber_block_on(ctx, ops: Sequence, cr):
    """Park the calling job until all ``ops`` completed; returns statuses.

    Use with ``yield from`` inside a generator job. If everything already
    completed, returns without parking.
    """
    latch = Latch()
    statuses = [StatusRecord() for _ in ops]
    if not ctx.attach_continueall(ops, _wake_latch, latch, statuses, cr):
        yield latch
    return statuses


def _fulfil_event(statuses, counter: EventCounter) -> None:
    counter.decrease(1)


def detached_task_guard(ctx, counter: EventCounter, ops: Sequence, cr) -> bool:
    """Hold ``counter`` until all ``ops`` completed.

    The counter is raised before the continuation is bound and lowered by
    it; on immediate completion it is lowered inline. Returns the flag.
    """
    counter.increase(1)
    flag = ctx.attach_continueall(ops, _fulfil_event, counter, None, cr)
    if flag:
        counter.decrease(1)
    return flag


@dataclass
class Completed:
    elapsed: float = 0.0

    def __str__(self):
        return f"Completed in {self.elapsed:.3f}s"


@dataclass
class Deadlock:
    stuck_operations: list[str] = field(default_factory=list)
    blocked_workers: int = 0
    parked_jobs: int = 0
    unreleased_jobs: int = 0
    elapsed: float = 0.0

    def __str__(self):
        ops = ", ".join(self.stuck_operations[:8])
        more = len(self.stuck_operations) - 8
        if more > 0:
            ops += f", ... (+{more})"
        return (f"Deadlock after {self.elapsed:.3f}s: {self.blocked_workers} workers blocked, "
                f"{self.parked_jobs} jobs parked, {self.unreleased_jobs} jobs unreleased; "
                f"stuck operations: {ops or 'none'}")


def quiescence_detect(executor, contexts: Sequence, grace: float = DEADLOCK_GRACE,
                      timeout: Optional[float] = None, interval: float = 0.005):
    """Watch ``executor`` until all its jobs are released or it is stuck.

    Reports Deadlock once, for ``grace`` seconds, nothing progressed, every
    worker is idle or blocked inside the runtime, no message is in flight
    and some operation is still pending. With ``timeout``, gives up with a
    Deadlock report after that long regardless.
    """
    start = time.monotonic()
    last_sig = None
    since = start
    while True:
        now = time.monotonic()
        if executor.unreleased == 0:
            return Completed(now - start)
        sig = (executor.steps, tuple(c.epoch for c in contexts))
        if sig != last_sig:
            last_sig, since = sig, now
        elif now - since >= grace:
            blocked_idents = set()
            for c in contexts:
                blocked_idents.update(c.blocked)
            states = list(executor.worker_state)
            idents = list(executor.worker_ident)
            blocked = sum(1 for s, t in zip(states, idents) if s == "running" and t in blocked_idents)
            stuck_workers = all(s == "idle" or t in blocked_idents for s, t in zip(states, idents))
            in_flight = sum(c.endpoint.pending() for c in contexts)
            pending = [op for c in contexts for op in c.pending_operations()]
            if stuck_workers and not in_flight and pending:
                return Deadlock([f"rank {op.ctx.rank} {op.kind.value} peer={op.peer} tag={op.tag}"
                                 for op in pending], blocked, executor.parked,
                                executor.unreleased, now - start)
        if timeout is not None and now - start >= timeout:
            pending = [op for c in contexts for op in c.pending_operations()]
            return Deadlock([f"rank {op.ctx.rank} {op.kind.value} peer={op.peer} tag={op.tag}"
                             for op in pending], 0, executor.parked, executor.unreleased, now - start)
        time.sleep(interval)
