"""Benchmark and demo command line.

Exit codes: 0 ok or expected outcome, 1 usage error, 2 unexpected outcome,
3 runtime fault.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
import threading
import time
from typing import Optional

from . import bench
from .adapters import Deadlock
from .errors import ContirqError
from .progress import spawn_progress_thread
from .runtime import Context, World
from .transport import parse_peers

EXIT_OK, EXIT_USAGE, EXIT_UNEXPECTED, EXIT_FAULT = 0, 1, 2, 3

log = logging.getLogger("contirq")


class UsageFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError(f"expected non-negative integers, got {text!r}")
    return values


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="contirq", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def transport_opts(sp):
        sp.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
        sp.add_argument("--rank", type=int, default=0, help="this process's rank (tcp)")
        sp.add_argument("--peers", help="host:port per rank, comma separated (tcp)")
        sp.add_argument("--bind", help="listen address host:port (tcp; default: own --peers entry)")
        sp.add_argument("--csv", help="write CSV here instead of stdout")

    sp = sub.add_parser("pingpong", help="round-trip latency, wait path vs continuation reply")
    sp.add_argument("--mode", required=True, choices=bench.MODES)
    sp.add_argument("--sizes", type=_int_list, default=[0, 8, 1024])
    sp.add_argument("--iters", type=_positive, default=1000)
    sp.add_argument("--reps", type=_positive, default=5)
    sp.add_argument("--skip", type=int, default=None, help="warm-up iterations per repetition")
    sp.add_argument("--no-engine", action="store_true",
                    help="build the runtime without continuation support (waitpath only)")
    sp.add_argument("--verify", action="store_true", help="random payloads, checked on return")
    transport_opts(sp)

    sp = sub.add_parser("latency-mt", help="multi-worker latency with parked jobs")
    sp.add_argument("--threads", type=_int_list, default=[1])
    sp.add_argument("--fibers", type=_int_list, default=[1])
    sp.add_argument("--size", type=int, default=1)
    sp.add_argument("--iters", type=_positive, default=100)
    sp.add_argument("--reps", type=_positive, default=5)
    transport_opts(sp)

    sp = sub.add_parser("halo", help="2D stencil with boundary exchange")
    sp.add_argument("--zones", type=_positive, default=16)
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--mode", required=True, choices=("forkjoin", "continuation"))
    sp.add_argument("--workers", type=_positive, default=1)
    sp.add_argument("--procs", type=_positive, default=2, help="in-process ranks (inproc)")
    sp.add_argument("--seed", type=int, default=0)
    transport_opts(sp)

    sp = sub.add_parser("deadlock-demo", help="blocking receives in threads vs fibers")
    sp.add_argument("--mode", required=True, choices=bench.DEMO_MODES)
    sp.add_argument("--tasks", type=_positive, default=8)
    sp.add_argument("--workers", type=_positive, default=4)
    sp.add_argument("--grace", type=float, default=0.5, help="seconds without progress before declaring deadlock")
    return p


def _progress_env() -> Optional[float]:
    if os.environ.get("CONTIRQ_PROGRESS_THREAD", "0") != "1":
        return None
    return int(os.environ.get("CONTIRQ_PROGRESS_INTERVAL_US", "100")) * 1e-6


def _start_progress(contexts) -> None:
    interval = _progress_env()
    if interval is None:
        return
    for ctx in contexts:
        spawn_progress_thread(ctx, interval)


def _tcp_context(args, continuations: bool = True) -> Context:
    if not args.peers:
        raise UsageFailure("--transport tcp needs --peers")
    peers = parse_peers(args.peers)
    if not 0 <= args.rank < len(peers):
        raise UsageFailure(f"--rank {args.rank} outside the {len(peers)} peers given")
    bind = parse_peers(args.bind)[0] if args.bind else None
    ctx = Context.tcp(args.rank, peers, bind=bind, continuations=continuations)
    _start_progress([ctx])
    return ctx


@contextlib.contextmanager
def _output(path: Optional[str]):
    if path:
        with open(path, "w", newline="") as fh:
            yield fh
    else:
        yield sys.stdout


def cmd_pingpong(args) -> int:
    if args.no_engine and args.mode != "waitpath":
        raise UsageFailure("--no-engine only applies to --mode waitpath")
    skip = args.skip if args.skip is not None else min(100, args.iters // 10)
    engine = not args.no_engine
    rows = []
    if args.transport == "tcp":
        ctx = _tcp_context(args, engine)
        if ctx.size != 2:
            raise UsageFailure("pingpong needs exactly 2 ranks")
        try:
            for size in args.sizes:
                reps = []
                for rep in range(args.reps):
                    n = skip + args.iters
                    if ctx.rank == 0:
                        times = bench.pingpong_initiator(ctx, args.mode, size, n, verify=args.verify, seed=rep)
                        reps.append(sum(times[skip:]) / args.iters / 1000.0)
                    else:
                        bench.pingpong_responder(ctx, args.mode, size, n)
                if ctx.rank == 0:
                    rows.append((size, *bench.summarize(reps)))
        finally:
            ctx.close()
        if ctx.rank != 0:
            return EXIT_OK
    else:
        if args.verify:
            raise UsageFailure("--verify is only meaningful with --transport tcp")
        for size in args.sizes:
            world = World(2, continuations=engine)
            _start_progress(world)
            try:
                reps = []
                for _ in range(args.reps):
                    times = bench.pingpong_inproc(args.mode, size, skip + args.iters, world=world)
                    reps.append(sum(times[skip:]) / args.iters / 1000.0)
            finally:
                world.shutdown()
            rows.append((size, *bench.summarize(reps)))
    with _output(args.csv) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["size", "mean_us", "stddev_us"])
        for size, mean, sd in rows:
            w.writerow([size, f"{mean:.3f}", f"{sd:.3f}"])
    return EXIT_OK


def cmd_latency_mt(args) -> int:
    rows = []
    ctx = _tcp_context(args) if args.transport == "tcp" else None
    if ctx is not None and ctx.size != 2:
        raise UsageFailure("latency-mt needs exactly 2 ranks")
    try:
        for t in args.threads:
            for f in args.fibers:
                if t < 1 or f < 1:
                    raise UsageFailure("--threads and --fibers must be >= 1")
                per_rep, messages = [], 0
                for _ in range(args.reps):
                    if ctx is None:
                        res = bench.latency_mt_inproc(t, f, args.size, args.iters)
                        rounds, got = res.round_us, res.received
                    elif ctx.rank == 0:
                        rounds, got = bench.latency_mt_sender(ctx, t * f, args.size, args.iters), None
                    else:
                        got = bench.latency_mt_receiver(ctx, t, f, args.size, args.iters)
                        rounds = None
                    if got is not None:
                        for j, its in got.items():
                            if sorted(its) != list(range(args.iters)):
                                log.error("job %d saw iterations %s", j, its)
                                return EXIT_UNEXPECTED
                        messages += sum(len(v) for v in got.values())
                    else:
                        messages += t * f * args.iters
                    if rounds is not None:
                        per_rep.append(sum(rounds) / len(rounds))
                if per_rep:
                    rows.append((t, f, args.size, *bench.summarize(per_rep), messages))
    finally:
        if ctx is not None:
            ctx.close()
    if ctx is not None and ctx.rank != 0:
        return EXIT_OK
    with _output(args.csv) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threads", "fibers", "size", "mean_us", "stddev_us", "messages"])
        for t, f, size, mean, sd, messages in rows:
            w.writerow([t, f, size, f"{mean:.3f}", f"{sd:.3f}", messages])
    return EXIT_OK


def cmd_halo(args) -> int:
    if args.steps < 0:
        raise UsageFailure("--steps must be >= 0")
    if args.transport == "tcp":
        ctx = _tcp_context(args)
        try:
            if args.zones < ctx.size:
                raise UsageFailure(f"--zones {args.zones} must be >= number of processes {ctx.size}")
            t0 = time.perf_counter()
            fields = bench.halo_rank(ctx, args.zones, args.steps, args.mode, args.workers, args.seed)
            runtime = time.perf_counter() - t0
            gathered = bench.gather_zones(ctx, fields, args.zones)
        finally:
            ctx.close()
        if gathered is None:
            return EXIT_OK
        digest = bench.checksum(gathered)
    else:
        if args.zones < args.procs:
            raise UsageFailure(f"--zones {args.zones} must be >= --procs {args.procs}")
        runtime, digest = bench.halo_inproc(args.zones, args.steps, args.mode, args.workers,
                                            procs=args.procs, seed=args.seed)
    with _output(args.csv) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["runtime", "checksum"])
        w.writerow([f"{runtime:.6f}", digest])
    return EXIT_OK


def cmd_deadlock_demo(args) -> int:
    outcome = bench.deadlock_demo(args.mode, args.tasks, args.workers, grace=args.grace)
    print(f"{args.mode}: {outcome.result}")
    if not outcome.as_expected:
        print(f"expected {outcome.expected.__name__}", file=sys.stderr)
        return EXIT_UNEXPECTED
    return EXIT_OK


COMMANDS = {
    "pingpong": cmd_pingpong,
    "latency-mt": cmd_latency_mt,
    "halo": cmd_halo,
    "deadlock-demo": cmd_deadlock_demo,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "transport", None) == "tcp" and args.command == "deadlock-demo":
        parser.error("deadlock-demo runs in-process only")
    try:
        return COMMANDS[args.command](args)
    except UsageFailure as exc:
        print(f"contirq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContirqError, AssertionError, OSError) as exc:
        print(f"contirq: runtime fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
