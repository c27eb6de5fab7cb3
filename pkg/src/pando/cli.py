"""Command-line interface: the pipeline tool plus its experiment helpers.

``pando run`` is a Unix filter: lines in, one result line out per input
line, in input order, computed by whatever volunteers join the tree (or
locally when nobody does).  The helper subcommands reproduce the classic
measurement pipeline::

    pando count | pando run --fn square --local 4 | pando expect-square

Exit codes everywhere: 0 success, 1 stream failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
import threading
import time
from typing import Callable, Optional

from .bench import DEFAULT_GRID, run_speedup_grid, to_csv, to_gnuplot
from .harness import Cluster, LineSource, StallWatchdog, load_fault_plan
from .node import PandoNode
from .overlay import OverlayConfig
from .runtime import LiveRuntime
from .transport import InprocFabric, SocketFabric
from .worker import parse_function_spec

log = logging.getLogger(__name__)

__all__ = ["main"]


class ConfigError(Exception):
    """Bad flags or files; maps to exit code 2."""


def main(argv: Optional[list] = None) -> int:
    logging.basicConfig(
        level=os.environ.get("PANDO_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"pando: {err}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pando",
        description="Order-preserving volunteer computing as a Unix filter.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="map stdin lines through volunteers")
    run.add_argument("--fn", required=True, help="builtin name or exec:PATH")
    run.add_argument("--max-degree", type=int, default=10, metavar="K")
    run.add_argument(
        "--limit", type=int, default=None, metavar="N",
        help="pin every in-flight window to N",
    )
    relaying = run.add_mutually_exclusive_group()
    relaying.add_argument("--relay", metavar="HOST:PORT", help="use an external relay")
    relaying.add_argument(
        "--relay-port", type=int, metavar="P", help="embedded relay port (socket mode)"
    )
    run.add_argument("--transport", choices=("inproc", "socket"), default="inproc")
    run.add_argument(
        "--local", type=int, default=0, metavar="N",
        help="spawn N volunteers inside this process",
    )
    run.add_argument("--seed", type=int, default=None, metavar="S")
    run.add_argument("--faults", metavar="PLAN.JSON", help="scheduled volunteer kills")
    run.add_argument(
        "--stall-timeout", type=float, default=0.0, metavar="SECS",
        help="dump diagnostics after this much inactivity (0 = off)",
    )
    run.add_argument(
        "--serve-web", metavar="DIR",
        help="serve this directory over HTTP from the embedded relay (socket mode)",
    )
    run.set_defaults(func=cmd_run)

    vol = sub.add_parser("volunteer", help="join a relay as a worker process")
    vol.add_argument("--relay", required=True, metavar="HOST:PORT")
    vol.add_argument("--fn", help="local function override (required for exec:)")
    vol.add_argument("--max-degree", type=int, default=10, metavar="K")
    vol.add_argument("--seed", type=int, default=None, metavar="S")
    vol.add_argument("--name", help="diagnostic name")
    vol.set_defaults(func=cmd_volunteer)

    count = sub.add_parser("count", help="print 0,1,2,... one per line")
    count.add_argument("--to", type=int, default=None, metavar="N")
    count.set_defaults(func=cmd_count)

    expect = sub.add_parser(
        "expect-square", help="verify stdin is exactly 0,1,4,9,..."
    )
    expect.set_defaults(func=cmd_expect_square)

    thru = sub.add_parser("throughput", help="pass lines through, measuring rates")
    thru.add_argument("--interval", type=int, default=1000, metavar="MS")
    thru.set_defaults(func=cmd_throughput)

    bench = sub.add_parser("bench-speedup", help="volunteer-scaling experiment")
    bench.add_argument(
        "--grid", default=",".join(str(n) for n in DEFAULT_GRID), metavar="N,N,..."
    )
    bench.add_argument("--seed", type=int, default=1, metavar="S")
    bench.add_argument("--job-seconds", type=float, default=1.0, metavar="SECS")
    bench.add_argument("--target-seconds", type=float, default=60.0, metavar="SECS")
    bench.add_argument("--max-degree", type=int, default=10, metavar="K")
    bench.add_argument("--gnuplot", metavar="FILE", help="also write a plot data file")
    bench.set_defaults(func=cmd_bench_speedup)

    return parser


# -- run ----------------------------------------------------------------------


def _overlay_config(max_degree: int) -> OverlayConfig:
    try:
        return OverlayConfig(max_degree=max_degree)
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _parse_spec(text: str):
    try:
        return parse_function_spec(text)
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _check_hostport(text: str) -> str:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"expected HOST:PORT, got {text!r}")
    try:
        int(port)
    except ValueError:
        raise ConfigError(f"bad port in {text!r}") from None
    return text


def _interruptible_wait(event: threading.Event) -> None:
    # Plain Event.wait() can swallow Ctrl+C; poll so SIGINT lands promptly.
    while not event.wait(0.2):
        pass


def cmd_run(args) -> int:
    spec = _parse_spec(args.fn)
    if args.limit is not None and args.limit < 1:
        raise ConfigError("--limit must be >= 1")
    if args.local < 0:
        raise ConfigError("--local must be >= 0")
    config = _overlay_config(args.max_degree)
    plan = []
    if args.faults:
        try:
            plan = load_fault_plan(args.faults)
        except (OSError, ValueError) as err:
            raise ConfigError(f"fault plan: {err}") from None
    if args.transport == "inproc":
        if args.relay or args.relay_port is not None:
            raise ConfigError("--relay/--relay-port need --transport socket")
        if args.serve_web:
            raise ConfigError("--serve-web needs --transport socket")
    if args.relay:
        _check_hostport(args.relay)

    runtime = LiveRuntime(seed=args.seed)
    if args.transport == "socket":
        fabric = SocketFabric(runtime)
        relay_hint = f"0.0.0.0:{args.relay_port or 0}"
    else:
        fabric = InprocFabric(runtime)
        relay_hint = "relay"

    try:
        try:
            cluster = Cluster(
                runtime,
                fabric,
                config,
                source=LineSource(runtime, sys.stdin),
                fn_spec=spec,
                relay_addr=args.relay,
                relay_hint=relay_hint,
                limit_override=args.limit,
                static_dir=args.serve_web,
            )
        except (ValueError, TypeError, OSError) as err:
            raise ConfigError(str(err)) from None

        done = threading.Event()
        registered = threading.Event()
        box: dict = {"outcome": None, "dog": None, "pipe_closed": False}
        cluster.root.tree.on_identity = lambda _id: registered.set()

        def on_line(line: str) -> None:
            if not _emit(line):
                if not box["pipe_closed"]:
                    box["pipe_closed"] = True
                    done.set()
                return
            if box["dog"] is not None:
                box["dog"].pat()

        def on_done(outcome) -> None:
            box["outcome"] = outcome
            done.set()

        cluster.collect(on_line=on_line, on_done=on_done)
        runtime.start_in_thread()
        runtime.post(cluster.start)
        if not registered.wait(10.0):
            runtime.post(cluster.stop)
            runtime.stop()
            raise ConfigError(f"no relay reachable at {cluster.relay_addr}")
        if cluster.relay is not None and args.transport == "socket":
            print(f"pando: relay listening on {cluster.relay_addr}", file=sys.stderr)

        def arm() -> None:
            if args.local:
                cluster.spawn_volunteers(args.local)
            if plan:
                cluster.apply_fault_plan(plan)
            if args.stall_timeout > 0:
                box["dog"] = StallWatchdog(
                    runtime, args.stall_timeout, dump=_dump_for(cluster)
                )

        runtime.post(arm)
        _interruptible_wait(done)

        outcome = box["outcome"]
        if box["pipe_closed"]:
            return 141  # downstream hung up; die like any pipe-killed filter
        if outcome.is_failure:
            err = outcome.error
            print(f"pando: stream failed: {err.code}: {err.message}", file=sys.stderr)
            return 1
        return 0
    finally:
        stopped = threading.Event()
        runtime.post(lambda: (cluster.stop(), stopped.set()))
        stopped.wait(2.0)
        runtime.stop()
        if isinstance(fabric, SocketFabric):
            fabric.stop()


def _dump_for(cluster: Cluster) -> Callable[[str], None]:
    def dump(message: str) -> None:
        print(f"pando: watchdog: {message}", file=sys.stderr)
        print(cluster.describe(), file=sys.stderr)
        sys.stderr.flush()

    return dump


# -- volunteer -------------------------------------------------------------------


def cmd_volunteer(args) -> int:
    _check_hostport(args.relay)
    spec = _parse_spec(args.fn) if args.fn else None
    config = _overlay_config(args.max_degree)
    runtime = LiveRuntime(seed=args.seed)
    fabric = SocketFabric(runtime)
    try:
        try:
            node = PandoNode(
                runtime,
                fabric,
                config,
                relay_addr=args.relay,
                fn_spec=spec,
                name=args.name or f"vol-{os.getpid()}",
            )
        except (ValueError, TypeError, OSError) as err:
            raise ConfigError(str(err)) from None
        runtime.start_in_thread()
        runtime.post(node.start)
        print(f"pando: volunteering via {args.relay}", file=sys.stderr)
        _interruptible_wait(threading.Event())  # until killed
        return 0
    finally:
        stopped = threading.Event()
        runtime.post(lambda: (node.stop(), stopped.set()))
        stopped.wait(2.0)
        runtime.stop()
        fabric.stop()


# -- pipeline helper tools ------------------------------------------------------


def _emit(line: str) -> bool:
    """Write one stdout line; False once the reader is gone."""
    try:
        sys.stdout.write(line + "\n")
        sys.stdout.flush()
        return True
    except (BrokenPipeError, ValueError):
        try:
            devnull = os.open(os.devnull, os.O_WRONLY)
            os.dup2(devnull, sys.stdout.fileno())
        except OSError:
            pass
        return False


def cmd_count(args) -> int:
    if args.to is not None and args.to < 0:
        raise ConfigError("--to must be >= 0")
    numbers = range(args.to) if args.to is not None else itertools.count()
    for i in numbers:
        if not _emit(str(i)):
            break
    return 0


def cmd_expect_square(args) -> int:
    for i in itertools.count():
        line = sys.stdin.readline()
        if line == "":
            return 0
        got = line.rstrip("\n")
        want = str(i * i)
        if got != want:
            print(
                f"pando expect-square: line {i + 1}: expected {want} got {got}",
                file=sys.stderr,
            )
            return 1
        if not _emit(got):
            return 0


def cmd_throughput(args) -> int:
    if args.interval < 1:
        raise ConfigError("--interval must be >= 1 ms")
    interval = args.interval / 1000.0
    start = time.monotonic()
    lock = threading.Lock()
    counts = {"total": 0, "window": 0}
    stop = threading.Event()

    def report() -> None:
        while not stop.wait(interval):
            with lock:
                window = counts["window"]
                counts["window"] = 0
                total = counts["total"]
            elapsed = time.monotonic() - start
            print(
                f"throughput: t={elapsed:.1f}s window={window}"
                f" ({window / interval:.1f}/s) total={total}"
                f" ({total / elapsed:.1f}/s)",
                file=sys.stderr,
            )

    reporter = threading.Thread(target=report, name="pando-throughput", daemon=True)
    reporter.start()
    try:
        while True:
            line = sys.stdin.readline()
            if line == "":
                break
            with lock:
                counts["total"] += 1
                counts["window"] += 1
            if not _emit(line.rstrip("\n")):
                break
    finally:
        stop.set()
        elapsed = time.monotonic() - start
        total = counts["total"]
        rate = total / elapsed if elapsed > 0 else 0.0
        print(
            f"throughput: overall {total} lines in {elapsed:.2f}s ({rate:.2f}/s)",
            file=sys.stderr,
        )
    return 0


# -- speedup experiment ------------------------------------------------------------


def cmd_bench_speedup(args) -> int:
    try:
        grid = [int(part) for part in args.grid.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"bad --grid {args.grid!r}") from None
    if not grid or any(n < 1 for n in grid):
        raise ConfigError("--grid needs positive volunteer counts")
    if args.job_seconds <= 0 or args.target_seconds <= 0:
        raise ConfigError("--job-seconds and --target-seconds must be positive")
    if args.max_degree < 1:
        raise ConfigError("--max-degree must be >= 1")

    def progress(point) -> None:
        state = "FAILED" if point.failed else (
            f"rate={point.rate:.2f}/s ratio={point.ratio:.3f}"
        )
        print(
            f"bench-speedup: N={point.volunteers} jobs={point.jobs} {state}",
            file=sys.stderr,
        )
        sys.stderr.flush()

    points = run_speedup_grid(
        grid,
        seed=args.seed,
        job_seconds=args.job_seconds,
        target_seconds=args.target_seconds,
        max_degree=args.max_degree,
        on_point=progress,
    )
    sys.stdout.write(to_csv(points))
    sys.stdout.flush()
    if args.gnuplot:
        with open(args.gnuplot, "w", encoding="utf-8") as fh:
            fh.write(to_gnuplot(points))
    return 1 if any(p.failed for p in points) else 0


if __name__ == "__main__":
    sys.exit(main())
