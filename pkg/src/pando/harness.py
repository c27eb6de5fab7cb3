"""Cluster assembly, fault injection, and run drivers.

The pieces the CLI and the experiment suite share: build a root plus any
number of in-process volunteers on one runtime (simulated or live), schedule
volunteer kills from a fault plan, collect the ordered output, and dump
diagnostics when a run stalls.

Fault plans are JSON arrays of ``{"at_ms": int, "select": sel, "count": n}``
where ``sel`` is ``"leaf"``, ``"coordinator"``, or ``"id:<16 hex digits>"``.
At each scheduled time the matching live volunteers are counted, ``n`` of
them are picked at random (seeded — deterministic in simulation), and each
picked node is killed the way a dying process dies: every channel closes.
The root is never a target.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, TextIO

from .node import PandoNode
from .overlay import OverlayConfig, TreeNode
from .relay import RelayService
from .runtime import Runtime, SimRuntime
from .streams import DemandSource, Outcome, drain
from .worker import FunctionSpec, JobFunction

log = logging.getLogger(__name__)

__all__ = [
    "FaultEvent",
    "parse_fault_plan",
    "load_fault_plan",
    "Cluster",
    "RunResult",
    "StallError",
    "run_sim",
    "LineSource",
    "StallWatchdog",
    "JitteredFunction",
]


# -- fault plans -----------------------------------------------------------


@dataclass(frozen=True)
class FaultEvent:
    """One scheduled kill: at `at_ms`, stop `count` nodes matching `select`."""

    at_ms: int
    select: str
    count: int = 1


def parse_fault_plan(data: Any) -> list[FaultEvent]:
    """Validate a decoded fault plan; raises ValueError on any malformation."""
    if not isinstance(data, list):
        raise ValueError("fault plan must be a JSON array")
    events = []
    for i, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise ValueError(f"fault plan entry {i} is not an object")
        try:
            at_ms = entry["at_ms"]
            select = entry["select"]
        except KeyError as exc:
            raise ValueError(f"fault plan entry {i} lacks {exc.args[0]!r}") from None
        count = entry.get("count", 1)
        if not isinstance(at_ms, int) or isinstance(at_ms, bool) or at_ms < 0:
            raise ValueError(f"fault plan entry {i}: at_ms must be a non-negative integer")
        if not isinstance(count, int) or isinstance(count, bool) or count < 1:
            raise ValueError(f"fault plan entry {i}: count must be a positive integer")
        if not isinstance(select, str):
            raise ValueError(f"fault plan entry {i}: select must be a string")
        if select not in ("leaf", "coordinator"):
            if not (select.startswith("id:") and _is_hex16(select[3:])):
                raise ValueError(
                    f"fault plan entry {i}: select must be 'leaf', 'coordinator', "
                    f"or 'id:<16 hex digits>', not {select!r}"
                )
        events.append(FaultEvent(at_ms=at_ms, select=select, count=count))
    return events


def _is_hex16(text: str) -> bool:
    if len(text) != 16:
        return False
    try:
        int(text, 16)
    except ValueError:
        return False
    return True


def load_fault_plan(path: str) -> list[FaultEvent]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"fault plan {path}: {exc}") from None
    return parse_fault_plan(data)


# -- experiment job functions ------------------------------------------------


class JitteredFunction(JobFunction):
    """Wraps a synchronous compute with a uniform random completion delay.

    Models a heterogeneous volunteer pool: every job takes its own random
    time in [0, max_delay] (drawn from the runtime's seeded generator), so
    results return out of order and the reordering path is actually
    exercised.  Parse errors surface immediately, like a real fast failure.
    """

    def __init__(self, runtime: Runtime, compute: Callable[[str], str], max_delay: float):
        self._runtime = runtime
        self._compute = compute
        self._max_delay = max_delay

    def apply(self, value: str, done: Callable) -> None:
        from .worker import JobError  # local import to avoid cycle at module load

        try:
            result = self._compute(value)
        except JobError as err:
            done(err.code, None)
            return
        delay = self._runtime.rng.uniform(0.0, self._max_delay)
        self._runtime.call_later(delay, done, None, result)


# -- cluster assembly ---------------------------------------------------------


class Cluster:
    """A root node plus in-process volunteers on one runtime and fabric.

    Owns an embedded relay unless ``relay_addr`` points at an external one.
    Volunteers spawned here are tracked so fault plans can target them.
    """

    def __init__(
        self,
        runtime: Runtime,
        fabric,
        config: OverlayConfig,
        *,
        source: DemandSource,
        fn_spec: FunctionSpec,
        fn: Optional[JobFunction] = None,
        relay_addr: Optional[str] = None,
        relay_hint: Optional[str] = None,
        limit_override: Optional[int] = None,
        failure_budget: Optional[int] = None,
        static_dir: Optional[str] = None,
    ):
        self.runtime = runtime
        self.fabric = fabric
        self.config = config
        self.relay: Optional[RelayService] = None
        if relay_addr is None:
            self.relay = RelayService(runtime, static_dir=static_dir)
            relay_addr = self.relay.listen(fabric, hint=relay_hint)
        self.relay_addr = relay_addr
        kwargs: dict = {}
        if failure_budget is not None:
            kwargs["failure_budget"] = failure_budget
        self.root = PandoNode(
            runtime,
            fabric,
            config,
            is_root=True,
            relay_addr=relay_addr,
            source=source,
            fn=fn,
            fn_spec=fn_spec,
            limit_override=limit_override,
            name="root",
            **kwargs,
        )
        self._limit_override = limit_override
        self.volunteers: list[PandoNode] = []
        self._dead: set[int] = set()  # indexes into self.volunteers
        self._started = False

    # -- build-out ---------------------------------------------------------

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        self.root.start()

    def spawn_volunteer(
        self,
        name: Optional[str] = None,
        *,
        fn: Optional[JobFunction] = None,
        fn_spec: Optional[FunctionSpec] = None,
    ) -> PandoNode:
        """Create and start one volunteer; it joins through the relay."""
        name = name or f"v{len(self.volunteers)}"
        node = PandoNode(
            self.runtime,
            self.fabric,
            self.config,
            relay_addr=self.relay_addr,
            fn=fn,
            fn_spec=fn_spec,
            limit_override=self._limit_override,
            name=name,
        )
        self.volunteers.append(node)
        node.start()
        return node

    def spawn_volunteers(self, n: int, **kw) -> list[PandoNode]:
        return [self.spawn_volunteer(**kw) for _ in range(n)]

    def stop(self) -> None:
        for i, v in enumerate(self.volunteers):
            if i not in self._dead:
                v.stop()
        self._dead.update(range(len(self.volunteers)))
        self.root.stop()

    # -- output collection -----------------------------------------------------

    def collect(
        self,
        on_line: Optional[Callable[[str], None]] = None,
        on_done: Optional[Callable[[Outcome], None]] = None,
    ) -> dict:
        """Drain the root's ordered results; returns {"lines": [...], "done": Outcome|None}."""
        box: dict = {"lines": [], "done": None}

        def each(line: str) -> None:
            box["lines"].append(line)
            if on_line is not None:
                on_line(line)

        def done(outcome: Outcome) -> None:
            box["done"] = outcome
            if on_done is not None:
                on_done(outcome)

        drain(self.root.results, on_each=each, on_done=done)
        return box

    # -- fault injection ---------------------------------------------------------

    def apply_fault_plan(self, plan: Iterable[FaultEvent]) -> None:
        for event in plan:
            self.runtime.call_later(event.at_ms / 1000.0, self._fire_fault, event)

    def _alive(self) -> list[tuple[int, PandoNode]]:
        return [
            (i, v) for i, v in enumerate(self.volunteers) if i not in self._dead
        ]

    @staticmethod
    def _matches(select: str, node: PandoNode) -> bool:
        tree = node.tree
        if select == "leaf":
            return tree.parent_ctrl is not None and tree.connected_children == 0
        if select == "coordinator":
            return tree.connected_children > 0
        return tree.node_id == select[3:]  # "id:<hex>"

    def _fire_fault(self, event: FaultEvent) -> None:
        candidates = [
            (i, v) for i, v in self._alive() if self._matches(event.select, v)
        ]
        if not candidates:
            log.warning(
                "fault plan: selector %r matched no live volunteer at t=%.3f",
                event.select,
                self.runtime.now(),
            )
            return
        if len(candidates) < event.count:
            log.warning(
                "fault plan: selector %r matched %d volunteers, wanted %d",
                event.select,
                len(candidates),
                event.count,
            )
        picked = self.runtime.rng.sample(candidates, min(event.count, len(candidates)))
        for i, node in picked:
            log.info("fault plan: killing %s (id=%s)", node.name, node.tree.node_id)
            self._dead.add(i)
            node.stop()

    def kill_volunteer(self, node: PandoNode) -> None:
        """Kill one specific volunteer now (test convenience)."""
        for i, v in enumerate(self.volunteers):
            if v is node and i not in self._dead:
                self._dead.add(i)
                node.stop()
                return

    def vanish_volunteer(self, node: PandoNode) -> None:
        """Silently crash one specific volunteer; peers must notice by timeout."""
        for i, v in enumerate(self.volunteers):
            if v is node and i not in self._dead:
                self._dead.add(i)
                node.vanish()
                return

    # -- diagnostics ------------------------------------------------------------

    def describe(self) -> str:
        lines = [self.root.describe()]
        for i, v in enumerate(self.volunteers):
            if i in self._dead:
                lines.append(f"{v.name}: dead")
            else:
                lines.append(v.describe())
        return "\n".join(lines)


# -- simulated runs ------------------------------------------------------------


@dataclass
class RunResult:
    lines: list[str] = field(default_factory=list)
    outcome: Optional[Outcome] = None
    finished_at: float = 0.0

    @property
    def failed(self) -> bool:
        return self.outcome is not None and self.outcome.is_failure


class StallError(RuntimeError):
    """A simulated run did not complete within its virtual-time budget."""


def run_sim(cluster: Cluster, *, limit: float) -> RunResult:
    """Drive a SimRuntime cluster until its output stream terminates.

    `limit` is an absolute virtual-time bound; blowing it raises StallError
    carrying a full cluster dump.
    """
    runtime = cluster.runtime
    if not isinstance(runtime, SimRuntime):
        raise TypeError("run_sim drives SimRuntime clusters only")
    box = cluster.collect()
    cluster.start()
    finished = runtime.run_until(lambda: box["done"] is not None, limit=limit)
    if not finished:
        raise StallError(
            f"run incomplete at virtual t={runtime.now():.3f}s "
            f"({len(box['lines'])} lines out)\n" + cluster.describe()
        )
    return RunResult(
        lines=box["lines"], outcome=box["done"], finished_at=runtime.now()
    )


# -- live-mode input -----------------------------------------------------------


class LineSource:
    """Demand-driven line reader for live runs.

    Each request reads exactly one line — a blocking ``readline`` on a helper
    thread — so upstream input is consumed only as fast as the cluster grants
    credit (an infinite ``count`` upstream stays blocked on a full pipe).
    """

    _STOP = object()

    def __init__(self, runtime: Runtime, stream: TextIO):
        self._runtime = runtime
        self._stream = stream
        self._requests: queue.Queue = queue.Queue()
        self._thread: Optional[threading.Thread] = None
        self._done = False

    def _ensure_thread(self) -> None:
        if self._thread is None:
            self._thread = threading.Thread(
                target=self._read_loop, name="pando-stdin", daemon=True
            )
            self._thread.start()

    def _read_loop(self) -> None:
        while True:
            deliver = self._requests.get()
            if deliver is self._STOP:
                return
            try:
                line = self._stream.readline()
            except ValueError:  # stream closed under us
                line = ""
            if line == "":
                self._runtime.post(deliver, Outcome.end())
                return
            self._runtime.post(deliver, Outcome.ok(line.rstrip("\n")))

    def __call__(self, abort: bool, deliver: Callable[[Outcome], None]) -> None:
        if abort or self._done:
            self._done = True
            self._requests.put(self._STOP)
            deliver(Outcome.end())
            return
        self._ensure_thread()
        self._requests.put(deliver)


# -- stall watchdog -----------------------------------------------------------


class StallWatchdog:
    """Dumps diagnostic state after a configurable stretch of inactivity.

    ``pat()`` marks progress (an output line, a settled result).  If nothing
    pats the dog for `timeout` seconds, `dump` is called with a description
    of the silence; the watchdog then re-arms so a persistent stall reports
    periodically rather than once.
    """

    def __init__(
        self,
        runtime: Runtime,
        timeout: float,
        dump: Callable[[str], None],
    ):
        if timeout <= 0:
            raise ValueError("watchdog timeout must be positive")
        self._runtime = runtime
        self._timeout = timeout
        self._dump = dump
        self._last = runtime.now()
        self._stopped = False
        self._timer = runtime.call_later(timeout, self._check)

    def pat(self) -> None:
        self._last = self._runtime.now()

    def stop(self) -> None:
        self._stopped = True
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None

    def _check(self) -> None:
        if self._stopped:
            return
        idle = self._runtime.now() - self._last
        if idle >= self._timeout:
            self._dump(f"no progress for {idle:.1f}s")
            self._last = self._runtime.now()  # report again after another full window
            remaining = self._timeout
        else:
            remaining = self._timeout - idle
        self._timer = self._runtime.call_later(remaining, self._check)
