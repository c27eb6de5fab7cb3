"""Event dispatchers that node logic runs on.

All protocol and stream code in this package is written callback-style and
never blocks; it asks a runtime for "now", one-shot timers, periodic timers,
and for posting work onto the single dispatcher that owns a node's state.
Two interchangeable runtimes exist:

* :class:`SimRuntime` - a discrete-event scheduler with a virtual clock.
  Given one seed it replays the exact same event order, which is what makes
  whole-cluster simulations reproducible, and it makes timed experiments
  (1-second jobs, heartbeat timeouts) run at event-processing speed instead
  of wall-clock speed.

* :class:`LiveRuntime` - a real-time dispatcher: one thread drains a queue
  of posted callbacks and fires timers from a heap using the monotonic
  clock.  Socket readers, stdin readers and worker processes hand their
  events to it with :meth:`post`, which is the only thread-safe entry point.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
import threading
import time
from typing import Any, Callable, Optional

log = logging.getLogger(__name__)


class Timer:
    """Cancellation handle for a scheduled callback."""

    __slots__ = ("_fn", "_args", "cancelled")

    def __init__(self, fn: Optional[Callable], args: tuple = ()):
        self._fn = fn
        self._args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True
        self._fn = None
        self._args = ()


class Periodic:
    """Cancellation handle for a repeating timer."""

    __slots__ = ("cancelled", "_inner")

    def __init__(self):
        self.cancelled = False
        self._inner: Optional[Timer] = None

    def cancel(self) -> None:
        self.cancelled = True
        if self._inner is not None:
            self._inner.cancel()
            self._inner = None


class Runtime:
    """Shared interface; see module docstring."""

    rng: random.Random

    def now(self) -> float:
        raise NotImplementedError

    def post(self, fn: Callable, *args: Any) -> None:
        raise NotImplementedError

    def call_later(self, delay: float, fn: Callable, *args: Any) -> Timer:
        raise NotImplementedError

    def call_every(self, interval: float, fn: Callable, *args) -> Periodic:
        """Fire `fn(*args)` every `interval` (first fire after one interval)."""
        handle = Periodic()

        def tick() -> None:
            if handle.cancelled:
                return
            fn(*args)
            if not handle.cancelled:
                handle._inner = self.call_later(interval, tick)

        handle._inner = self.call_later(interval, tick)
        return handle

    def log_event(self, event: str) -> None:
        """Record a structured overlay event (sim keeps an ordered log)."""
        log.debug("%s", event)


class SimRuntime(Runtime):
    """Deterministic discrete-event scheduler with a virtual clock."""

    def __init__(self, seed: int = 0, record_events: bool = False):
        self._clock = 0.0
        self._heap: list[tuple[float, int, Timer]] = []
        self._seq = itertools.count()
        self.rng = random.Random(seed)
        self.seed = seed
        self.record_events = record_events
        self.events: list[str] = []

    def now(self) -> float:
        return self._clock

    def post(self, fn: Callable, *args: Any) -> None:
        self.call_later(0.0, fn, *args)

    def call_later(self, delay: float, fn: Callable, *args: Any) -> Timer:
        if delay < 0:
            raise ValueError("negative delay")
        t = Timer(fn, args)
        heapq.heappush(self._heap, (self._clock + delay, next(self._seq), t))
        return t

    def log_event(self, event: str) -> None:
        if self.record_events:
            self.events.append(f"{self._clock:.6f} {event}")
        if log.isEnabledFor(logging.DEBUG):
            log.debug("%s", event)

    # -- driving the simulation ------------------------------------------

    def step(self) -> bool:
        """Run the next pending event; False when nothing is scheduled."""
        heap = self._heap
        while heap:
            when, _, timer = heapq.heappop(heap)
            if timer.cancelled:
                continue
            self._clock = when
            fn, args = timer._fn, timer._args
            timer._fn = timer._args = None
            fn(*args)
            return True
        return False

    def run(self, until: Optional[float] = None, max_events: Optional[int] = None) -> int:
        """Process events in order; stop once virtual time passes `until`.

        Returns the number of events processed.  With `until`, the clock
        advances to `until` even if the heap drained earlier.
        """
        n = 0
        while self._heap:
            if until is not None and self._heap[0][0] > until:
                break
            if max_events is not None and n >= max_events:
                return n
            if self.step():
                n += 1
        if until is not None and self._clock < until:
            self._clock = until
        return n

    def run_until(self, cond: Callable[[], bool], limit: float) -> bool:
        """Run until cond() holds; give up past virtual time `limit`."""
        if cond():
            return True
        while self._heap and self._heap[0][0] <= limit:
            self.step()
            if cond():
                return True
        if self._clock < limit:
            self._clock = limit
        return cond()


class LiveRuntime(Runtime):
    """Real-time dispatcher: posted callbacks + monotonic-clock timers.

    `run()` drains the loop in the calling thread until `stop()`.  `post`
    may be called from any thread; everything else must run on the loop.
    """

    def __init__(self, seed: Optional[int] = None):
        self._cond = threading.Condition()
        self._ready: list[tuple[Callable, tuple]] = []
        self._heap: list[tuple[float, int, Timer]] = []
        self._seq = itertools.count()
        self._stopped = False
        self.rng = random.Random(seed)
        self._thread: Optional[threading.Thread] = None

    def now(self) -> float:
        return time.monotonic()

    def post(self, fn: Callable, *args: Any) -> None:
        with self._cond:
            self._ready.append((fn, args))
            self._cond.notify()

    def call_later(self, delay: float, fn: Callable, *args: Any) -> Timer:
        t = Timer(fn, args)
        with self._cond:
            heapq.heappush(self._heap, (time.monotonic() + max(0.0, delay), next(self._seq), t))
            self._cond.notify()
        return t

    def stop(self) -> None:
        with self._cond:
            self._stopped = True
            self._cond.notify()

    def start_in_thread(self, name: str = "pando-dispatch") -> threading.Thread:
        th = threading.Thread(target=self.run, name=name, daemon=True)
        self._thread = th
        th.start()
        return th

    def run(self) -> None:
        while True:
            batch: list[tuple[Callable, tuple]] = []
            with self._cond:
                while True:
                    if self._stopped:
                        return
                    now = time.monotonic()
                    while self._heap and self._heap[0][0] <= now:
                        _, _, timer = heapq.heappop(self._heap)
                        if not timer.cancelled:
                            self._ready.append((timer._fn, timer._args))
                    if self._ready:
                        batch, self._ready = self._ready, []
                        break
                    timeout = self._heap[0][0] - now if self._heap else None
                    self._cond.wait(timeout)
            for fn, args in batch:
                try:
                    fn(*args)
                except Exception:
                    log.exception("handler failed on dispatcher")
