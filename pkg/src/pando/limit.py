"""Credit gate: bounds in-flight (delivered, unreleased) values per consumer.

A :class:`LimitGate` wraps a demand source.  Each delivered value consumes
one credit; the consumer gives the credit back by calling :meth:`release`
when the corresponding result has come home.  Requests that arrive with no
credit available park in FIFO order and are served as releases arrive, which
converts an eager consumer back into demand-driven flow and — crucially —
bounds how many values can be lost when that consumer dies.

Capacity is retunable at runtime (:meth:`set_capacity`): raising it serves
parked requests immediately; lowering it never revokes delivered values, the
excess simply drains as releases come in.
"""

from __future__ import annotations

import threading
from collections import deque
from typing import Any, Callable, Optional

from .streams import DemandSource, Outcome

__all__ = ["LimitGate"]


class LimitGate:
    """Demand source that forwards at most `capacity` unreleased values."""

    def __init__(self, source: DemandSource, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self._source = source
        self._capacity = capacity
        self._in_flight = 0
        self._waiters: deque[Callable[[Outcome], None]] = deque()
        self._upstream_pending = False
        self._abort_wanted = False
        self._terminal: Optional[Outcome] = None
        self._lock = threading.RLock()

    # -- demand-source protocol --------------------------------------------

    def __call__(self, abort: bool, deliver: Callable[[Outcome], None]) -> None:
        with self._lock:
            if self._terminal is not None:
                deliver(self._terminal)
                return
            if abort:
                self._terminal = Outcome.end()
                waiters, self._waiters = list(self._waiters), deque()
                if self._upstream_pending:
                    self._abort_wanted = True
                else:
                    self._source(True, lambda _o: None)
                for w in waiters:
                    w(self._terminal)
                deliver(self._terminal)
                return
            if self._upstream_pending or self._in_flight >= self._capacity:
                self._waiters.append(deliver)
                return
            self._forward(deliver)

    def _forward(self, deliver: Callable[[Outcome], None]) -> None:
        self._upstream_pending = True

        def on_delivery(outcome: Outcome) -> None:
            with self._lock:
                self._upstream_pending = False
                if self._abort_wanted:
                    self._abort_wanted = False
                    if not outcome.is_terminal:
                        self._source(True, lambda _o: None)
                    outcome = self._terminal or Outcome.end()
                elif outcome.is_value:
                    self._in_flight += 1
                else:
                    self._terminal = outcome
                deliver(outcome)
                self._flush_terminal_waiters()
                self._serve_waiters()

        self._source(False, on_delivery)

    # -- credit management ----------------------------------------------------

    def release(self, token: Any = None) -> None:
        """Return one credit (a previously delivered value completed)."""
        with self._lock:
            if self._in_flight <= 0:
                raise AssertionError("release with no value in flight")
            self._in_flight -= 1
            self._serve_waiters()

    def set_capacity(self, new_capacity: int) -> None:
        """Retune the bound; raising serves parked requests immediately."""
        if new_capacity < 1:
            raise ValueError("capacity must be >= 1")
        with self._lock:
            self._capacity = new_capacity
            self._serve_waiters()

    def _serve_waiters(self) -> None:
        if (
            self._waiters
            and self._terminal is None
            and not self._upstream_pending
            and self._in_flight < self._capacity
        ):
            self._forward(self._waiters.popleft())

    def _flush_terminal_waiters(self) -> None:
        if self._terminal is not None and self._waiters:
            waiters, self._waiters = list(self._waiters), deque()
            for w in waiters:
                w(self._terminal)

    # -- introspection -----------------------------------------------------------

    @property
    def capacity(self) -> int:
        return self._capacity

    @property
    def in_flight(self) -> int:
        return self._in_flight
