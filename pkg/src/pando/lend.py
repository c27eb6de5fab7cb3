"""Lending ledger: exactly-once, in-order results over unreliable borrowers.

The ledger reads values from a demand source one at a time and *lends* each
value to a borrower (a volunteer's sub-stream, or the local worker).  A
borrower either settles its ticket with a result or fails it; failed tickets
are re-lent, oldest first, to whoever asks next.  Results are re-ordered and
emitted strictly in input order, each input exactly once, no matter how
borrowing, failing and settling interleave.

State per in-flight input is one ledger entry, so memory stays proportional
to the number of concurrently borrowed values plus the re-order backlog.

``borrow`` is synchronous when it can be (re-lendable entry available, or
the source delivers inline) and otherwise parks the request:

* returns a :class:`Ticket` — value lent, caller owns it;
* returns :data:`EXHAUSTED` — no value will ever be available again;
* returns :data:`DEFERRED` — the answer will arrive via the ``on_ready``
  callback, exactly once, as a Ticket or EXHAUSTED.  Deferral happens when
  the source delivers asynchronously, or when the source has ended but
  borrowed values could still fail and become re-lendable.
"""

from __future__ import annotations

import heapq
import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable, Optional

from .streams import DemandSource, Outcome, StreamError

log = logging.getLogger(__name__)

__all__ = ["Ticket", "LendLedger", "DEFERRED", "EXHAUSTED"]


@dataclass(frozen=True)
class Ticket:
    """One lent input: its 0-based sequence number and the value itself."""

    seq: int
    value: Any


class _Sentinel:
    __slots__ = ("_name",)

    def __init__(self, name: str):
        self._name = name

    def __repr__(self) -> str:
        return self._name


DEFERRED = _Sentinel("DEFERRED")
EXHAUSTED = _Sentinel("EXHAUSTED")

# Marker wrapper for a settled entry that must terminate the stream when its
# turn comes (e.g. an input whose retry budget ran out).
class _ErrorEntry:
    __slots__ = ("error",)

    def __init__(self, error: StreamError):
        self.error = error


class _Parked:
    """A borrow waiting for a value: resolved exactly once."""

    __slots__ = ("borrower", "on_ready", "sync_result", "in_call")

    def __init__(self, borrower: Any, on_ready: Optional[Callable]):
        self.borrower = borrower
        self.on_ready = on_ready
        self.sync_result: Any = None
        self.in_call = True  # still inside the borrow() that parked it


class LendLedger:
    """See module docstring."""

    def __init__(self, source: DemandSource):
        self._source = source
        self._lock = threading.RLock()
        self._next_seq = 0
        self._emit_cursor = 0
        self._borrowed: dict[int, tuple[Any, Any]] = {}  # seq -> (value, borrower)
        self._relend_heap: list[int] = []
        self._relend_values: dict[int, Any] = {}
        self._settled: dict[int, Any] = {}
        self._parked: list[_Parked] = []
        self._pull_pending = False
        self._abort_wanted = False
        self._source_ended = False
        self._failure: Optional[StreamError] = None
        self._out_deliver: Optional[Callable[[Outcome], None]] = None
        self._out_terminal: Optional[Outcome] = None
        self.stats = {
            "read": 0,
            "emitted": 0,
            "relends": 0,
            "settles": 0,
            "duplicates_dropped": 0,
        }

    # -- borrowing ---------------------------------------------------------

    def borrow(self, borrower: Any, on_ready: Optional[Callable] = None):
        """Lend the oldest available input to `borrower`.

        Returns a Ticket, EXHAUSTED, or DEFERRED (answer via on_ready).
        """
        with self._lock:
            if self._failure is not None:
                return EXHAUSTED
            ticket = self._take_relendable(borrower)
            if ticket is not None:
                return ticket
            if self._source_ended:
                if not self._borrowed:
                    return EXHAUSTED
                # Borrowed values may still fail and become re-lendable.
                entry = _Parked(borrower, on_ready)
                self._parked.append(entry)
                entry.in_call = False
                return DEFERRED
            entry = _Parked(borrower, on_ready)
            self._parked.append(entry)
            self._maybe_pull()
            entry.in_call = False
            if entry.sync_result is not None:
                return entry.sync_result
            return DEFERRED

    def _take_relendable(self, borrower: Any) -> Optional[Ticket]:
        heap = self._relend_heap
        while heap:
            seq = heapq.heappop(heap)
            value = self._relend_values.pop(seq, _MISSING)
            if value is _MISSING:
                continue  # lazily deleted (settled while re-lendable)
            self._borrowed[seq] = (value, borrower)
            return Ticket(seq, value)
        return None

    def _maybe_pull(self) -> None:
        if self._pull_pending or self._source_ended or self._failure is not None:
            return
        if not self._parked:
            return
        self._pull_pending = True
        self._source(False, self._on_source_outcome)

    def _on_source_outcome(self, outcome: Outcome) -> None:
        with self._lock:
            self._pull_pending = False
            if self._abort_wanted:
                self._abort_wanted = False
                if not outcome.is_terminal:
                    self._source(True, lambda _o: None)
                return
            if outcome.is_value:
                seq = self._next_seq
                self._next_seq += 1
                self.stats["read"] += 1
                if self._parked:
                    entry = self._parked.pop(0)
                    self._borrowed[seq] = (outcome.value, entry.borrower)
                    self._resolve(entry, Ticket(seq, outcome.value))
                else:
                    # The waiter was served by a re-lend in the meantime;
                    # keep the fresh value for the next borrower.
                    heapq.heappush(self._relend_heap, seq)
                    self._relend_values[seq] = outcome.value
                self._maybe_pull()
            elif outcome.is_end:
                self._source_ended = True
                self._service_parked()
                self._pump_output()
            else:
                self._failure = outcome.error or StreamError("ESOURCE", "input failed")
                self._source_ended = True
                for entry in self._parked:
                    self._resolve(entry, EXHAUSTED)
                self._parked.clear()
                self._pump_output()

    def _resolve(self, entry: _Parked, result: Any) -> None:
        if entry.in_call:
            entry.sync_result = result
            return
        if entry.on_ready is None:
            raise AssertionError(
                "borrow resolved asynchronously but no on_ready was given"
            )
        entry.on_ready(result)

    def _service_parked(self) -> None:
        """Hand re-lendable entries (oldest first) to parked borrows."""
        while self._parked and self._relend_values:
            entry = self._parked.pop(0)
            ticket = self._take_relendable(entry.borrower)
            if ticket is None:
                self._parked.insert(0, entry)
                break
            self._resolve(entry, ticket)
        if self._parked and self._source_ended and not self._borrowed and not self._relend_values:
            for entry in self._parked:
                self._resolve(entry, EXHAUSTED)
            self._parked.clear()
        self._maybe_pull()

    # -- settling ------------------------------------------------------------

    def settle(self, ticket: Ticket, result: Any) -> None:
        """Record `result` for the ticket; first settlement wins."""
        self._settle_entry(ticket, result)

    def settle_error(self, ticket: Ticket, error: StreamError) -> None:
        """Record a terminal error for this input (e.g. retry budget spent).

        The entry is emitted at its ordered position as the stream's failure.
        """
        self._settle_entry(ticket, _ErrorEntry(error))

    def _settle_entry(self, ticket: Ticket, entry: Any) -> None:
        with self._lock:
            seq = ticket.seq
            if seq >= self._next_seq:
                raise AssertionError(f"settle of never-issued seq {seq}")
            if seq < self._emit_cursor or seq in self._settled:
                self.stats["duplicates_dropped"] += 1
                log.warning("duplicate settlement for seq %d dropped", seq)
                return
            if seq in self._borrowed:
                del self._borrowed[seq]
            elif seq in self._relend_values:
                # Failed borrower turned out alive: first settlement wins.
                del self._relend_values[seq]
            self._settled[seq] = entry
            self.stats["settles"] += 1
            self._service_parked()
            self._pump_output()

    def fail_borrow(self, ticket: Ticket, borrower: Any = None) -> None:
        """Return an unsettled ticket to the pool for re-lending.

        With `borrower` given, the failure is ignored unless that borrower
        still holds the seq (protects against stale failures after re-lend).
        """
        with self._lock:
            seq = ticket.seq
            if seq >= self._next_seq:
                raise AssertionError(f"fail_borrow of never-issued seq {seq}")
            held = self._borrowed.get(seq)
            if held is None:
                return  # already settled or already re-lendable
            if borrower is not None and held[1] != borrower:
                return  # re-lent to someone else since
            del self._borrowed[seq]
            heapq.heappush(self._relend_heap, seq)
            self._relend_values[seq] = held[0]
            self.stats["relends"] += 1
            self._service_parked()

    # -- ordered output -------------------------------------------------------

    def result_source(self) -> DemandSource:
        """Demand source of settled results in exact input order."""

        def source(abort: bool, deliver: Callable[[Outcome], None]) -> None:
            with self._lock:
                if self._out_terminal is not None:
                    deliver(self._out_terminal)
                    return
                if abort:
                    self._out_terminal = Outcome.end()
                    for entry in self._parked:
                        self._resolve(entry, EXHAUSTED)
                    self._parked.clear()
                    if not self._source_ended:
                        self._source_ended = True
                        if self._pull_pending:
                            # A pull is outstanding: queue the abort so the
                            # one-request-at-a-time discipline holds.
                            self._abort_wanted = True
                        else:
                            self._source(True, lambda _o: None)
                    deliver(self._out_terminal)
                    return
                if self._out_deliver is not None:
                    raise AssertionError("result_source: overlapping requests")
                self._out_deliver = deliver
                self._pump_output()

        return source

    def _pump_output(self) -> None:
        deliver = self._out_deliver
        if deliver is None:
            return
        cursor = self._emit_cursor
        entry = self._settled.get(cursor, _MISSING)
        if entry is not _MISSING:
            del self._settled[cursor]
            self._emit_cursor = cursor + 1
            self._out_deliver = None
            if isinstance(entry, _ErrorEntry):
                self._out_terminal = Outcome.failure(entry.error)
                deliver(self._out_terminal)
            else:
                self.stats["emitted"] += 1
                deliver(Outcome.ok(entry))
            return
        if self._failure is not None:
            self._out_deliver = None
            self._out_terminal = Outcome.failure(self._failure)
            deliver(self._out_terminal)
            return
        if (
            self._emit_cursor == self._next_seq
            and not self._borrowed
            and not self._relend_values
        ):
            if self._source_ended:
                self._out_deliver = None
                self._out_terminal = Outcome.end()
                deliver(self._out_terminal)
            elif not self._pull_pending:
                # Everything read so far is emitted and nothing is borrowed:
                # look one input ahead so end-of-input can surface without
                # waiting for another borrow.  A value delivered here is
                # stashed for the next borrower.
                self._pull_pending = True
                self._source(False, self._on_source_outcome)

    # -- introspection ---------------------------------------------------------

    @property
    def in_flight(self) -> int:
        return len(self._borrowed)

    @property
    def retained_entries(self) -> int:
        return len(self._borrowed) + len(self._relend_values) + len(self._settled)

    @property
    def terminally_failed(self) -> bool:
        return self._failure is not None


_MISSING = object()
