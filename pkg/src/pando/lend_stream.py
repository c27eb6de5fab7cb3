"""Per-borrower sub-streams multiplexing one lending ledger.

Each connected child (or the local worker) gets a :class:`SubStream`: a
bi-directional pipe whose outgoing side borrows tickets from the shared
:class:`~pando.lend.LendLedger` on demand, and whose incoming side settles
results back.  Sub-streams come and go as volunteers join and leave; the
ledger guarantees that whatever a dead sub-stream left unsettled is re-lent
to the survivors and that results still come out exactly once, in order.

Lifecycle:

* ``fail()`` — the borrower is gone (connection lost, heartbeat expired):
  every unsettled ticket it held is immediately re-lent.
* ``close()`` — graceful leave: stop borrowing (the outgoing side delivers
  end on its next request), but in-flight tickets may still settle; when the
  owner confirms shutdown (``confirm_closed()``), whatever is still
  unsettled is re-lent.

Late results from a presumed-dead borrower are forwarded to the ledger,
where first-settlement-wins drops duplicates and accepts still-useful ones.
"""

from __future__ import annotations

import itertools
import logging
import threading
from typing import Any, Callable, Optional

from .lend import DEFERRED, EXHAUSTED, LendLedger, Ticket
from .streams import DemandSource, Outcome, StreamError

log = logging.getLogger(__name__)

__all__ = ["SubStream", "open_substream", "fail_substream", "close_substream"]

_anon_ids = itertools.count()

OPEN = "open"
CLOSING = "closing"
CLOSED = "closed"
FAILED = "failed"


class SubStream:
    """One borrower's window onto the shared ledger."""

    def __init__(self, ledger: LendLedger, sub_id: Any = None):
        self.id = sub_id if sub_id is not None else f"sub-{next(_anon_ids)}"
        self._ledger = ledger
        self._lock = threading.RLock()
        self._state = OPEN
        self._outstanding: dict[int, Ticket] = {}
        self._pending_deliver: Optional[Callable[[Outcome], None]] = None
        self._request_active = False

    # -- outgoing: a demand source of tickets ------------------------------

    @property
    def outgoing(self) -> DemandSource:
        return self._outgoing

    def _outgoing(self, abort: bool, deliver: Callable[[Outcome], None]) -> None:
        with self._lock:
            if abort:
                self.close()
                deliver(Outcome.end())
                return
            if self._state != OPEN:
                deliver(Outcome.end())
                return
            if self._request_active:
                raise AssertionError("substream outgoing: overlapping requests")
            self._request_active = True
            self._pending_deliver = deliver
            result = self._ledger.borrow(self.id, self._on_borrow_ready)
            if result is DEFERRED:
                return
            self._pending_deliver = None
            self._request_active = False
            if result is EXHAUSTED:
                deliver(Outcome.end())
            else:
                self._outstanding[result.seq] = result
                deliver(Outcome.ok(result))

    def _on_borrow_ready(self, result: Any) -> None:
        with self._lock:
            deliver = self._pending_deliver
            self._pending_deliver = None
            self._request_active = False
            if self._state != OPEN:
                # Resolved after close/fail: hand any ticket straight back.
                if isinstance(result, Ticket):
                    self._ledger.fail_borrow(result, self.id)
                if deliver is not None:
                    deliver(Outcome.end())
                return
            if result is EXHAUSTED:
                deliver(Outcome.end())
            else:
                self._outstanding[result.seq] = result
                deliver(Outcome.ok(result))

    # -- incoming: settlements from the borrower ------------------------------

    def settle(self, ticket: Ticket, result: Any) -> None:
        """Record a result; duplicates resolve by first-settlement-wins."""
        with self._lock:
            self._outstanding.pop(ticket.seq, None)
        self._ledger.settle(ticket, result)

    def settle_error(self, ticket: Ticket, error: StreamError) -> None:
        """Give up on this input for good (emitted in order as a failure)."""
        with self._lock:
            self._outstanding.pop(ticket.seq, None)
        self._ledger.settle_error(ticket, error)

    def fail_ticket(self, ticket: Ticket) -> None:
        """Re-lend a single ticket (e.g. the borrower reported a job error)."""
        with self._lock:
            self._outstanding.pop(ticket.seq, None)
        self._ledger.fail_borrow(ticket, self.id)

    # -- lifecycle ------------------------------------------------------------

    def fail(self) -> None:
        """Borrower is gone: re-lend everything it still held. Idempotent."""
        with self._lock:
            if self._state == FAILED:
                return
            self._state = FAILED
            deliver = self._pending_deliver
            self._pending_deliver = None
            tickets = list(self._outstanding.values())
            self._outstanding.clear()
            for ticket in tickets:
                self._ledger.fail_borrow(ticket, self.id)
            if deliver is not None:
                deliver(Outcome.end())

    def close(self) -> None:
        """Stop borrowing; in-flight tickets may still settle. Idempotent."""
        with self._lock:
            if self._state != OPEN:
                return
            self._state = CLOSING
            deliver = self._pending_deliver
            self._pending_deliver = None
            if deliver is not None:
                deliver(Outcome.end())

    def confirm_closed(self) -> None:
        """Owner finished shutting down: re-lend whatever never settled."""
        with self._lock:
            if self._state != CLOSING:
                return
            self._state = CLOSED
            tickets = list(self._outstanding.values())
            self._outstanding.clear()
            for ticket in tickets:
                self._ledger.fail_borrow(ticket, self.id)

    # -- introspection -----------------------------------------------------------

    @property
    def state(self) -> str:
        return self._state

    @property
    def outstanding_count(self) -> int:
        return len(self._outstanding)

    def outstanding_seqs(self) -> set[int]:
        with self._lock:
            return set(self._outstanding)


def open_substream(ledger: LendLedger, sub_id: Any = None) -> SubStream:
    return SubStream(ledger, sub_id)


def fail_substream(sub: SubStream) -> None:
    sub.fail()


def close_substream(sub: SubStream) -> None:
    sub.close()
