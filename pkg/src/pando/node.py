"""A complete node: tree membership wired to the lending data plane.

Every node — the root and each volunteer — runs the same machinery:

* an input source of jobs (the root reads the caller's stream; a volunteer
  receives values pushed down its parent data channel);
* a :class:`~pando.lend.LendLedger` over that source, so whatever a dead
  child leaves unsettled is re-lent and results come out exactly once, in
  input order;
* one credit-gated pump per connected child, sending values down and
  settling the results that come back;
* a local worker pump, active only while the node has no children (a
  coordinator stops processing values; it resumes if all children leave —
  and the root degenerates to purely local processing the same way).

Results move up the tree level by level: each coordinator reorders its own
window and forwards ``(parent seq, ok, payload)`` triples upstream, so the
root emits the global stream in exact input order.

Job errors (a result with ``ok: false``) are relayed up to the root, which
retries the input elsewhere up to ``failure_budget`` attempts and then fails
the whole stream — a poisoned input is a caller bug, not a worker fault.
Transport failures never reach the root: the parent of the dead connection
re-lends locally.
"""

from __future__ import annotations

import logging
from collections import deque
from typing import Any, Callable, Optional

from . import wire
from .lend import LendLedger, Ticket
from .lend_stream import SubStream
from .limit import LimitGate
from .overlay import OverlayConfig, TreeNode
from .runtime import Runtime
from .streams import DemandSource, Outcome, StreamError, drain
from .worker import (
    FunctionSpec,
    JobFunction,
    ProcessorLoop,
    format_function_spec,
    make_function,
    parse_function_spec,
)

log = logging.getLogger(__name__)

__all__ = ["PandoNode"]

DEFAULT_FAILURE_BUDGET = 5


class _InboundSource:
    """Demand source fed by pushes from the parent connection.

    The parent's credit gate bounds how much can ever sit in the queue, so
    no additional flow control is needed here.
    """

    def __init__(self):
        self._queue: deque = deque()
        self._deliver: Optional[Callable[[Outcome], None]] = None
        self._ended = False

    def push(self, item) -> None:
        if self._ended:
            return
        if self._deliver is not None:
            deliver, self._deliver = self._deliver, None
            deliver(Outcome.ok(item))
        else:
            self._queue.append(item)

    def __call__(self, abort: bool, deliver: Callable[[Outcome], None]) -> None:
        if abort or self._ended:
            self._ended = True
            self._queue.clear()
            deliver(Outcome.end())
            return
        if self._queue:
            deliver(Outcome.ok(self._queue.popleft()))
            return
        self._deliver = deliver


class _Pump:
    """Drives one borrower: a connected child or the local worker.

    Keeps exactly one request outstanding against a credit-gated substream;
    each borrowed ticket is handed to ``deliver`` (send down the wire, or
    feed the worker) and the credit is returned when the result settles.
    """

    def __init__(
        self,
        node: "PandoNode",
        sub_id,
        capacity: int,
        deliver: Callable[[Ticket], None],
        on_closed: Optional[Callable[[], None]] = None,
    ):
        self._node = node
        self._runtime = node.runtime
        self.sub = SubStream(node.ledger, sub_id)
        self.gate = LimitGate(self.sub.outgoing, capacity)
        self._deliver = deliver
        self._on_closed = on_closed
        self._tickets: dict[int, Ticket] = {}
        self._stopped = False
        self._closing = False
        self._ended = False

    @property
    def capacity(self) -> int:
        return self.gate.capacity

    @property
    def outstanding(self) -> int:
        return len(self._tickets)

    def start(self) -> None:
        self._request()

    def _request(self) -> None:
        if self._stopped or self._ended:
            return
        self.gate(False, self._on_outcome)

    def _on_outcome(self, outcome: Outcome) -> None:
        if outcome.is_value:
            ticket = outcome.value
            if self._stopped:
                return  # the substream's fail() already re-lent it
            self._tickets[ticket.seq] = ticket
            self._deliver(ticket)
            # Next request via the dispatcher: no recursion on synchronous
            # sources, and concurrent pumps interleave fairly.
            self._runtime.post(self._request)
        else:
            # End: nothing will ever be borrowable again.  Failure: the
            # main stream is failing; results no longer matter.
            self._ended = True
            self._maybe_confirm_closed()

    def handle_result(self, seq: int, ok: bool, payload: str) -> None:
        """A result came back for a ticket this pump delivered."""
        if self._stopped:
            return
        ticket = self._tickets.pop(seq, None)
        if ticket is None:
            log.warning("result for unknown seq %s on %s; dropped", seq, self.sub.id)
            return
        self._node._settle(self.sub, ticket, ok, payload)
        self.gate.release()
        self._maybe_confirm_closed()

    def set_capacity(self, capacity: int) -> None:
        self.gate.set_capacity(capacity)

    def fail(self) -> None:
        """The borrower is gone: re-lend everything it held."""
        if self._stopped:
            return
        self._stopped = True
        self._tickets.clear()
        self.sub.fail()

    def close_graceful(self) -> None:
        """Stop borrowing; let in-flight work settle, then confirm."""
        if self._stopped or self._closing:
            return
        self._closing = True
        self.sub.close()
        self._maybe_confirm_closed()

    def _maybe_confirm_closed(self) -> None:
        if self._closing and not self._stopped and not self._tickets:
            self._stopped = True
            self.sub.confirm_closed()
            if self._on_closed is not None:
                self._on_closed()


class PandoNode:
    """One complete node (root or volunteer) on a runtime and a fabric.

    Root usage::

        node = PandoNode(rt, fabric, cfg, is_root=True, relay_addr=addr,
                         source=stdin_source, fn_spec=spec)
        node.start()
        drain(node.results, on_each=print, on_done=finish)

    Volunteers need no source and may omit ``fn_spec``: they learn the
    function from the join answer and relay it onward to their own children.
    """

    def __init__(
        self,
        runtime: Runtime,
        fabric,
        config: OverlayConfig,
        *,
        is_root: bool = False,
        relay_addr: Optional[str] = None,
        source: Optional[DemandSource] = None,
        fn_spec: Optional[FunctionSpec] = None,
        fn: Optional[JobFunction] = None,
        limit_override: Optional[int] = None,
        failure_budget: int = DEFAULT_FAILURE_BUDGET,
        name: Optional[str] = None,
    ):
        if is_root and source is None:
            raise ValueError("the root needs an input source")
        if is_root and fn_spec is None:
            raise ValueError("the root needs a function spec to advertise")
        if failure_budget < 1:
            raise ValueError("failure_budget must be >= 1")
        self.runtime = runtime
        self.is_root = is_root
        self.config = config
        self._limit_override = limit_override
        self._failure_budget = failure_budget
        self._fn_spec = fn_spec
        self._fn: Optional[JobFunction] = None

        self.tree = TreeNode(
            runtime, fabric, config,
            is_root=is_root, relay_addr=relay_addr, name=name,
        )
        self.tree.on_child_connected = self._child_connected
        self.tree.on_child_lost = self._child_lost
        self.tree.on_child_status = self._child_status
        self.tree.on_parent_connected = self._parent_connected
        self.tree.on_parent_lost = self._parent_lost

        self._child_pumps: dict[int, _Pump] = {}
        self._local: Optional[_Pump] = None
        self._failures: dict[int, int] = {}  # root only: per-seq error counts
        self._session = 0  # bumps per parent connection (volunteers)
        self._stopped = False

        if is_root:
            self.ledger: Optional[LendLedger] = LendLedger(source)
            self.results: DemandSource = self.ledger.result_source()
            self.tree.signal_extra["fn"] = format_function_spec(fn_spec)
            self._fn = fn if fn is not None else make_function(runtime, fn_spec)
        else:
            self.ledger = None
            self._inbound: Optional[_InboundSource] = None
            self._parent_data = None
            if fn is not None:
                self._fn = fn
            elif fn_spec is not None:
                self._fn = make_function(runtime, fn_spec)

    # -- lifecycle ---------------------------------------------------------

    @property
    def name(self) -> str:
        return self.tree.name

    def start(self) -> None:
        self.tree.start()
        if self.is_root:
            self._ensure_local_pump()

    def stop(self) -> None:
        """Tear the node down: leave the tree and release the worker."""
        self._teardown(silent=False)

    def vanish(self) -> None:
        """Crash without a goodbye: channels go mute instead of closing,
        so peers only notice through their own liveness timeouts."""
        self._teardown(silent=True)

    def _teardown(self, silent: bool) -> None:
        if self._stopped:
            return
        self._stopped = True
        if silent:
            self.tree.vanish()
        else:
            self.tree.kill()
        for pump in list(self._child_pumps.values()):
            pump.fail()
        self._child_pumps.clear()
        if self._local is not None:
            self._local.fail()
            self._local = None
        if self._fn is not None:
            self._fn.close()

    def describe(self) -> str:
        """One diagnostic line: role, children, window and ledger state."""
        tree = self.tree
        bits = [
            f"{self.name}: role={tree.role} children={tree.connected_children}"
            f" leaves={tree.subtree_leaves}"
        ]
        if self.ledger is not None:
            bits.append(f"ledger={self.ledger.stats}")
        pumps = [
            f"slot{idx}(cap={p.capacity} out={p.outstanding})"
            for idx, p in sorted(self._child_pumps.items())
        ]
        if self._local is not None and not self._local._stopped:
            pumps.append(f"local(out={self._local.outstanding})")
        if pumps:
            bits.append("pumps=" + " ".join(pumps))
        return " ".join(bits)

    # -- capacity policy ------------------------------------------------------

    def _capacity_for(self, slot) -> int:
        if self._limit_override is not None:
            return self._limit_override
        return self.config.max_degree * max(1, slot.leaves)

    # -- settlement policy -----------------------------------------------------

    def _payload_of(self, ticket: Ticket) -> str:
        return ticket.value if self.is_root else ticket.value[1]

    def _settle(self, sub: SubStream, ticket: Ticket, ok: bool, payload: str) -> None:
        if self.is_root:
            if ok:
                self._failures.pop(ticket.seq, None)
                sub.settle(ticket, payload)
                return
            count = self._failures.get(ticket.seq, 0) + 1
            self._failures[ticket.seq] = count
            if count >= self._failure_budget:
                self._failures.pop(ticket.seq, None)
                sub.settle_error(
                    ticket,
                    StreamError(
                        payload or "EJOB",
                        f"input #{ticket.seq} failed {count} times; giving up",
                    ),
                )
            else:
                sub.fail_ticket(ticket)  # retry elsewhere; same seq
            return
        # Volunteers relay both outcomes upward, keyed by the parent's seq;
        # only the root judges errors.
        parent_seq = ticket.value[0]
        sub.settle(ticket, (parent_seq, ok, payload))

    # -- local processing ----------------------------------------------------

    def _ensure_local_pump(self) -> None:
        if self._stopped or self.ledger is None or self._fn is None:
            return
        if not self.tree.processes_locally:
            return
        if self._local is not None and not self._local._stopped and not self._local._closing:
            return
        loop_box: dict = {}
        pump = _Pump(
            self,
            sub_id=f"{self.name}-local",
            capacity=1,
            deliver=lambda t: loop_box["loop"].handle_value(t.seq, self._payload_of(t)),
            on_closed=lambda: loop_box["loop"].stop(),
        )
        loop_box["loop"] = ProcessorLoop(self.runtime, self._fn, pump.handle_result)
        self._local = pump
        pump.start()

    def _retire_local_pump(self) -> None:
        if self._local is not None:
            self._local.close_graceful()

    # -- overlay hooks: children ------------------------------------------------

    def _child_connected(self, slot) -> None:
        if self.ledger is None:
            # Parent session vanished while this handshake completed; the
            # overlay will tear the slot down with everything else.
            log.warning("%s: child connected with no active session", self.name)
            return
        data = slot.data
        pump = _Pump(
            self,
            sub_id=slot.child_id,
            capacity=self._capacity_for(slot),
            deliver=lambda t: data.send(wire.value(t.seq, self._payload_of(t))),
        )
        self._child_pumps[slot.index] = pump
        data.on_record = lambda rec, p=pump: self._on_child_data(p, rec)
        self._retire_local_pump()
        pump.start()

    def _on_child_data(self, pump: _Pump, rec: dict) -> None:
        if rec.get("type") == "RESULT":
            pump.handle_result(rec.get("seq"), bool(rec.get("ok")), rec.get("payload"))

    def _child_lost(self, slot, was_connected: bool) -> None:
        pump = self._child_pumps.pop(slot.index, None)
        if pump is not None:
            pump.fail()
        if self.tree.connected_children == 0:
            self._ensure_local_pump()

    def _child_status(self, slot) -> None:
        pump = self._child_pumps.get(slot.index)
        if pump is not None:
            pump.set_capacity(self._capacity_for(slot))

    # -- overlay hooks: parent (volunteers only) ----------------------------------

    def _parent_connected(self, ctrl, data, signal: dict) -> None:
        self._session += 1
        session = self._session
        if self._fn is None:
            spec_text = signal.get("fn")
            if isinstance(spec_text, str):
                try:
                    self._fn = make_function(self.runtime, parse_function_spec(spec_text))
                except (ValueError, TypeError, OSError) as exc:
                    log.error("%s: cannot build function %r: %s", self.name, spec_text, exc)
        if isinstance(signal.get("fn"), str):
            # Relay the function onward to children we accept.
            self.tree.signal_extra["fn"] = signal["fn"]
        self._inbound = _InboundSource()
        self.ledger = LendLedger(self._inbound)
        self._parent_data = data
        data.on_record = self._on_parent_data
        drain(
            self.ledger.result_source(),
            on_each=lambda triple: self._send_up(session, triple),
            on_done=lambda outcome: None,  # only on teardown; nothing to do
        )
        self._ensure_local_pump()

    def _on_parent_data(self, rec: dict) -> None:
        if rec.get("type") == "VALUE" and self._inbound is not None:
            self._inbound.push((rec.get("seq"), rec.get("payload")))

    def _send_up(self, session: int, triple) -> None:
        if session != self._session or self._parent_data is None:
            return
        parent_seq, ok, payload = triple
        self._parent_data.send(wire.result(parent_seq, ok, payload))

    def _parent_lost(self) -> None:
        # Child pumps were already failed one by one as the overlay dropped
        # the slots; discard the whole session.
        self._session += 1
        for pump in list(self._child_pumps.values()):
            pump.fail()
        self._child_pumps.clear()
        if self._local is not None:
            self._local.fail()
            self._local = None
        self.ledger = None
        self._inbound = None
        self._parent_data = None
