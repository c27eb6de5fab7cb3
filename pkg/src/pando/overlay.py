"""Tree membership: join routing, roles, heartbeats, and fault recovery.

Every volunteer process (and the root) runs one :class:`TreeNode`.  The node
keeps at most ``max_degree`` child slots, routes join requests
deterministically (accept into the lowest empty slot while below capacity,
otherwise delegate by hashing the pair of identities), exchanges heartbeats
on control channels, reports subtree size upward, and rebuilds after
failures: a lost child frees its slot, a lost parent makes the node drop its
own children and rejoin from scratch with a fresh identity.

The node owns the membership state machine and all control channels.  What
flows on data channels is someone else's business: pipeline wiring attaches
through the hook callbacks (``on_child_connected`` etc.) and receives the
raw data connections.

All callbacks run on the runtime dispatcher; nothing here blocks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from . import wire
from .runtime import Runtime
from .transport import dial_parent

log = logging.getLogger(__name__)

EMPTY = "empty"
PENDING = "pending"
CONNECTED = "connected"

ROLE_CANDIDATE = "candidate"
ROLE_PROCESSOR = "processor"
ROLE_COORDINATOR = "coordinator"


@dataclass
class OverlayConfig:
    max_degree: int = 10
    candidate_timeout: float = 60.0
    heartbeat_interval: float = 2.0
    heartbeat_timeout: float = 10.0
    status_interval: float = 1.0
    backoff_base: float = 1.0
    backoff_cap: float = 30.0
    max_leaves: Optional[int] = None  # root stops accepting when reached

    def __post_init__(self) -> None:
        if self.max_degree < 1:
            raise ValueError("max_degree must be positive")
        if self.heartbeat_timeout <= self.heartbeat_interval:
            raise ValueError("heartbeat_timeout must exceed heartbeat_interval")
        if self.candidate_timeout <= 0:
            raise ValueError("candidate_timeout must be positive")


def route_join(slot_states: list, node_id: int, origin_id: int, max_degree: int) -> tuple:
    """Pure routing decision: ("accept", slot_index) or ("delegate", slot_index).

    Accept into the lowest empty slot while any slot is unoccupied; once all
    slots are taken, delegate to the hash-chosen child.  Pure so it can be
    replayed and cross-checked in isolation.
    """
    occupied = sum(1 for s in slot_states if s != EMPTY)
    if occupied < max_degree:
        idx = next(i for i, s in enumerate(slot_states) if s == EMPTY)
        return ("accept", idx)
    h = wire.route_index(node_id, origin_id, max_degree)
    assert slot_states[h] != EMPTY, "delegation cannot target an empty slot on a full node"
    return ("delegate", h)


class ChildSlot:
    __slots__ = (
        "index",
        "state",
        "child_id",
        "token",
        "ctrl",
        "data",
        "first_request_time",
        "purge_timer",
        "queued",
        "leaves",
        "gen",
        "last_seen",
        "beat",
    )

    def __init__(self, index: int):
        self.index = index
        self.gen = 0
        self._reset()

    def _reset(self) -> None:
        self.state = EMPTY
        self.child_id: Optional[str] = None
        self.token: Optional[str] = None
        self.ctrl = None
        self.data = None
        self.first_request_time = 0.0
        self.purge_timer = None
        self.queued: list[dict] = []
        self.leaves = 1
        self.last_seen = 0.0
        self.beat = None


class TreeNode:
    """Membership state machine for one node (root or volunteer)."""

    def __init__(
        self,
        runtime: Runtime,
        fabric: Any,
        config: OverlayConfig,
        *,
        is_root: bool = False,
        relay_addr: Optional[str] = None,
        name: Optional[str] = None,
    ):
        self.runtime = runtime
        self.fabric = fabric
        self.config = config
        self.is_root = is_root
        self.relay_addr = relay_addr
        self.name = name or ("root" if is_root else "node")

        self.node_id: Optional[str] = None
        self.listen_addr: Optional[str] = None
        self.slots = [ChildSlot(i) for i in range(config.max_degree)]
        self.parent_ctrl = None
        self.parent_data = None
        self.parent_last_seen = 0.0
        self.subtree_leaves = 1
        self.signal_extra: dict = {}
        self.joins_seen = 0
        self.dead = False

        # Pipeline hooks; every one is optional.
        self.on_child_connected: Optional[Callable[[ChildSlot], None]] = None
        self.on_child_lost: Optional[Callable[[ChildSlot, bool], None]] = None
        self.on_child_status: Optional[Callable[[ChildSlot], None]] = None
        self.on_parent_connected: Optional[Callable[[Any, Any, dict], None]] = None
        self.on_parent_lost: Optional[Callable[[], None]] = None
        self.on_identity: Optional[Callable[[str], None]] = None

        self._relay_conn = None
        self._attempt_timer = None
        self._backoff = config.backoff_base
        self._retry_timer = None
        self._parent_beat = None
        self._status_beat = None
        self._dialing = False

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> None:
        self.listen_addr = self.fabric.listen(self._on_inbound_conn)
        if self.is_root:
            self.node_id = None
            self._connect_relay()
        else:
            self._begin_join_attempt()

    def kill(self) -> None:
        """Immediate death: close every channel, cancel every timer."""
        if self.dead:
            return
        self.dead = True
        self._log("die")
        self._cancel_candidate_state()
        if self._relay_conn is not None:  # the root's bootstrap channel
            self._relay_conn.close()
            self._relay_conn = None
        self._stop_parent_link(close=True)
        for slot in self.slots:
            self._clear_slot(slot, close=True)
        if self.listen_addr is not None:
            self.fabric.unlisten(self.listen_addr)

    def vanish(self) -> None:
        """Silent death (no close events): peers must detect it by silence."""
        if self.dead:
            return
        self.dead = True
        self._log("vanish")
        self._cancel_candidate_state()
        for conn in self._all_conns():
            if hasattr(conn, "vanish"):
                conn.vanish()
            else:
                conn.close()
        self._stop_parent_link(close=False)
        for slot in self.slots:
            self._clear_slot(slot, close=False)
        if self.listen_addr is not None:
            self.fabric.unlisten(self.listen_addr)

    def _all_conns(self) -> list:
        conns = []
        for c in (self._relay_conn, self.parent_ctrl, self.parent_data):
            if c is not None:
                conns.append(c)
        for slot in self.slots:
            for c in (slot.ctrl, slot.data):
                if c is not None:
                    conns.append(c)
        return conns

    # -- derived state ------------------------------------------------------------

    @property
    def connected_children(self) -> int:
        return sum(1 for s in self.slots if s.state == CONNECTED)

    @property
    def role(self) -> str:
        # The root keeps the coordinating role even while childless.
        if self.is_root or self.connected_children > 0:
            return ROLE_COORDINATOR
        if self.parent_ctrl is not None:
            return ROLE_PROCESSOR
        return ROLE_CANDIDATE

    @property
    def processes_locally(self) -> bool:
        """True when this node should run jobs itself."""
        if self.connected_children > 0:
            return False
        return self.is_root or self.parent_ctrl is not None

    def _recompute_leaves(self) -> None:
        connected = [s for s in self.slots if s.state == CONNECTED]
        self.subtree_leaves = sum(s.leaves for s in connected) if connected else 1

    def _log(self, event: str, **fields) -> None:
        parts = [f"{self.name} {event}"]
        for k, v in fields.items():
            parts.append(f"{k}={v}")
        self.runtime.log_event(" ".join(parts))

    # -- relay bootstrap (root keeps it; volunteers use it per join attempt) -------

    def _connect_relay(self) -> None:
        if self.dead:
            return
        self.fabric.connect(self.relay_addr, self._relay_ready)

    def _relay_ready(self, conn) -> None:
        if self.dead:
            if conn is not None:
                conn.close()
            return
        if conn is None:
            self._retry_later(self._connect_relay)
            return
        self._relay_conn = conn
        conn.on_record = self._on_relay_record
        conn.on_close = self._on_relay_close
        conn.send(wire.register(root=self.is_root))

    def _on_relay_close(self) -> None:
        if self.dead:
            return
        self._relay_conn = None
        if self.is_root:
            self._retry_later(self._connect_relay)
        else:
            # Mid-attempt loss of the bootstrap channel: start over.
            self._join_attempt_failed("relay connection lost")

    def _on_relay_record(self, rec: dict) -> None:
        if self.dead:
            return
        kind = rec.get("type")
        if kind == "ID":
            self.node_id = rec["id"]
            if self.on_identity is not None:
                self.on_identity(self.node_id)
            self._log("registered", id=self.node_id, root=self.is_root)
            if not self.is_root:
                self._send_join_request()
        elif kind == "REJECT":
            if self.is_root:
                self._retry_later(self._reregister)
            else:
                self._join_attempt_failed("registration rejected")
        elif kind == "JOIN":
            if self.is_root:
                self._route_request(rec)
            else:
                self._on_join_answer(rec)
        else:
            log.debug("%s: ignoring relay record %s", self.name, kind)

    def _reregister(self) -> None:
        if self._relay_conn is not None:
            self._relay_conn.send(wire.register(root=self.is_root))
        else:
            self._connect_relay()

    def _retry_later(self, fn: Callable[[], None]) -> None:
        if self._retry_timer is not None:
            self._retry_timer.cancel()
        delay = self._backoff
        self._backoff = min(self._backoff * 2, self.config.backoff_cap)
        self._retry_timer = self.runtime.call_later(delay, fn)

    # -- candidate side -----------------------------------------------------------

    def _begin_join_attempt(self) -> None:
        if self.dead:
            return
        self.node_id = None
        self._connect_relay()

    def _send_join_request(self) -> None:
        if self._relay_conn is None:
            return
        self._relay_conn.send(wire.join(self.node_id, {}))
        self._log("join_request")
        self._attempt_timer = self.runtime.call_later(
            self.config.candidate_timeout, self._join_attempt_failed, "no answer"
        )

    def _on_join_answer(self, rec: dict) -> None:
        if rec.get("origin") != self.node_id or self._dialing:
            return
        signal = rec.get("signal")
        if not isinstance(signal, dict) or "addr" not in signal or "token" not in signal:
            log.warning("%s: malformed join answer ignored", self.name)
            return
        if self._attempt_timer is not None:  # the dial carries its own timeout
            self._attempt_timer.cancel()
            self._attempt_timer = None
        self._dialing = True
        self._log("answer", parent=rec.get("destination"))

        def done(ctrl, data) -> None:
            self._dialing = False
            if self.dead:
                ctrl.close()
                data.close()
                return
            self._cancel_candidate_state()  # bootstrap channel closes here
            self._became_child(ctrl, data, signal)

        def fail() -> None:
            self._dialing = False
            self._join_attempt_failed("handshake failed")

        dial_parent(
            self.runtime,
            self.fabric,
            str(signal["addr"]),
            str(signal["token"]),
            self.node_id,
            done,
            fail,
            timeout=self.config.candidate_timeout,
        )

    def _join_attempt_failed(self, why: str) -> None:
        if self.dead or self.parent_ctrl is not None or self._dialing:
            return
        self._log("join_failed", why=why)
        self._cancel_candidate_state()
        self._retry_later(self._begin_join_attempt)

    def _cancel_candidate_state(self) -> None:
        if self._attempt_timer is not None:
            self._attempt_timer.cancel()
            self._attempt_timer = None
        if self._retry_timer is not None:
            self._retry_timer.cancel()
            self._retry_timer = None
        if self._relay_conn is not None and not self.is_root:
            conn = self._relay_conn
            self._relay_conn = None
            conn.on_close = None
            conn.close()

    def _became_child(self, ctrl, data, signal: dict) -> None:
        self.parent_ctrl = ctrl
        self.parent_data = data
        self.parent_last_seen = self.runtime.now()
        self._backoff = self.config.backoff_base
        ctrl.on_record = self._on_parent_ctrl
        ctrl.on_close = lambda: self._parent_gone("control channel closed")
        data.on_close = lambda: self._parent_gone("data channel closed")
        self._parent_beat = self.runtime.call_every(
            self.config.heartbeat_interval, self._parent_heartbeat_tick
        )
        self._status_beat = self.runtime.call_every(
            self.config.status_interval, self._send_status
        )
        self._log("joined")
        if self.on_parent_connected is not None:
            self.on_parent_connected(ctrl, data, signal)

    def _parent_heartbeat_tick(self) -> None:
        if self.parent_ctrl is None:
            return
        self.parent_ctrl.send(wire.heartbeat(int(self.runtime.now() * 1000)))
        if self.runtime.now() - self.parent_last_seen > self.config.heartbeat_timeout:
            self._parent_gone("heartbeat timeout")

    def _send_status(self) -> None:
        if self.parent_ctrl is not None:
            self.parent_ctrl.send(wire.status(self.subtree_leaves))

    def _on_parent_ctrl(self, rec: dict) -> None:
        if self.dead:
            return
        self.parent_last_seen = self.runtime.now()
        kind = rec.get("type")
        if kind == "JOIN":
            self._route_request(rec)
        elif kind == "HEARTBEAT":
            pass
        else:
            log.debug("%s: ignoring parent ctrl %s", self.name, kind)

    def _parent_gone(self, why: str) -> None:
        """Lost the parent: drop the whole subtree and rejoin fresh."""
        if self.dead or self.parent_ctrl is None:
            return
        self._log("parent_lost", why=why)
        self._stop_parent_link(close=True)
        for slot in self.slots:
            if slot.state != EMPTY:
                self._clear_slot(slot, close=True)
        self._recompute_leaves()
        if self.on_parent_lost is not None:
            self.on_parent_lost()
        self._begin_join_attempt()

    def _stop_parent_link(self, close: bool) -> None:
        for beat in (self._parent_beat, self._status_beat):
            if beat is not None:
                beat.cancel()
        self._parent_beat = self._status_beat = None
        for conn in (self.parent_ctrl, self.parent_data):
            if conn is not None:
                conn.on_record = None
                conn.on_close = None
                if close:
                    conn.close()
        self.parent_ctrl = self.parent_data = None

    # -- join routing (root and coordinators) ----------------------------------------

    def _route_request(self, rec: dict) -> None:
        origin_hex = rec.get("origin")
        if not wire.is_hex16(origin_hex):
            log.warning("%s: join with bad origin dropped", self.name)
            return
        destination = rec.get("destination")
        if destination is not None and destination != self.node_id:
            # A re-routed signal pinned to someone else landed here (topology
            # changed under it); there is no way to honor it.
            log.warning("%s: join pinned to %s dropped", self.name, destination)
            return
        self.joins_seen += 1
        if (
            self.is_root
            and self.config.max_leaves is not None
            and self.subtree_leaves >= self.config.max_leaves
        ):
            self._log("join_dropped_at_cap", origin=origin_hex)
            return
        decision, idx = route_join(
            [s.state for s in self.slots],
            wire.hex_to_id(self.node_id),
            wire.hex_to_id(origin_hex),
            self.config.max_degree,
        )
        slot = self.slots[idx]
        if decision == "accept":
            self._accept_candidate(slot, origin_hex)
        elif slot.state == PENDING:
            slot.queued.append(rec)
            self._log("join_queued", origin=origin_hex, slot=idx)
        else:
            slot.ctrl.send(rec)
            self._log("join_delegated", origin=origin_hex, slot=idx)

    def _accept_candidate(self, slot: ChildSlot, origin_hex: str) -> None:
        token = wire.id_to_hex(wire.new_node_id(self.runtime.rng))
        slot.state = PENDING
        slot.child_id = origin_hex
        slot.token = token
        slot.first_request_time = self.runtime.now()
        gen = slot.gen
        slot.purge_timer = self.runtime.call_later(
            self.config.candidate_timeout, self._purge_pending, slot, gen
        )
        answer = wire.join(
            origin_hex,
            {"addr": self.listen_addr, "token": token, **self.signal_extra},
            destination_hex=self.node_id,
        )
        self._send_answer(answer)
        self._log("join_accepted", origin=origin_hex, slot=slot.index)

    def _send_answer(self, answer: dict) -> None:
        """Answers exit the tree at the root, then the relay routes by origin."""
        if self.is_root:
            if self._relay_conn is not None:
                self._relay_conn.send(answer)
            else:
                log.warning("%s: no relay connection; answer dropped", self.name)
        elif self.parent_ctrl is not None:
            self.parent_ctrl.send(answer)
        else:
            log.warning("%s: orphaned; answer dropped", self.name)

    def _purge_pending(self, slot: ChildSlot, gen: int) -> None:
        if self.dead or slot.gen != gen or slot.state != PENDING:
            return
        self._log("purge", slot=slot.index, origin=slot.child_id)
        queued = slot.queued
        self._clear_slot(slot, close=True)
        if self.on_child_lost is not None:
            self.on_child_lost(slot, False)
        for rec in queued:
            self._route_request(rec)

    # -- accepting inbound channels ---------------------------------------------------

    def _on_inbound_conn(self, conn) -> None:
        if self.dead:
            conn.close()
            return
        conn.on_record = lambda rec: self._inbound_first_line(conn, rec)

    def _inbound_first_line(self, conn, rec: dict) -> None:
        if self.dead:
            conn.close()
            return
        kind = rec.get("type")
        if kind == "JOIN":
            token = rec.get("signal", {}).get("token") if isinstance(rec.get("signal"), dict) else None
            slot = self._pending_slot(token)
            if slot is None or slot.ctrl is not None:
                conn.close()
                return
            slot.ctrl = conn
            gen = slot.gen
            conn.on_record = lambda r: self._on_child_ctrl(slot, gen, r)
            conn.on_close = lambda: self._child_gone(slot, gen, "control channel closed")
            conn.send(wire.open_data(slot.token))
        elif kind == "OPEN_DATA":
            slot = self._pending_slot(rec.get("token"))
            if slot is None or slot.ctrl is None or slot.data is not None:
                conn.close()
                return
            slot.data = conn
            gen = slot.gen
            conn.on_close = lambda: self._child_gone(slot, gen, "data channel closed")
            self._child_connected(slot)
        else:
            conn.close()

    def _pending_slot(self, token) -> Optional[ChildSlot]:
        if not isinstance(token, str):
            return None
        for slot in self.slots:
            if slot.state == PENDING and slot.token == token:
                return slot
        return None

    def _child_connected(self, slot: ChildSlot) -> None:
        slot.state = CONNECTED
        slot.leaves = 1
        slot.last_seen = self.runtime.now()
        if slot.purge_timer is not None:
            slot.purge_timer.cancel()
            slot.purge_timer = None
        gen = slot.gen
        slot.beat = self.runtime.call_every(
            self.config.heartbeat_interval, self._child_heartbeat_tick, slot, gen
        )
        self._recompute_leaves()
        self._log("child_connected", child=slot.child_id, slot=slot.index)
        if self.on_child_connected is not None:
            self.on_child_connected(slot)
        queued, slot.queued = slot.queued, []
        for rec in queued:
            slot.ctrl.send(rec)

    def _child_heartbeat_tick(self, slot: ChildSlot, gen: int) -> None:
        if slot.gen != gen or slot.state != CONNECTED:
            return
        slot.ctrl.send(wire.heartbeat(int(self.runtime.now() * 1000)))
        if self.runtime.now() - slot.last_seen > self.config.heartbeat_timeout:
            self._child_gone(slot, gen, "heartbeat timeout")

    def _on_child_ctrl(self, slot: ChildSlot, gen: int, rec: dict) -> None:
        if self.dead or slot.gen != gen:
            return
        slot.last_seen = self.runtime.now()
        kind = rec.get("type")
        if kind == "HEARTBEAT":
            pass
        elif kind == "STATUS":
            leaves = rec.get("leaves")
            if isinstance(leaves, int) and leaves >= 1:
                if leaves != slot.leaves:
                    slot.leaves = leaves
                    self._recompute_leaves()
                    if self.on_child_status is not None:
                        self.on_child_status(slot)
            else:
                log.warning("%s: malformed status from child ignored", self.name)
        elif kind == "JOIN":
            # Answers bubble up from the subtree toward the relay.
            self._send_answer(rec)
        else:
            log.debug("%s: ignoring child ctrl %s", self.name, kind)

    def _child_gone(self, slot: ChildSlot, gen: int, why: str) -> None:
        if self.dead or slot.gen != gen or slot.state == EMPTY:
            return
        was_connected = slot.state == CONNECTED
        self._log("child_lost", child=slot.child_id, slot=slot.index, why=why)
        queued = slot.queued
        self._clear_slot(slot, close=True)
        self._recompute_leaves()
        if self.on_child_lost is not None:
            self.on_child_lost(slot, was_connected)
        for rec in queued:
            self._route_request(rec)

    def _clear_slot(self, slot: ChildSlot, close: bool) -> None:
        slot.gen += 1
        if slot.purge_timer is not None:
            slot.purge_timer.cancel()
        if slot.beat is not None:
            slot.beat.cancel()
        for conn in (slot.ctrl, slot.data):
            if conn is not None:
                conn.on_record = None
                conn.on_close = None
                if close:
                    conn.close()
        slot._reset()
