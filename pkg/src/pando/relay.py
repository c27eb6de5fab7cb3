"""Bootstrap relay: identity assignment, join-signal routing, browser bridging.

The relay is the one well-known endpoint in a cluster.  Every volunteer dials
it first and keeps the connection only as long as it needs signalling:

* ``REGISTER`` (boot) — assign a fresh random 64-bit identity and answer
  ``ID``.  One connection may claim ``"root": true``; a second live root gets
  ``REJECT``, as does a candidate whose drawn identity collides (it simply
  registers again).
* ``JOIN`` (boot) — routed by three rules: a record from the conversation
  that owns ``origin`` goes to its ``destination`` when set, otherwise to the
  root; a record arriving from anyone else is an answer and goes back to the
  connection registered for ``origin``.  Unroutable records are dropped with
  a warning.
* ``ATTACH`` (boot) — a client that cannot accept or dial arbitrary peers
  (a browser tab) asks the relay to broker its channels: the relay dials the
  accepting parent, performs the two-channel handshake on the client's
  behalf, then forwards ctrl/data records both ways.  The ack is the ATTACH
  echoed back; failure is REJECT.

On its TCP port the relay also answers plain HTTP: a GET serves the static
volunteer page (or a placeholder when none is installed), and a WebSocket
upgrade turns the connection into a record channel with the same grammar —
that is how browser tabs speak to it.
"""

from __future__ import annotations

import logging
from collections import deque
from pathlib import Path
from typing import Any, Callable, Optional

from . import wire
from .runtime import Runtime
from .transport import WebSocketProtocol, _LineProtocol, dial_parent

log = logging.getLogger(__name__)

PLACEHOLDER_PAGE = b"""<!doctype html>
<meta charset="utf-8">
<title>pando relay</title>
<p>The relay is running, but the web volunteer page is not installed.
Build the frontend package and point the relay at its dist directory.</p>
"""

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".mjs": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".map": "application/json",
    ".json": "application/json",
    ".ico": "image/x-icon",
    ".svg": "image/svg+xml",
}


class _Peer:
    __slots__ = ("conn", "id", "bridge")

    def __init__(self, conn):
        self.conn = conn
        self.id: Optional[str] = None
        self.bridge: Optional["_Bridge"] = None


class _Bridge:
    __slots__ = ("ctrl", "data", "token", "closed")

    def __init__(self, ctrl, data, token: str):
        self.ctrl = ctrl
        self.data = data
        self.token = token
        self.closed = False

    def teardown(self) -> None:
        if self.closed:
            return
        self.closed = True
        self.ctrl.close()
        self.data.close()


class RelayService:
    """Signalling hub; transport-agnostic over the conn interface."""

    def __init__(self, runtime: Runtime, static_dir: Optional[str] = None):
        self._runtime = runtime
        self._rng = runtime.rng
        self._peers: dict[int, _Peer] = {}
        self._ids: dict[str, _Peer] = {}
        self._root_id: Optional[str] = None
        self._parked_joins: deque = deque()  # candidate JOINs awaiting a root
        self._fabric: Any = None
        self.addr: Optional[str] = None
        self.stats = {
            "registered": 0,
            "joins_routed": 0,
            "joins_parked": 0,
            "dropped": 0,
            "bridges": 0,
        }
        self.pages: dict[str, tuple[str, bytes]] = {
            "/": ("text/html; charset=utf-8", PLACEHOLDER_PAGE)
        }
        if static_dir:
            self.load_static(static_dir)

    # -- setup -----------------------------------------------------------------

    def load_static(self, static_dir: str) -> None:
        root = Path(static_dir)
        if not root.is_dir():
            log.warning("static dir %s missing; serving placeholder page", static_dir)
            return
        for path in root.rglob("*"):
            if not path.is_file():
                continue
            ctype = _CONTENT_TYPES.get(path.suffix.lower())
            if ctype is None:
                continue
            rel = "/" + path.relative_to(root).as_posix()
            body = path.read_bytes()
            self.pages[rel] = (ctype, body)
            if rel == "/index.html":
                self.pages["/"] = (ctype, body)

    def listen(self, fabric: Any, hint: Optional[str] = None) -> str:
        """Start accepting through the given fabric; returns the address."""
        self._fabric = fabric
        self.addr = fabric.listen(
            self.handle_conn, hint=hint, protocol_factory=self.protocol_factory
        )
        return self.addr

    def protocol_factory(self, conn):
        return SnifferProtocol(conn, self.pages)

    # -- connection lifecycle ----------------------------------------------------

    def handle_conn(self, conn) -> None:
        peer = _Peer(conn)
        self._peers[id(conn)] = peer
        conn.on_record = lambda rec: self._on_record(peer, rec)
        conn.on_close = lambda: self._on_close(peer)

    def _on_close(self, peer: _Peer) -> None:
        self._peers.pop(id(peer.conn), None)
        if peer.id is not None and self._ids.get(peer.id) is peer:
            del self._ids[peer.id]
            if self._root_id == peer.id:
                self._root_id = None
        if peer.bridge is not None:
            peer.bridge.teardown()
            peer.bridge = None

    # -- record routing ------------------------------------------------------------

    def _on_record(self, peer: _Peer, rec: dict) -> None:
        ch = rec.get("ch")
        if ch == "boot":
            kind = rec.get("type")
            if kind == "REGISTER":
                self._register(peer, rec)
            elif kind == "JOIN":
                self._route_join(peer, rec)
            elif kind == "ATTACH":
                self._attach(peer, rec)
            else:
                self._drop(rec, "unexpected boot record")
        elif ch in ("ctrl", "data") and peer.bridge is not None and not peer.bridge.closed:
            pipe = peer.bridge.ctrl if ch == "ctrl" else peer.bridge.data
            pipe.send(rec)
        else:
            self._drop(rec, "no route for channel")

    def _register(self, peer: _Peer, rec: dict) -> None:
        wants_root = rec.get("root") is True
        if wants_root and self._root_id is not None:
            log.warning("second root registration rejected")
            peer.conn.send(wire.reject())
            return
        node_id = wire.id_to_hex(wire.new_node_id(self._rng))
        if node_id in self._ids:
            log.warning("identity collision on %s; rejecting for retry", node_id)
            peer.conn.send(wire.reject())
            return
        if peer.id is not None and self._ids.get(peer.id) is peer:
            del self._ids[peer.id]  # re-registration replaces the old identity
            if self._root_id == peer.id:
                self._root_id = None
        peer.id = node_id
        self._ids[node_id] = peer
        if wants_root:
            self._root_id = node_id
        self.stats["registered"] += 1
        peer.conn.send(wire.ident(node_id))
        if wants_root:
            self._flush_parked_joins()

    def _route_join(self, peer: _Peer, rec: dict) -> None:
        origin = rec.get("origin")
        destination = rec.get("destination")
        if peer.id is not None and peer.id == origin:
            # Candidate-originated: pinned destination once set, else the root.
            if destination is None and self._root_id is None:
                # No root yet (still registering, or between roots): park the
                # request instead of forcing the candidate into a long retry.
                self._park_join(rec)
                return
            target_id = destination if destination is not None else self._root_id
        else:
            # Answer from an accepting node: back to whoever owns the origin.
            target_id = origin
        target = self._ids.get(target_id) if target_id is not None else None
        if target is None:
            self._drop(rec, f"no route to {target_id!r}")
            return
        self.stats["joins_routed"] += 1
        target.conn.send(rec)

    _PARK_CAP = 10_000

    def _park_join(self, rec: dict) -> None:
        if len(self._parked_joins) >= self._PARK_CAP:
            self._drop(rec, "no root and parking full")
            return
        self._parked_joins.append(rec)
        self.stats["joins_parked"] += 1

    def _flush_parked_joins(self) -> None:
        parked, self._parked_joins = self._parked_joins, deque()
        for rec in parked:
            origin_peer = self._ids.get(rec.get("origin"))
            if origin_peer is None:
                self._drop(rec, "parked origin gone")
                continue
            self._route_join(origin_peer, rec)

    def _drop(self, rec: dict, why: str) -> None:
        self.stats["dropped"] += 1
        log.warning("dropping %s/%s: %s", rec.get("ch"), rec.get("type"), why)

    # -- browser channel brokering ------------------------------------------------

    def _attach(self, peer: _Peer, rec: dict) -> None:
        vchan = rec.get("vchan", "")
        addr, _, token = vchan.rpartition(":")
        if not addr or not wire.is_hex16(token) or peer.id is None or self._fabric is None:
            log.warning("bad attach %r", vchan)
            peer.conn.send(wire.reject())
            return
        if peer.bridge is not None:
            peer.bridge.teardown()
            peer.bridge = None

        def on_done(ctrl, data) -> None:
            if id(peer.conn) not in self._peers:  # client vanished while dialing
                ctrl.close()
                data.close()
                return
            bridge = _Bridge(ctrl, data, token)
            peer.bridge = bridge
            self.stats["bridges"] += 1

            def forward(pipe_rec: dict) -> None:
                peer.conn.send(pipe_rec)

            def pipe_lost() -> None:
                if bridge.closed:
                    return
                bridge.teardown()
                peer.conn.close()  # client sees a hangup and rejoins from scratch
                self._on_close(peer)

            ctrl.on_record = forward
            ctrl.on_close = pipe_lost
            data.on_record = forward
            data.on_close = pipe_lost
            peer.conn.send(wire.attach(vchan))

        def on_fail() -> None:
            if id(peer.conn) in self._peers:
                peer.conn.send(wire.reject())

        dial_parent(self._runtime, self._fabric, addr, token, peer.id, on_done, on_fail)


# -- first-bytes sniffing (socket transport only) ----------------------------------


class SnifferProtocol:
    """Decides what an inbound socket speaks: records, HTTP, or WebSocket.

    Runs on the hub thread.  Anything that does not start with ``GET `` is
    newline-delimited records.  An HTTP request either upgrades to WebSocket
    (same record grammar, one record per text frame) or is served a static
    page and closed.
    """

    __slots__ = ("_conn", "_pages", "_buf")

    def __init__(self, conn, pages: dict):
        self._conn = conn
        self._pages = pages
        self._buf = b""

    def feed(self, data: bytes) -> None:
        self._buf += data
        probe = self._buf[:4]
        if probe != b"GET "[: len(probe)]:
            proto = _LineProtocol(self._conn)
            self._conn.protocol = proto
            buf, self._buf = self._buf, b""
            proto.feed(buf)
            return
        if len(self._buf) < 4:
            return
        head_end = self._buf.find(b"\r\n\r\n")
        if head_end < 0:
            if len(self._buf) > 32768:
                self._conn.close()
            return
        head = self._buf[:head_end].decode("latin-1")
        rest = self._buf[head_end + 4 :]
        self._buf = b""
        self._handle_http(head, rest)

    def _handle_http(self, head: str, rest: bytes) -> None:
        lines = head.split("\r\n")
        request = lines[0].split(" ")
        path = request[1] if len(request) >= 2 else "/"
        headers = {}
        for line in lines[1:]:
            name, _, value = line.partition(":")
            headers[name.strip().lower()] = value.strip()
        if headers.get("upgrade", "").lower() == "websocket" and "sec-websocket-key" in headers:
            self._conn.send_bytes(
                WebSocketProtocol.handshake_response(headers["sec-websocket-key"])
            )
            proto = WebSocketProtocol(self._conn)
            self._conn.protocol = proto
            if rest:
                proto.feed(rest)
            return
        page = self._pages.get(path.split("?", 1)[0])
        if page is None:
            body = b"not found\n"
            self._conn.send_bytes(
                b"HTTP/1.1 404 Not Found\r\nContent-Type: text/plain\r\n"
                b"Content-Length: %d\r\nConnection: close\r\n\r\n%s" % (len(body), body)
            )
        else:
            ctype, body = page
            self._conn.send_bytes(
                b"HTTP/1.1 200 OK\r\nContent-Type: %s\r\nContent-Length: %d\r\n"
                b"Connection: close\r\n\r\n%s" % (ctype.encode(), len(body), body)
            )
        # Client reads the response; it closes, or our next read returns EOF.

    def encode_out(self, record: dict) -> bytes:
        return wire.encode(record)
