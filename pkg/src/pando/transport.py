"""Transports: in-process simulated channels and real stream sockets.

Node logic sees one tiny connection interface either way:

* ``conn.send(record)`` — fire-and-forget, ordered, never blocks the caller;
* ``conn.close()`` — local hangup (no further callbacks fire);
* ``conn.on_record = fn`` — called once per received record;
* ``conn.on_close = fn`` — called once when the peer goes away.

Callbacks always run on the owning runtime's dispatcher, so node state needs
no locking.

The in-process network (:class:`InprocNetwork`) pairs endpoints through the
simulation runtime with a small per-connection latency drawn from the seeded
RNG; records travel as plain dicts (same grammar as the wire, no JSON cost).

The socket side (:class:`SocketHub`) runs one selector thread for all
sockets in the process.  Incoming bytes pass through a pluggable protocol —
newline-delimited JSON by default; the relay swaps in sniffing, HTTP, or
WebSocket handling on top of the same connection object.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import selectors
import socket
import struct
import threading
from collections import deque
from typing import Any, Callable, Optional

from . import wire
from .runtime import Runtime

log = logging.getLogger(__name__)

RecordFn = Callable[[dict], None]
CloseFn = Callable[[], None]


# -- in-process transport -----------------------------------------------------


class InprocEndpoint:
    """One side of a simulated ordered channel."""

    __slots__ = ("on_record", "on_close", "_peer", "_runtime", "_latency", "_open", "name")

    def __init__(self, runtime: Runtime, latency: float, name: str = "?"):
        self.on_record: Optional[RecordFn] = None
        self.on_close: Optional[CloseFn] = None
        self._peer: Optional["InprocEndpoint"] = None
        self._runtime = runtime
        self._latency = latency
        self._open = True
        self.name = name

    def send(self, record: dict) -> None:
        peer = self._peer
        if not self._open or peer is None:
            return
        self._runtime.call_later(self._latency, peer._deliver, record)

    def _deliver(self, record: dict) -> None:
        if self._open and self.on_record is not None:
            self.on_record(record)

    def close(self) -> None:
        if not self._open:
            return
        self._open = False
        peer = self._peer
        if peer is not None:
            self._runtime.call_later(self._latency, peer._peer_closed)

    def vanish(self) -> None:
        """Die without telling the peer (a crash the network never reports);
        the other side can only notice via its own liveness checks."""
        self._open = False

    def _peer_closed(self) -> None:
        if not self._open:
            return
        self._open = False
        if self.on_close is not None:
            self.on_close()

    @property
    def is_open(self) -> bool:
        return self._open


class InprocNetwork:
    """Address registry + connector for simulated channels."""

    def __init__(self, runtime: Runtime, min_latency: float = 0.0002, max_latency: float = 0.002):
        self._runtime = runtime
        self._listeners: dict[str, Callable[[InprocEndpoint], None]] = {}
        self._min = min_latency
        self._max = max_latency

    def listen(self, addr: str, on_conn: Callable[[InprocEndpoint], None]) -> None:
        if addr in self._listeners:
            raise ValueError(f"address already in use: {addr}")
        self._listeners[addr] = on_conn

    def unlisten(self, addr: str) -> None:
        self._listeners.pop(addr, None)

    def connect(self, addr: str) -> Optional[InprocEndpoint]:
        """Dial a listener; returns the local endpoint, or None if nobody
        is listening.  The listener's on_conn fires on a later event."""
        on_conn = self._listeners.get(addr)
        if on_conn is None:
            return None
        latency = self._runtime.rng.uniform(self._min, self._max)
        near = InprocEndpoint(self._runtime, latency, f"{addr}:near")
        far = InprocEndpoint(self._runtime, latency, f"{addr}:far")
        near._peer, far._peer = far, near
        self._runtime.call_later(latency, on_conn, far)
        return near


# -- socket transport -------------------------------------------------------------


class _LineProtocol:
    """Default byte protocol: newline-delimited JSON records."""

    __slots__ = ("_conn", "_decoder")

    def __init__(self, conn: "SocketConn"):
        self._conn = conn
        self._decoder = wire.LineDecoder()

    def feed(self, data: bytes) -> None:
        for record in self._decoder.feed(data):
            self._conn.dispatch_record(record)

    def encode_out(self, record: dict) -> bytes:
        return wire.encode(record)


WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class WebSocketProtocol:
    """Minimal RFC 6455 server side: text frames carry one record each.

    Installed by the relay after it answers the upgrade handshake.  Handles
    masked client frames, fragmentation, ping/pong, and close.
    """

    __slots__ = ("_conn", "_buf", "_fragments")

    def __init__(self, conn: "SocketConn"):
        self._conn = conn
        self._buf = b""
        self._fragments: list[bytes] = []

    @staticmethod
    def accept_key(client_key: str) -> str:
        digest = hashlib.sha1((client_key + WS_GUID).encode()).digest()
        return base64.b64encode(digest).decode()

    @staticmethod
    def handshake_response(client_key: str) -> bytes:
        return (
            "HTTP/1.1 101 Switching Protocols\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Accept: {WebSocketProtocol.accept_key(client_key)}\r\n"
            "\r\n"
        ).encode()

    def feed(self, data: bytes) -> None:
        self._buf += data
        while True:
            frame = self._parse_frame()
            if frame is None:
                return
            fin, opcode, payload = frame
            if opcode == 0x8:  # close
                self._conn.send_bytes(self._encode_frame(0x8, b""))
                self._conn.close(notify=True)
                return
            if opcode == 0x9:  # ping
                self._conn.send_bytes(self._encode_frame(0xA, payload))
                continue
            if opcode == 0xA:  # pong
                continue
            if opcode in (0x1, 0x2, 0x0):
                self._fragments.append(payload)
                if fin:
                    message = b"".join(self._fragments)
                    self._fragments = []
                    self._dispatch_text(message)

    def _dispatch_text(self, message: bytes) -> None:
        for record in wire.LineDecoder().feed(message.rstrip(b"\n") + b"\n"):
            self._conn.dispatch_record(record)

    def _parse_frame(self) -> Optional[tuple[bool, int, bytes]]:
        buf = self._buf
        if len(buf) < 2:
            return None
        b0, b1 = buf[0], buf[1]
        fin = bool(b0 & 0x80)
        opcode = b0 & 0x0F
        masked = bool(b1 & 0x80)
        length = b1 & 0x7F
        offset = 2
        if length == 126:
            if len(buf) < 4:
                return None
            length = struct.unpack_from(">H", buf, 2)[0]
            offset = 4
        elif length == 127:
            if len(buf) < 10:
                return None
            length = struct.unpack_from(">Q", buf, 2)[0]
            offset = 10
        mask = b""
        if masked:
            if len(buf) < offset + 4:
                return None
            mask = buf[offset : offset + 4]
            offset += 4
        if len(buf) < offset + length:
            return None
        payload = buf[offset : offset + length]
        self._buf = buf[offset + length :]
        if masked:
            payload = bytes(c ^ mask[i & 3] for i, c in enumerate(payload))
        return fin, opcode, payload

    @staticmethod
    def _encode_frame(opcode: int, payload: bytes) -> bytes:
        head = bytes([0x80 | opcode])
        n = len(payload)
        if n < 126:
            head += bytes([n])
        elif n < 1 << 16:
            head += bytes([126]) + struct.pack(">H", n)
        else:
            head += bytes([127]) + struct.pack(">Q", n)
        return head + payload

    def encode_out(self, record: dict) -> bytes:
        return self._encode_frame(0x1, wire.encode(record).rstrip(b"\n"))


class SocketConn:
    """One TCP connection owned by the hub thread.

    ``send``/``close`` may be called from any thread; ``on_record`` and
    ``on_close`` run on the runtime dispatcher.
    """

    def __init__(self, hub: "SocketHub", sock: socket.socket, runtime: Runtime):
        self._hub = hub
        self._sock = sock
        self._runtime = runtime
        self._out = deque()
        self._out_lock = threading.Lock()
        self._closed = False
        self._close_notified = False
        self.protocol: Any = _LineProtocol(self)
        self.on_record: Optional[RecordFn] = None
        self.on_close: Optional[CloseFn] = None
        self.peer_name = "?"
        try:
            self.peer_name = "%s:%d" % sock.getpeername()[:2]
        except OSError:
            pass

    # -- outbound ------------------------------------------------------------

    def send(self, record: dict) -> None:
        if self._closed:
            return
        self.send_bytes(self.protocol.encode_out(record))

    def send_bytes(self, data: bytes) -> None:
        if self._closed:
            return
        with self._out_lock:
            self._out.append(data)
        self._hub.request_write(self)

    def close(self, notify: bool = False) -> None:
        """Hang up.  With notify=True the on_close callback still fires
        (used when the protocol itself decides the connection is over)."""
        self._hub.drop(self, notify=notify)

    def vanish(self) -> None:
        """Die silently: stop reading and writing but keep the socket open,
        so the peer never sees a close and must detect death by timeout."""
        self._closed = True  # drop sends immediately, from any thread
        self._hub.drop_silent(self)

    # -- called from the hub thread ----------------------------------------------

    def dispatch_record(self, record: dict) -> None:
        self._runtime.post(self._dispatch_record_cb, record)

    def _dispatch_record_cb(self, record: dict) -> None:
        if self.on_record is not None and not self._close_notified and not self._closed:
            self.on_record(record)

    def notify_close(self) -> None:
        self._runtime.post(self._notify_close_cb)

    def _notify_close_cb(self) -> None:
        if self._close_notified:
            return
        self._close_notified = True
        if self.on_close is not None:
            self.on_close()

    @property
    def is_open(self) -> bool:
        return not self._closed


class SocketHub:
    """One selector thread multiplexing every socket in the process."""

    def __init__(self, runtime: Runtime):
        self._runtime = runtime
        self._selector = selectors.DefaultSelector()
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_r.setblocking(False)
        self._selector.register(self._wake_r, selectors.EVENT_READ, ("wake", None))
        self._pending: deque = deque()
        self._pending_lock = threading.Lock()
        self._thread: Optional[threading.Thread] = None
        self._stopped = False
        self._zombies: list[socket.socket] = []  # vanished conns' parked fds

    # -- public API (any thread) ----------------------------------------------

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="pando-io", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._post(("stop", None))

    def listen(
        self,
        host: str,
        port: int,
        on_conn: Callable[[SocketConn], None],
        protocol_factory: Optional[Callable[[SocketConn], Any]] = None,
    ) -> int:
        """Bind and listen; returns the bound port. on_conn runs on the
        runtime dispatcher with the accepted connection.

        protocol_factory, if given, replaces the connection's byte protocol
        synchronously at accept time — before any bytes are read — so a
        server can sniff the first bytes (HTTP vs raw records).
        """
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, port))
        srv.listen(128)
        srv.setblocking(False)
        bound = srv.getsockname()[1]
        self._post(("listen", (srv, on_conn, protocol_factory)))
        return bound

    def connect(
        self,
        host: str,
        port: int,
        on_ready: Callable[[Optional[SocketConn]], None],
        timeout: float = 5.0,
    ) -> None:
        """Dial asynchronously; on_ready(conn or None) runs on the dispatcher."""

        def dial() -> None:
            try:
                sock = socket.create_connection((host, port), timeout=timeout)
            except OSError as exc:
                log.debug("connect %s:%d failed: %s", host, port, exc)
                self._runtime.post(on_ready, None)
                return
            sock.setblocking(False)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = SocketConn(self, sock, self._runtime)
            self._post(("register", conn))
            self._runtime.post(on_ready, conn)

        threading.Thread(target=dial, daemon=True).start()

    def request_write(self, conn: SocketConn) -> None:
        self._post(("write", conn))

    def drop(self, conn: SocketConn, notify: bool = False) -> None:
        self._post(("drop", (conn, notify)))

    def drop_silent(self, conn: SocketConn) -> None:
        self._post(("vanish", conn))

    # -- hub thread ---------------------------------------------------------------

    def _post(self, item: tuple) -> None:
        with self._pending_lock:
            self._pending.append(item)
        try:
            self._wake_w.send(b"x")
        except OSError:
            pass

    def _run(self) -> None:
        while not self._stopped:
            for key, _events in self._selector.select(timeout=1.0):
                kind, payload = key.data
                if kind == "wake":
                    try:
                        self._wake_r.recv(4096)
                    except OSError:
                        pass
                elif kind == "server":
                    self._accept(key.fileobj, payload)
                elif kind == "conn":
                    self._io(key, payload)
            self._drain_pending()
        for sock in self._zombies:
            try:
                sock.close()
            except OSError:
                pass
        self._zombies.clear()

    def _drain_pending(self) -> None:
        while True:
            with self._pending_lock:
                if not self._pending:
                    return
                op, payload = self._pending.popleft()
            if op == "stop":
                self._stopped = True
            elif op == "listen":
                srv, on_conn, protocol_factory = payload
                self._selector.register(
                    srv, selectors.EVENT_READ, ("server", (on_conn, protocol_factory))
                )
            elif op == "register":
                self._register_conn(payload)
            elif op == "write":
                self._enable_write(payload)
            elif op == "drop":
                conn, notify = payload
                self._close_conn(conn, notify=notify)
            elif op == "vanish":
                self._vanish_conn(payload)

    def _register_conn(self, conn: SocketConn) -> None:
        if conn._closed:
            return
        self._selector.register(conn._sock, selectors.EVENT_READ, ("conn", conn))
        if conn._out:
            self._enable_write(conn)

    def _accept(self, srv: socket.socket, payload: tuple) -> None:
        on_conn, protocol_factory = payload
        try:
            sock, _addr = srv.accept()
        except OSError:
            return
        sock.setblocking(False)
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass
        conn = SocketConn(self, sock, self._runtime)
        if protocol_factory is not None:
            conn.protocol = protocol_factory(conn)
        self._selector.register(sock, selectors.EVENT_READ, ("conn", conn))
        self._runtime.post(on_conn, conn)

    def _io(self, key: selectors.SelectorKey, conn: SocketConn) -> None:
        # Read side (recv on a merely-writable socket just raises BlockingIOError).
        try:
            data = conn._sock.recv(65536)
        except BlockingIOError:
            data = None
        except OSError:
            self._close_conn(conn, notify=True)
            return
        if data == b"":
            self._close_conn(conn, notify=True)
            return
        if data:
            try:
                conn.protocol.feed(data)
            except Exception:
                log.exception("protocol error from %s", conn.peer_name)
                self._close_conn(conn, notify=True)
                return
        self._flush(conn)

    def _enable_write(self, conn: SocketConn) -> None:
        if conn._closed:
            return
        self._flush(conn)

    def _flush(self, conn: SocketConn) -> None:
        if conn._closed:
            return
        while True:
            with conn._out_lock:
                if not conn._out:
                    chunk = None
                else:
                    chunk = conn._out.popleft()
            if chunk is None:
                break
            try:
                sent = conn._sock.send(chunk)
            except BlockingIOError:
                sent = 0
            except OSError:
                self._close_conn(conn, notify=True)
                return
            if sent < len(chunk):
                with conn._out_lock:
                    conn._out.appendleft(chunk[sent:])
                # Wait for writability.
                try:
                    self._selector.modify(
                        conn._sock, selectors.EVENT_READ | selectors.EVENT_WRITE, ("conn", conn)
                    )
                except KeyError:
                    pass
                return
        try:
            self._selector.modify(conn._sock, selectors.EVENT_READ, ("conn", conn))
        except KeyError:
            pass

    def _vanish_conn(self, conn: SocketConn) -> None:
        # conn._closed was already set by vanish(); just detach the socket.
        try:
            self._selector.unregister(conn._sock)
        except (KeyError, ValueError):
            pass
        # Park the fd so no FIN ever reaches the peer; reclaimed on hub stop.
        self._zombies.append(conn._sock)

    def _close_conn(self, conn: SocketConn, notify: bool) -> None:
        if conn._closed:
            return
        conn._closed = True
        try:
            self._selector.unregister(conn._sock)
        except (KeyError, ValueError):
            pass
        try:
            conn._sock.close()
        except OSError:
            pass
        if notify:
            conn.notify_close()


# -- parent handshake ---------------------------------------------------------


def dial_parent(
    runtime: Runtime,
    fabric: Any,
    addr: str,
    token: str,
    origin: str,
    on_done: Callable[[Any, Any], None],
    on_fail: Callable[[], None],
    timeout: float = 10.0,
) -> None:
    """Open the two channels to an accepting parent.

    Dials ``addr``, identifies the control channel by sending a join record
    whose signal carries the slot token, waits for the parent's OPEN_DATA
    echo, then dials again and presents the token as the first line of the
    data channel.  Calls ``on_done(ctrl_conn, data_conn)`` with both handlers
    cleared, or ``on_fail()`` once on any error or timeout.
    """
    state: dict = {"ctrl": None, "data": None, "done": False, "timer": None}

    def fail() -> None:
        if state["done"]:
            return
        state["done"] = True
        if state["timer"] is not None:
            state["timer"].cancel()
        for k in ("ctrl", "data"):
            if state[k] is not None:
                state[k].close()
        on_fail()

    def got_ctrl(conn) -> None:
        if conn is None:
            fail()
            return
        if state["done"]:
            conn.close()
            return
        state["ctrl"] = conn
        conn.on_close = fail
        conn.on_record = on_ctrl_record
        conn.send(wire.join(origin, {"token": token}))

    def on_ctrl_record(rec: dict) -> None:
        if state["done"]:
            return
        if rec.get("type") == "OPEN_DATA" and rec.get("token") == token:
            fabric.connect(addr, got_data)
        # Anything else before the handshake completes is premature; drop it.

    def got_data(conn) -> None:
        if conn is None:
            fail()
            return
        if state["done"]:
            conn.close()
            return
        state["data"] = conn
        conn.send(wire.open_data(token))
        state["done"] = True
        if state["timer"] is not None:
            state["timer"].cancel()
        ctrl = state["ctrl"]
        ctrl.on_record = None
        ctrl.on_close = None
        on_done(ctrl, conn)

    state["timer"] = runtime.call_later(timeout, fail)
    fabric.connect(addr, got_ctrl)


# -- transport-neutral fabric --------------------------------------------------

# Node code dials and listens through a fabric so the same logic runs over
# simulated channels or real sockets.  Addresses are opaque strings: the
# in-process fabric hands out registry names, the socket fabric "host:port".


class InprocFabric:
    def __init__(self, runtime: Runtime, network: Optional[InprocNetwork] = None):
        self.runtime = runtime
        self.network = network if network is not None else InprocNetwork(runtime)
        self._counter = 0

    def listen(self, on_conn: Callable, hint: Optional[str] = None, protocol_factory=None) -> str:
        addr = hint if hint is not None else f"ep-{self._counter}"
        self._counter += 1
        self.network.listen(addr, on_conn)
        return addr

    def unlisten(self, addr: str) -> None:
        self.network.unlisten(addr)

    def connect(self, addr: str, on_ready: Callable[[Optional[InprocEndpoint]], None]) -> None:
        conn = self.network.connect(addr)
        self.runtime.post(on_ready, conn)


class SocketFabric:
    def __init__(self, runtime: Runtime, hub: Optional[SocketHub] = None, advertise_host: str = "127.0.0.1"):
        self.runtime = runtime
        self.hub = hub if hub is not None else SocketHub(runtime)
        self.advertise_host = advertise_host
        self._owns_hub = hub is None
        if self._owns_hub:
            self.hub.start()

    def listen(self, on_conn: Callable, hint: Optional[str] = None, protocol_factory=None) -> str:
        port = 0
        host = "0.0.0.0"
        if hint:
            if ":" in hint:
                host, _, p = hint.rpartition(":")
                port = int(p)
            else:
                port = int(hint)
        bound = self.hub.listen(host, port, on_conn, protocol_factory=protocol_factory)
        return f"{self.advertise_host}:{bound}"

    def unlisten(self, addr: str) -> None:  # listeners live until the hub stops
        pass

    def connect(self, addr: str, on_ready: Callable[[Optional[SocketConn]], None]) -> None:
        host, _, p = addr.rpartition(":")
        self.hub.connect(host or "127.0.0.1", int(p), on_ready)

    def stop(self) -> None:
        if self._owns_hub:
            self.hub.stop()
