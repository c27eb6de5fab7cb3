"""Wire records, node identifiers, and the join-routing hash.

Every message between nodes (and between a node and the bootstrap relay) is
one JSON object per line, UTF-8.  The ``ch`` field names the logical channel
a record belongs to — ``boot`` (bootstrap/signaling), ``ctrl`` (membership,
heartbeats, status), ``data`` (job values and results) — independent of the
pipe it happens to ride on: delegated join requests, for example, travel
down existing parent-child connections as ``boot`` records.

Node identities are uniformly random unsigned 64-bit integers, rendered as
16 lowercase hex characters.  Join routing at a full node hashes the XOR of
the origin id and the local id (big-endian, 8 bytes) with FNV-1a 64 and
takes it modulo the fan-out, giving every implementation the same
deterministic, uniformly balanced child choice.
"""

from __future__ import annotations

import json
import logging
import random
from typing import Any, Iterator, Optional

log = logging.getLogger(__name__)

__all__ = [
    "fnv1a64",
    "route_index",
    "new_node_id",
    "id_to_hex",
    "hex_to_id",
    "encode",
    "LineDecoder",
    "validate",
    "register",
    "ident",
    "reject",
    "join",
    "heartbeat",
    "status",
    "open_data",
    "attach",
    "value",
    "result",
]

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """FNV-1a, 64-bit: XOR each byte into the hash, then multiply."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def route_index(node_id: int, origin_id: int, max_degree: int) -> int:
    """Deterministic child index for delegating a join request."""
    mixed = (node_id ^ origin_id) & _MASK64
    return fnv1a64(mixed.to_bytes(8, "big")) % max_degree


# -- identities ---------------------------------------------------------------


def new_node_id(rng: random.Random) -> int:
    return rng.getrandbits(64)


def id_to_hex(node_id: int) -> str:
    return format(node_id & _MASK64, "016x")


def hex_to_id(text: str) -> int:
    if len(text) != 16:
        raise ValueError(f"node id must be 16 hex chars, got {text!r}")
    return int(text, 16)


# -- record constructors -------------------------------------------------------


def register(root: bool = False) -> dict:
    rec: dict[str, Any] = {"ch": "boot", "type": "REGISTER"}
    if root:
        rec["root"] = True
    return rec


def ident(node_id_hex: str) -> dict:
    return {"ch": "boot", "type": "ID", "id": node_id_hex}


def reject() -> dict:
    return {"ch": "boot", "type": "REJECT"}


def join(origin_hex: str, signal: Any, destination_hex: Optional[str] = None) -> dict:
    rec: dict[str, Any] = {"ch": "boot", "type": "JOIN", "origin": origin_hex, "signal": signal}
    if destination_hex is not None:
        rec["destination"] = destination_hex
    return rec


def heartbeat(ts_ms: int) -> dict:
    return {"ch": "ctrl", "type": "HEARTBEAT", "ts": ts_ms}


def status(leaves: int) -> dict:
    return {"ch": "ctrl", "type": "STATUS", "leaves": leaves}


def open_data(token_hex: str) -> dict:
    return {"ch": "ctrl", "type": "OPEN_DATA", "token": token_hex}


def attach(vchan: str) -> dict:
    return {"ch": "boot", "type": "ATTACH", "vchan": vchan}


def value(seq: int, payload: str) -> dict:
    return {"ch": "data", "type": "VALUE", "seq": seq, "payload": payload}


def result(seq: int, ok: bool, payload: str) -> dict:
    return {"ch": "data", "type": "RESULT", "seq": seq, "ok": ok, "payload": payload}


# -- framing ---------------------------------------------------------------------


def encode(record: dict) -> bytes:
    """One record → one JSON line (newline-terminated, UTF-8)."""
    return json.dumps(record, separators=(",", ":")).encode("utf-8") + b"\n"


def decode_line(line: bytes) -> dict:
    """One JSON line (newline optional) → record dict.  Raises on garbage."""
    obj = json.loads(line)
    if not isinstance(obj, dict):
        raise ValueError("record line is not an object")
    return obj


class LineDecoder:
    """Incremental newline-delimited JSON decoder for a byte stream.

    Feed arbitrary chunks; get complete records.  Malformed lines are
    dropped with a log entry rather than killing the connection.
    """

    __slots__ = ("_buf",)

    MAX_LINE = 1 << 20  # defensive bound against unframed garbage

    def __init__(self) -> None:
        self._buf = b""

    def feed(self, chunk: bytes) -> Iterator[dict]:
        self._buf += chunk
        while True:
            nl = self._buf.find(b"\n")
            if nl < 0:
                if len(self._buf) > self.MAX_LINE:
                    log.warning("dropping oversized unterminated line")
                    self._buf = b""
                return
            line, self._buf = self._buf[:nl], self._buf[nl + 1 :]
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except ValueError:
                log.warning("dropping malformed line: %r", line[:120])
                continue
            if not isinstance(record, dict):
                log.warning("dropping non-object record: %r", line[:120])
                continue
            yield record


# -- validation --------------------------------------------------------------------

_HEX16 = set("0123456789abcdef")


def is_hex16(v: Any) -> bool:
    """True for a canonical 16-char lowercase-hex identity or token."""
    return isinstance(v, str) and len(v) == 16 and set(v) <= _HEX16


_is_hex16 = is_hex16


_SCHEMAS: dict[tuple, tuple] = {
    # (ch, type): ((field, predicate), ...)
    ("boot", "REGISTER"): (),
    ("boot", "ID"): (("id", _is_hex16),),
    ("boot", "REJECT"): (),
    ("boot", "JOIN"): (
        ("origin", _is_hex16),
        ("signal", lambda v: True),
    ),
    ("boot", "ATTACH"): (("vchan", lambda v: isinstance(v, str)),),
    ("ctrl", "HEARTBEAT"): (("ts", lambda v: isinstance(v, int)),),
    ("ctrl", "STATUS"): (("leaves", lambda v: isinstance(v, int) and v >= 0),),
    ("ctrl", "OPEN_DATA"): (("token", _is_hex16),),
    ("data", "VALUE"): (
        ("seq", lambda v: isinstance(v, int) and v >= 0),
        ("payload", lambda v: isinstance(v, str)),
    ),
    ("data", "RESULT"): (
        ("seq", lambda v: isinstance(v, int) and v >= 0),
        ("ok", lambda v: isinstance(v, bool)),
        ("payload", lambda v: isinstance(v, str)),
    ),
}


def validate(record: dict) -> bool:
    """True iff the record matches the protocol grammar."""
    key = (record.get("ch"), record.get("type"))
    schema = _SCHEMAS.get(key)
    if schema is None:
        return False
    for field, pred in schema:
        if field not in record or not pred(record[field]):
            return False
    if key == ("boot", "JOIN") and "destination" in record:
        if not _is_hex16(record["destination"]):
            return False
    return True
