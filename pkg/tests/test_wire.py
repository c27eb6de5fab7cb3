"""Wire records, framing, node ids, and join-route hashing."""

import json
import pathlib

import pytest

from pando import wire

FIXTURES = pathlib.Path(__file__).parent / "fixtures"


# -- hashing -----------------------------------------------------------------


def test_fnv1a64_matches_published_reference_vectors():
    assert wire.fnv1a64(b"") == 0xCBF29CE484222325
    assert wire.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert wire.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_route_index_pinned_protocol_vector():
    # node 0, origin 1: hash of big-endian 00..01 is 0xa8c7f732281a3812.
    assert wire.fnv1a64(bytes([0, 0, 0, 0, 0, 0, 0, 1])) == 0xA8C7F732281A3812
    assert wire.route_index(0x0, 0x1, 10) == 4


def test_route_index_frozen_vector_table():
    table = json.loads((FIXTURES / "routing_vectors.json").read_text())
    for row in table:
        node = int(row["node"], 16)
        origin = int(row["origin"], 16)
        assert wire.route_index(node, origin, row["max_degree"]) == row["index"]
        mixed = ((node ^ origin) & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "big")
        assert format(wire.fnv1a64(mixed), "016x") == row["hash"]


def test_route_index_is_deterministic_and_in_range():
    import random

    rng = random.Random(7)
    for _ in range(200):
        node, origin = rng.getrandbits(64), rng.getrandbits(64)
        idx = wire.route_index(node, origin, 10)
        assert 0 <= idx < 10
        assert idx == wire.route_index(node, origin, 10)


# -- identities -----------------------------------------------------------------


def test_id_hex_roundtrip():
    import random

    rng = random.Random(3)
    for _ in range(50):
        node_id = wire.new_node_id(rng)
        text = wire.id_to_hex(node_id)
        assert len(text) == 16 and text == text.lower()
        assert wire.hex_to_id(text) == node_id


def test_hex_to_id_rejects_bad_length():
    with pytest.raises(ValueError):
        wire.hex_to_id("abc")


# -- framing --------------------------------------------------------------------


def all_record_samples():
    return [
        wire.register(),
        wire.register(root=True),
        wire.ident("00000000000000ff"),
        wire.reject(),
        wire.join("00000000000000ff", {"host": "h", "port": 1, "token": "00000000000000aa"}),
        wire.join("00000000000000ff", "sig", "a8c7f732281a3812"),
        wire.attach("vc-1"),
        wire.heartbeat(17),
        wire.status(4),
        wire.open_data("00000000000000aa"),
        wire.value(3, "12"),
        wire.result(3, True, "144"),
        wire.result(3, False, "EPARSE not a number"),
    ]


def test_every_record_type_roundtrips_through_framing():
    decoder = wire.LineDecoder()
    for rec in all_record_samples():
        assert wire.validate(rec), rec
        got = list(decoder.feed(wire.encode(rec)))
        assert got == [rec]


def test_decoder_handles_arbitrary_chunk_boundaries():
    records = all_record_samples()
    blob = b"".join(wire.encode(r) for r in records)
    for chunk_size in (1, 2, 3, 7, len(blob)):
        decoder = wire.LineDecoder()
        got = []
        for i in range(0, len(blob), chunk_size):
            got.extend(decoder.feed(blob[i : i + chunk_size]))
        assert got == records


def test_decoder_drops_malformed_lines_and_continues(caplog):
    decoder = wire.LineDecoder()
    blob = b'{"ch":"ctrl","type":"STATUS","leaves":1}\nnot json\n{"ch":"ctrl","type":"STATUS","leaves":2}\n'
    got = list(decoder.feed(blob))
    assert [r["leaves"] for r in got] == [1, 2]


def test_decoder_skips_blank_lines():
    decoder = wire.LineDecoder()
    got = list(decoder.feed(b"\n  \n" + wire.encode(wire.status(1))))
    assert len(got) == 1


def test_decoder_drops_non_object_records():
    decoder = wire.LineDecoder()
    got = list(decoder.feed(b"[1,2,3]\n42\n" + wire.encode(wire.status(9))))
    assert got == [wire.status(9)]


def test_decoder_bounds_unterminated_garbage():
    decoder = wire.LineDecoder()
    assert list(decoder.feed(b"x" * (wire.LineDecoder.MAX_LINE + 1))) == []
    # Buffer was reset; well-formed traffic still decodes afterwards.
    assert list(decoder.feed(wire.encode(wire.status(1)))) == [wire.status(1)]


# -- validation -------------------------------------------------------------------


def test_validate_rejects_unknown_and_malformed_records():
    assert not wire.validate({"ch": "boot", "type": "NOPE"})
    assert not wire.validate({"ch": "data", "type": "VALUE", "seq": -1, "payload": "x"})
    assert not wire.validate({"ch": "data", "type": "VALUE", "seq": 0})
    assert not wire.validate({"ch": "data", "type": "VALUE", "seq": 0, "payload": 7})
    assert not wire.validate({"ch": "ctrl", "type": "STATUS", "leaves": "3"})
    assert not wire.validate({"ch": "boot", "type": "ID", "id": "XYZ"})
    assert not wire.validate(
        {"ch": "boot", "type": "JOIN", "origin": "00000000000000ff", "signal": 0, "destination": "zz"}
    )
    assert not wire.validate({})


def test_validate_accepts_optional_join_destination():
    rec = wire.join("00000000000000ff", None, "00000000000000aa")
    assert wire.validate(rec)


# -- golden fixture ----------------------------------------------------------------


def test_golden_fixture_is_stable_and_reencodes_byte_identically():
    """The frozen fixture is the cross-implementation protocol contract:
    decoding each line and re-encoding it must reproduce the bytes."""
    blob = (FIXTURES / "wire_golden.jsonl").read_bytes()
    decoder = wire.LineDecoder()
    lines = blob.split(b"\n")
    records = list(decoder.feed(blob))
    assert len(records) == len([l for l in lines if l.strip()])
    reencoded = b"".join(wire.encode(r) for r in records)
    assert reencoded == blob
    for rec in records:
        assert wire.validate(rec), rec
