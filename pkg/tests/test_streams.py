"""Pull-stream contract: sources, map, drain, compose."""

from collections import deque

from hypothesis import given, strategies as st

from pando.streams import (
    Outcome,
    StreamError,
    compose,
    drain,
    from_values,
    map_values,
    mapping,
)


def collect(source):
    """Drain a source, returning ([values...], terminal Outcome)."""
    got, term = [], []
    drain(source, got.append, term.append)
    assert len(term) == 1, "on_done must fire exactly once"
    return got, term[0]


def instrument(source):
    """Wrap a source, counting requests/aborts/deliveries."""
    stats = {"requests": 0, "aborts": 0, "delivers": 0}

    def wrapped(abort, deliver):
        stats["requests"] += 1
        if abort:
            stats["aborts"] += 1

        def counted(outcome):
            stats["delivers"] += 1
            deliver(outcome)

        source(abort, counted)

    return wrapped, stats


def manual_source(values):
    """Source that parks every delivery until the test pumps it."""
    pending = deque()
    state = {"i": 0, "done": False}

    def source(abort, deliver):
        pending.append((abort, deliver))

    def pump():
        abort, deliver = pending.popleft()
        if abort or state["done"] or state["i"] >= len(values):
            state["done"] = True
            deliver(Outcome.end())
        else:
            v = values[state["i"]]
            state["i"] += 1
            deliver(Outcome.ok(v))

    return source, pending, pump


def failing_after(values, code="EBOOM"):
    """Source delivering `values` then a failure."""
    state = {"i": 0}

    def source(abort, deliver):
        if abort or state["i"] > len(values):
            deliver(Outcome.end())
            return
        if state["i"] == len(values):
            state["i"] += 1
            deliver(Outcome.fail(code, "synthetic failure"))
            return
        v = values[state["i"]]
        state["i"] += 1
        deliver(Outcome.ok(v))

    return source


def square(x):
    return x * x


# -- from_values ------------------------------------------------------------


def test_empty_source_delivers_end_first():
    got, term = collect(from_values([]))
    assert got == []
    assert term.is_end


def test_singleton_source():
    got, term = collect(from_values([7]))
    assert got == [7]
    assert term.is_end


def test_source_delivers_end_forever_after_exhaustion():
    source = from_values([1, 2, 3])
    seen = []
    for _ in range(5):
        source(False, seen.append)
    kinds = [(o.kind, o.value) for o in seen]
    assert kinds == [
        ("value", 1),
        ("value", 2),
        ("value", 3),
        ("end", None),
        ("end", None),
    ]


def test_source_abort_answers_end_and_stops():
    source = from_values([1, 2, 3])
    seen = []
    source(False, seen.append)
    source(True, seen.append)
    source(False, seen.append)
    assert [o.kind for o in seen] == ["value", "end", "end"]


# -- map ---------------------------------------------------------------------


def test_map_squares_in_order():
    got, term = collect(map_values(from_values([0, 1, 2]), square))
    assert got == [0, 1, 4]
    assert term.is_end


def test_map_over_empty():
    got, term = collect(map_values(from_values([]), square))
    assert got == []
    assert term.is_end


def test_map_passes_failure_through():
    got, term = collect(map_values(failing_after([3]), square))
    assert got == [9]
    assert term.is_failure
    assert term.error == StreamError("EBOOM", "synthetic failure")


def test_map_fn_exception_fails_stream_and_aborts_upstream():
    wrapped, stats = instrument(from_values([1, 2, 3]))

    def explode(_x):
        raise ValueError("bad value")

    got, term = collect(map_values(wrapped, explode))
    assert got == []
    assert term.is_failure
    assert term.error.code == "EMAP"
    assert "bad value" in term.error.message
    assert stats["aborts"] == 1


# -- drain ---------------------------------------------------------------------


def test_drain_calls_on_each_then_on_done():
    calls = []
    drain(
        from_values([1, 2]),
        lambda v: calls.append(("each", v)),
        lambda o: calls.append(("done", o.kind)),
    )
    assert calls == [("each", 1), ("each", 2), ("done", "end")]


def test_drain_empty_source():
    calls = []
    drain(from_values([]), lambda v: calls.append(v), lambda o: calls.append(o.kind))
    assert calls == ["end"]


def test_drain_failing_source():
    term = []
    drain(failing_after([]), None, term.append)
    assert len(term) == 1 and term[0].is_failure


def test_drain_survives_long_synchronous_runs():
    n = 50_000
    got, term = collect(from_values(range(n)))
    assert len(got) == n and got[-1] == n - 1
    assert term.is_end


def test_drain_handles_asynchronous_delivery():
    source, pending, pump = manual_source([1, 2, 3])
    got, term = [], []
    drain(source, got.append, term.append)
    assert got == [] and term == []  # nothing delivered yet
    while pending:
        pump()
    assert got == [1, 2, 3]
    assert len(term) == 1 and term[0].is_end


# -- compose -------------------------------------------------------------------


def test_compose_empty_is_identity():
    source = from_values([1])
    assert compose(source, []) is source


def test_compose_order_matches_nested_application():
    add_one = mapping(lambda x: x + 1)
    double = mapping(lambda x: x * 2)
    got, _ = collect(compose(from_values([1, 2, 3]), [add_one, double]))
    assert got == [4, 6, 8]  # (x + 1) * 2


def test_compose_two_maps_equals_fused_map():
    f = lambda x: x + 3
    g = lambda x: x * 7
    values = list(range(10))
    left, _ = collect(compose(from_values(values), [mapping(f), mapping(g)]))
    right, _ = collect(map_values(from_values(values), lambda x: g(f(x))))
    assert left == right


def test_compose_single_map():
    got, term = collect(compose(from_values([2]), [mapping(square)]))
    assert got == [4]
    assert term.is_end


# -- invariants ------------------------------------------------------------------


def test_pull_discipline_deliveries_never_exceed_requests():
    wrapped, stats = instrument(from_values(range(20)))
    pipeline = compose(wrapped, [mapping(square), mapping(str)])
    collect(pipeline)
    assert stats["delivers"] <= stats["requests"]
    assert stats["delivers"] == 21  # 20 values + end


def test_laziness_no_work_before_first_request():
    pulled = []

    def tracked():
        for i in range(3):
            pulled.append(i)
            yield i

    pipeline = compose(from_values(tracked()), [mapping(square), mapping(str)])
    assert pulled == []
    seen = []
    pipeline(False, seen.append)
    assert pulled == [0]
    assert seen[0].value == "0"


def test_abort_propagates_exactly_once_through_pipeline():
    wrapped, stats = instrument(from_values([1, 2, 3]))
    pipeline = compose(wrapped, [mapping(square), mapping(str), mapping(len)])
    seen = []
    pipeline(False, seen.append)  # one value flows
    pipeline(True, seen.append)  # then downstream aborts
    assert stats["aborts"] == 1
    assert seen[-1].is_terminal


def test_terminal_absorption_stops_calling_upstream():
    wrapped, stats = instrument(from_values([5]))
    pipeline = map_values(wrapped, square)
    collect(pipeline)
    requests_at_end = stats["requests"]
    seen = []
    pipeline(False, seen.append)
    pipeline(False, seen.append)
    assert stats["requests"] == requests_at_end  # absorbed downstream
    assert all(o.is_end for o in seen)


@given(st.lists(st.integers(min_value=-(10**6), max_value=10**6)))
def test_property_map_square_preserves_order(values):
    got, term = collect(map_values(from_values(values), square))
    assert got == [v * v for v in values]
    assert term.is_end


@given(
    st.lists(st.integers(min_value=0, max_value=100), max_size=30),
    st.lists(st.booleans(), max_size=40),
)
def test_property_mixed_sync_async_delivery(values, defer_flags):
    """Drain must produce identical output however deliveries are timed."""
    flags = deque(defer_flags)
    inner = from_values(values)
    parked = deque()

    def sometimes_async(abort, deliver):
        if not abort and flags and flags.popleft():
            parked.append(deliver)
            return
        inner(abort, deliver)

    got, term = [], []
    drain(map_values(sometimes_async, square), got.append, term.append)
    while parked:
        inner(False, parked.popleft())
    assert got == [v * v for v in values]
    assert len(term) == 1 and term[0].is_end
