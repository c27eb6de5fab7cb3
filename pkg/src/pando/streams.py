"""Demand-driven (pull) streams: the contract every layer composes with.

A source is a plain callable ``source(abort, deliver)``:

* ``source(False, deliver)`` asks for the next outcome.  The source answers
  by calling ``deliver`` exactly once — synchronously inside the request or
  later from another event — with a :class:`Outcome` that is either a value,
  the end of the stream, or a failure.
* ``source(True, deliver)`` tells the source to release its resources; it
  answers with a terminal outcome (normally end).

Only one request may be outstanding at a time: callers wait for ``deliver``
before asking again.  After a source has delivered end or failure it must
never deliver a value again; the combinators here additionally stop calling
upstream once they have seen a terminal outcome.

Everything else in this package — the lending ledger, per-child sub-streams,
credit gates, the network pumps — speaks this contract, so consumers are
written to tolerate both synchronous and asynchronous delivery.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Iterable, Optional, Sequence

__all__ = [
    "Outcome",
    "StreamError",
    "DemandSource",
    "Transform",
    "from_values",
    "map_values",
    "mapping",
    "drain",
    "compose",
]


@dataclass(frozen=True)
class StreamError:
    """Structured error carried by a failure outcome.

    ``code`` is a short machine-readable tag (e.g. ``"EWORKER"``); codes are
    defined by the module that raises them.  ``message`` is for humans.
    """

    code: str
    message: str

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return f"{self.code}: {self.message}"


class Outcome:
    """One answer from a source: a value, the end, or a failure."""

    VALUE = "value"
    END = "end"
    FAILURE = "failure"

    __slots__ = ("kind", "value", "error")

    def __init__(self, kind: str, value: Any = None, error: Optional[StreamError] = None):
        self.kind = kind
        self.value = value
        self.error = error

    # -- constructors -----------------------------------------------------

    @staticmethod
    def ok(value: Any) -> "Outcome":
        return Outcome(Outcome.VALUE, value)

    @staticmethod
    def end() -> "Outcome":
        return _END

    @staticmethod
    def fail(code: str, message: str) -> "Outcome":
        return Outcome(Outcome.FAILURE, error=StreamError(code, message))

    @staticmethod
    def failure(error: StreamError) -> "Outcome":
        return Outcome(Outcome.FAILURE, error=error)

    # -- predicates --------------------------------------------------------

    @property
    def is_value(self) -> bool:
        return self.kind == Outcome.VALUE

    @property
    def is_end(self) -> bool:
        return self.kind == Outcome.END

    @property
    def is_failure(self) -> bool:
        return self.kind == Outcome.FAILURE

    @property
    def is_terminal(self) -> bool:
        return self.kind != Outcome.VALUE

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        if self.kind == Outcome.VALUE:
            return f"Outcome.ok({self.value!r})"
        if self.kind == Outcome.END:
            return "Outcome.end()"
        return f"Outcome.failure({self.error!r})"


_END = Outcome(Outcome.END)

# A source is request(abort, deliver); a transform wraps one source in another.
Deliver = Callable[[Outcome], None]
DemandSource = Callable[[bool, Deliver], Any]
Transform = Callable[[DemandSource], DemandSource]


def from_values(values: Iterable[Any]) -> DemandSource:
    """Source that delivers `values` in order, then end forever.

    Iteration starts on the first request, so wrapping a generator performs
    no work until something downstream actually asks.
    """
    state: dict = {"it": None, "terminal": None}

    def source(abort: bool, deliver: Deliver) -> None:
        terminal = state["terminal"]
        if terminal is not None:
            deliver(terminal)
            return
        if abort:
            state["terminal"] = state["it"] = _END
            deliver(_END)
            return
        it = state["it"]
        if it is None or it is _END:
            it = state["it"] = iter(values)
        try:
            v = next(it)
        except StopIteration:
            state["terminal"] = _END
            deliver(_END)
            return
        deliver(Outcome.ok(v))

    return source


def map_values(source: DemandSource, fn: Callable[[Any], Any]) -> DemandSource:
    """Apply `fn` to each value, preserving order; end/failure pass through.

    If `fn` raises, the upstream source is aborted (releasing its resources)
    and a failure with code ``EMAP`` is delivered downstream.
    """
    state: dict = {"terminal": None}

    def mapped(abort: bool, deliver: Deliver) -> None:
        terminal = state["terminal"]
        if terminal is not None:
            deliver(terminal)
            return

        if abort:
            def on_aborted(outcome: Outcome) -> None:
                final = outcome if outcome.is_terminal else _END
                state["terminal"] = final
                deliver(final)

            source(True, on_aborted)
            return

        def relay(outcome: Outcome) -> None:
            if outcome.is_value:
                try:
                    result = fn(outcome.value)
                except Exception as exc:
                    failure = Outcome.fail("EMAP", f"{type(exc).__name__}: {exc}")
                    state["terminal"] = failure
                    source(True, lambda _o: None)
                    deliver(failure)
                    return
                deliver(Outcome.ok(result))
            else:
                state["terminal"] = outcome
                deliver(outcome)

        source(False, relay)

    return mapped


def mapping(fn: Callable[[Any], Any]) -> Transform:
    """`map_values` curried into a transform, for use with `compose`."""
    return lambda source: map_values(source, fn)


def drain(
    source: DemandSource,
    on_each: Optional[Callable[[Any], None]] = None,
    on_done: Optional[Callable[[Outcome], None]] = None,
) -> None:
    """Request until end/failure: on_each per value, then on_done(terminal).

    Works for synchronous and asynchronous sources alike, and tolerates
    arbitrarily long synchronous runs without growing the call stack: a
    delivery that arrives inside our own request flags the loop to continue
    instead of recursing.
    """
    state = {"looping": False, "more": False, "finished": False}

    def deliver(outcome: Outcome) -> None:
        if state["finished"]:
            return
        if outcome.is_value:
            if on_each is not None:
                on_each(outcome.value)
            if state["looping"]:
                state["more"] = True
            else:
                loop()
        else:
            state["finished"] = True
            if on_done is not None:
                on_done(outcome)

    def loop() -> None:
        state["looping"] = True
        state["more"] = True
        while state["more"] and not state["finished"]:
            state["more"] = False
            source(False, deliver)
        state["looping"] = False

    loop()


def compose(source: DemandSource, transforms: Sequence[Transform]) -> DemandSource:
    """Apply `transforms` to `source` in order: the last wraps outermost."""
    for t in transforms:
        source = t(source)
    return source
