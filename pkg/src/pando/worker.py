"""Job execution on a processor node.

A job function consumes one input line and produces exactly one reply:
``done(None, result)`` on success or ``done(code, None)`` on error.  Payloads
are opaque strings — one line each — so structured data is entirely the
function's concern.

Three layers live here:

* the built-in functions (``square``, ``sleep-square``, ``collatz-steps``,
  ``collatz-range``, ``identity``) plus :class:`ExecFunction`, which drives a
  long-lived external process over a line protocol;
* :class:`Worker`, which feeds a function strictly one apply at a time (a
  node contributes one core, so applies are sequential);
* :class:`ProcessorLoop`, which turns incoming ``(seq, payload)`` values into
  outgoing ``(seq, ok, payload)`` results.
"""

from __future__ import annotations

import shlex
import subprocess
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

from .runtime import Runtime, SimRuntime, Timer

__all__ = [
    "BUILTIN_NAMES",
    "EPARSE",
    "EWORKER",
    "ExecFunction",
    "FunctionSpec",
    "JobError",
    "JobFunction",
    "ProcessorLoop",
    "Worker",
    "collatz_range",
    "collatz_steps",
    "format_function_spec",
    "make_function",
    "parse_function_spec",
]

# done(error_code | None, result | None); exactly one of the two is None.
Done = Callable[[Optional[str], Optional[str]], None]

EPARSE = "EPARSE"  # input line is not a well-formed job input
EWORKER = "EWORKER"  # the executing process died before replying

BUILTIN_NAMES = ("square", "sleep-square", "collatz-steps", "collatz-range", "identity")


class JobError(Exception):
    """Raised by compute helpers; ``code`` becomes the error payload."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


class JobFunction:
    """Interface: ``apply`` must call ``done`` exactly once, later or now."""

    def apply(self, x: str, done: Done) -> None:
        raise NotImplementedError

    def close(self) -> None:
        """Release external resources (child processes, timers)."""


# ---------------------------------------------------------------------------
# Pure compute helpers
# ---------------------------------------------------------------------------


def _parse_int(text: str) -> int:
    try:
        return int(text, 10)
    except (TypeError, ValueError):
        raise JobError(EPARSE, f"not a decimal integer: {text!r}") from None


def collatz_steps(n: int) -> int:
    """Iterations of n -> n/2 (even) / 3n+1 (odd) until n reaches 1."""
    if n < 1:
        raise JobError(EPARSE, "need n >= 1")
    steps = 0
    while n != 1:
        n = 3 * n + 1 if n & 1 else n >> 1
        steps += 1
    return steps


def collatz_range(start: int, count: int) -> Tuple[int, int]:
    """(argmax, steps) over [start, start+count); ties go to the smaller n."""
    if start < 1:
        raise JobError(EPARSE, "range must start at 1 or above")
    if count < 1:
        raise JobError(EPARSE, "range needs at least one number")
    best_n = start
    best_steps = collatz_steps(start)
    for n in range(start + 1, start + count):
        s = collatz_steps(n)
        if s > best_steps:
            best_n, best_steps = n, s
    return best_n, best_steps


def _compute_square(x: str) -> str:
    n = _parse_int(x)
    return str(n * n)


def _compute_steps(x: str) -> str:
    return str(collatz_steps(_parse_int(x)))


def _compute_range(x: str) -> str:
    head, sep, tail = x.partition(":")
    if not sep:
        raise JobError(EPARSE, "expected start:count")
    n, steps = collatz_range(_parse_int(head), _parse_int(tail))
    return f"{n}:{steps}"


def _compute_identity(x: str) -> str:
    return x


class SyncFunction(JobFunction):
    """Wraps a pure string->string computation; errors via JobError."""

    def __init__(self, compute: Callable[[str], str]):
        self._compute = compute

    def apply(self, x: str, done: Done) -> None:
        try:
            result = self._compute(x)
        except JobError as e:
            done(e.code, None)
        else:
            done(None, result)


class SleepSquareFunction(JobFunction):
    """Square, delivered after a fixed delay on the runtime clock.

    Models a job whose computation time dominates its transfer time without
    burning CPU, so many simulated workers can share one machine.
    """

    def __init__(self, runtime: Runtime, delay: float = 1.0):
        if delay < 0:
            raise ValueError("delay must be >= 0")
        self._runtime = runtime
        self._delay = delay

    def apply(self, x: str, done: Done) -> None:
        try:
            result = _compute_square(x)
        except JobError as e:
            done(e.code, None)
            return
        self._runtime.call_later(self._delay, done, None, result)


# ---------------------------------------------------------------------------
# Function specs
# ---------------------------------------------------------------------------


@dataclass
class FunctionSpec:
    """What to run: a named builtin or an external executable."""

    kind: str  # "builtin" | "exec"
    name: str  # builtin name, or the executable path
    args: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in ("builtin", "exec"):
            raise ValueError(f"unknown function kind {self.kind!r}")
        if self.kind == "builtin" and self.name not in BUILTIN_NAMES:
            raise ValueError(
                f"unknown builtin {self.name!r}; choose from {', '.join(BUILTIN_NAMES)}"
            )
        if not self.name:
            raise ValueError("function name/path must be non-empty")


def parse_function_spec(text: str) -> FunctionSpec:
    """Parse a CLI-style spec: ``square``, ``sleep-square 0.25``,
    or ``exec:./tool --flag`` (shell-style quoting)."""
    parts = shlex.split(text)
    if not parts:
        raise ValueError("empty function spec")
    head, args = parts[0], parts[1:]
    if head.startswith("exec:"):
        path = head[len("exec:"):]
        if not path:
            raise ValueError("exec spec needs a path: exec:<path> [args...]")
        return FunctionSpec("exec", path, args)
    return FunctionSpec("builtin", head, args)


def format_function_spec(spec: FunctionSpec) -> str:
    """Inverse of :func:`parse_function_spec` — the portable one-line form
    that join answers carry so volunteers learn what to run."""
    head = spec.name if spec.kind == "builtin" else f"exec:{spec.name}"
    return shlex.join([head, *spec.args])


def make_function(runtime: Runtime, spec: FunctionSpec) -> JobFunction:
    """Instantiate the function a processor will run."""
    if spec.kind == "exec":
        return ExecFunction(runtime, [spec.name, *spec.args])
    if spec.name == "square":
        return SyncFunction(_compute_square)
    if spec.name == "collatz-steps":
        return SyncFunction(_compute_steps)
    if spec.name == "collatz-range":
        return SyncFunction(_compute_range)
    if spec.name == "identity":
        return SyncFunction(_compute_identity)
    if spec.name == "sleep-square":
        if len(spec.args) > 1:
            raise ValueError("sleep-square takes at most one argument (the delay)")
        if spec.args:
            try:
                delay = float(spec.args[0])
            except ValueError:
                raise ValueError(f"bad delay {spec.args[0]!r}") from None
        else:
            delay = 1.0
        return SleepSquareFunction(runtime, delay)
    raise ValueError(f"unknown builtin {spec.name!r}")  # unreachable after validation


# ---------------------------------------------------------------------------
# External process functions
# ---------------------------------------------------------------------------


class ExecFunction(JobFunction):
    """Drives one long-lived child process.

    Protocol: one input line on the child's stdin per apply; one reply line on
    its stdout per input, ``OK <result>`` or ``ERR <code> <message>``, matched
    to requests in order.  If the child exits, crashes, or breaks protocol,
    every outstanding apply fails with ``EWORKER`` (the senders re-lend those
    values elsewhere) and a replacement child is started after a backoff that
    doubles up to a cap.  Applies arriving while no child is running are
    queued and submitted once the replacement is up.

    Needs a live runtime: a real child cannot run on a simulated clock.
    """

    def __init__(
        self,
        runtime: Runtime,
        argv: List[str],
        *,
        restart_backoff: float = 0.5,
        backoff_cap: float = 10.0,
    ):
        if isinstance(runtime, SimRuntime):
            raise TypeError("external process functions need a live runtime")
        if not argv:
            raise ValueError("empty argv")
        self._runtime = runtime
        self._argv = list(argv)
        self._base_backoff = restart_backoff
        self._backoff_cap = backoff_cap
        self._backoff = restart_backoff
        self._proc: Optional[subprocess.Popen] = None
        self._gen = 0  # orphans stale reader threads after a restart
        self._in_flight: deque = deque()  # done callbacks awaiting replies
        self._waiting: deque = deque()  # (x, done) queued while the child is down
        self._restart_timer: Optional[Timer] = None
        self._closed = False
        self.restarts = 0
        self._spawn()  # propagate FileNotFoundError: the path must exist up front

    # -- child lifecycle ----------------------------------------------------

    def _spawn(self) -> None:
        self._gen += 1
        self._proc = subprocess.Popen(
            self._argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
        )
        threading.Thread(
            target=self._read_loop,
            args=(self._gen, self._proc),
            name="pando-exec-reader",
            daemon=True,
        ).start()
        while self._waiting and self._proc is not None:
            x, done = self._waiting.popleft()
            self._submit(x, done)

    def _read_loop(self, gen: int, proc: subprocess.Popen) -> None:
        # Dedicated reader; everything is handed back to the dispatcher.
        for line in proc.stdout:
            self._runtime.post(self._on_reply, gen, line.rstrip("\n"))
        self._runtime.post(self._on_exit, gen)

    def _crashed(self) -> None:
        proc, self._proc = self._proc, None
        self._gen += 1
        if proc is not None:
            try:
                proc.kill()
                proc.wait(timeout=1.0)
            except OSError:
                pass
        failed = list(self._in_flight) + [done for _, done in self._waiting]
        self._in_flight.clear()
        self._waiting.clear()
        for done in failed:
            done(EWORKER, None)
        if self._closed:
            return
        delay = self._backoff
        self._backoff = min(self._backoff * 2, self._backoff_cap)
        self._restart_timer = self._runtime.call_later(delay, self._restart)

    def _restart(self) -> None:
        if self._closed:
            return
        self.restarts += 1
        try:
            self._spawn()
        except OSError:
            # Executable vanished or fork failed; retry on the same schedule.
            self._proc = None
            delay = self._backoff
            self._backoff = min(self._backoff * 2, self._backoff_cap)
            self._restart_timer = self._runtime.call_later(delay, self._restart)

    # -- apply path ----------------------------------------------------------

    def apply(self, x: str, done: Done) -> None:
        if self._closed:
            done(EWORKER, None)
            return
        if self._proc is None:
            self._waiting.append((x, done))
            return
        self._submit(x, done)

    def _submit(self, x: str, done: Done) -> None:
        self._in_flight.append(done)
        try:
            self._proc.stdin.write(x + "\n")
            self._proc.stdin.flush()
        except (OSError, ValueError):
            self._crashed()  # fails this apply (and any siblings) with EWORKER

    def _on_reply(self, gen: int, line: str) -> None:
        if gen != self._gen or self._closed:
            return
        if not self._in_flight:
            self._crashed()  # unsolicited output: the child broke protocol
            return
        if line == "OK" or line.startswith("OK "):
            done = self._in_flight.popleft()
            self._backoff = self._base_backoff  # healthy again
            done(None, line[3:] if len(line) > 2 else "")
        elif line.startswith("ERR "):
            done = self._in_flight.popleft()
            code = line[4:].split(" ", 1)[0]
            self._backoff = self._base_backoff
            done(code or EWORKER, None)
        else:
            self._crashed()  # garbage reply: restart rather than guess

    def _on_exit(self, gen: int) -> None:
        if gen != self._gen or self._closed:
            return
        self._crashed()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self._restart_timer is not None:
            self._restart_timer.cancel()
            self._restart_timer = None
        self._crashed()


# ---------------------------------------------------------------------------
# The sequential worker and the processor loop
# ---------------------------------------------------------------------------


class Worker:
    """Feeds a JobFunction strictly one apply at a time.

    Submissions queue in FIFO order; the next apply starts only once the
    previous one has called done.  The done callback is guarded: calling it
    twice, or with both an error and a result, is a bug and trips an
    assertion.
    """

    def __init__(self, runtime: Runtime, fn: JobFunction):
        self._runtime = runtime
        self._fn = fn
        self._queue: deque = deque()  # (tag, payload, on_done)
        self._busy = False
        self._pumping = False
        self._stopped = False

    @property
    def busy(self) -> bool:
        return self._busy

    @property
    def queued(self) -> int:
        return len(self._queue)

    def submit(self, tag, payload: str, on_done: Callable) -> None:
        """Run ``fn(payload)`` after all earlier submissions; then
        ``on_done(tag, error, result)``."""
        if self._stopped:
            return
        self._queue.append((tag, payload, on_done))
        self._pump()

    def stop(self) -> None:
        """Drop queued work and silence any in-flight completion."""
        self._stopped = True
        self._queue.clear()

    def _pump(self) -> None:
        if self._pumping:
            return
        self._pumping = True
        try:
            while not self._busy and self._queue and not self._stopped:
                tag, payload, on_done = self._queue.popleft()
                self._busy = True
                self._fn.apply(payload, self._guarded_done(tag, on_done))
        finally:
            self._pumping = False

    def _guarded_done(self, tag, on_done: Callable) -> Done:
        fired = False

        def done(error: Optional[str], result: Optional[str] = None) -> None:
            nonlocal fired
            assert not fired, "apply called done twice"
            assert (error is None) != (result is None), (
                "exactly one of error/result must be set"
            )
            fired = True
            self._busy = False
            if not self._stopped:
                on_done(tag, error, result)
            if not self._pumping:
                self._pump()

        return done


class ProcessorLoop:
    """Turns incoming values into results: for each ``(seq, payload)`` the
    function is applied and ``send_result(seq, ok, payload)`` is called with
    the result (ok) or the error code (not ok)."""

    def __init__(
        self,
        runtime: Runtime,
        fn: JobFunction,
        send_result: Callable[[int, bool, str], None],
    ):
        self._worker = Worker(runtime, fn)
        self._send = send_result
        self._stopped = False

    @property
    def busy(self) -> bool:
        return self._worker.busy

    @property
    def queued(self) -> int:
        return self._worker.queued

    def handle_value(self, seq: int, payload: str) -> None:
        self._worker.submit(seq, payload, self._finished)

    def _finished(self, seq: int, error: Optional[str], result: Optional[str]) -> None:
        if self._stopped:
            return
        if error is None:
            self._send(seq, True, result)
        else:
            self._send(seq, False, error)

    def stop(self) -> None:
        self._stopped = True
        self._worker.stop()
