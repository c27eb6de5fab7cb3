"""Tests for the job-function runtime: builtins, external processes, the
sequential worker, and the value->result processor loop.

Expected values are computed by the oracle helpers at the top of this file
(direct iteration / brute force), independently of the implementation.
"""

import subprocess
import sys
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pando import worker
from pando.runtime import LiveRuntime, SimRuntime
from pando.worker import (
    BUILTIN_NAMES,
    EPARSE,
    EWORKER,
    ExecFunction,
    FunctionSpec,
    ProcessorLoop,
    Worker,
    make_function,
    parse_function_spec,
)

# ---------------------------------------------------------------------------
# Oracles: computed here by direct iteration, never by the code under test.
# ---------------------------------------------------------------------------


def oracle_chain(n):
    """Full hailstone trajectory of n down to 1, inclusive."""
    chain = [n]
    while n != 1:
        n = n // 2 if n % 2 == 0 else 3 * n + 1
        chain.append(n)
    return chain


def oracle_steps(n):
    return len(oracle_chain(n)) - 1


def oracle_longest(start, count):
    """Brute force (argmax, steps) over [start, start+count); ties -> smaller n."""
    best_n, best_steps = None, -1
    for n in range(start, start + count):
        s = oracle_steps(n)
        if s > best_steps:  # strict: first (smallest) n wins ties
            best_n, best_steps = n, s
    return best_n, best_steps


KNOWN_BIG = 3179389980591125407167
KNOWN_BIG_STEPS = 2760


class TestOracleSelfChecks:
    def test_chain_of_six_is_the_textbook_one(self):
        assert oracle_chain(6) == [6, 3, 10, 5, 16, 8, 4, 2, 1]
        assert oracle_steps(6) == 8

    def test_one_takes_zero_steps(self):
        assert oracle_steps(1) == 0

    def test_known_long_trajectory(self):
        assert oracle_steps(KNOWN_BIG) == KNOWN_BIG_STEPS

    def test_brute_force_one_to_ten(self):
        assert oracle_longest(1, 10) == (9, 19)
        assert oracle_steps(9) == 19


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def run_apply(fn, x):
    """Drive one apply of a synchronous function; return (error, result)."""
    out = []
    fn.apply(x, lambda err, res: out.append((err, res)))
    assert len(out) == 1, "synchronous apply must call done exactly once"
    return out[0]


def builtin(name, *args, runtime=None):
    rt = runtime if runtime is not None else SimRuntime()
    return make_function(rt, FunctionSpec("builtin", name, list(args)))


# ---------------------------------------------------------------------------
# square
# ---------------------------------------------------------------------------


class TestSquare:
    @pytest.mark.parametrize("x,want", [("0", "0"), ("3", "9"), ("12", "144")])
    def test_examples(self, x, want):
        assert run_apply(builtin("square"), x) == (None, want)

    def test_negative_integers_square_fine(self):
        assert run_apply(builtin("square"), "-4") == (None, "16")

    @pytest.mark.parametrize("bad", ["abc", "3.5", "", "0x10", "1 2"])
    def test_non_integer_input_is_a_parse_error(self, bad):
        err, res = run_apply(builtin("square"), bad)
        assert err == EPARSE and res is None

    def test_bignum_input(self):
        n = 10**40 + 7
        assert run_apply(builtin("square"), str(n)) == (None, str(n * n))

    def test_repeat_applies_are_identical(self):
        fn = builtin("square")
        assert run_apply(fn, "7") == run_apply(fn, "7") == (None, "49")


# ---------------------------------------------------------------------------
# sleep-square
# ---------------------------------------------------------------------------


class TestSleepSquare:
    def test_result_arrives_after_the_delay(self):
        rt = SimRuntime()
        fn = builtin("sleep-square", runtime=rt)
        out = []
        fn.apply("2", lambda err, res: out.append((rt.now(), err, res)))
        assert out == []  # not synchronous
        rt.run()
        assert out == [(1.0, None, "4")]

    def test_configurable_delay(self):
        rt = SimRuntime()
        fn = builtin("sleep-square", "2.5", runtime=rt)
        out = []
        fn.apply("3", lambda err, res: out.append(rt.now()))
        rt.run()
        assert out == [2.5]

    def test_zero_delay_behaves_like_square(self):
        rt = SimRuntime()
        fn = builtin("sleep-square", "0", runtime=rt)
        out = []
        fn.apply("5", lambda err, res: out.append((err, res)))
        rt.run()
        assert out == [(None, "25")]
        assert rt.now() == 0.0

    def test_parse_error_is_immediate(self):
        rt = SimRuntime()
        fn = builtin("sleep-square", runtime=rt)
        assert run_apply(fn, "zzz") == (EPARSE, None)

    def test_batch_of_ten_on_one_worker_is_serial(self):
        # One worker, ten one-second jobs: total virtual time >= 10 s.
        rt = SimRuntime()
        w = Worker(rt, builtin("sleep-square", runtime=rt))
        done = []
        for i in range(10):
            w.submit(i, str(i), lambda tag, err, res: done.append((tag, res)))
        rt.run()
        assert rt.now() >= 10.0
        assert done == [(i, str(i * i)) for i in range(10)]


# ---------------------------------------------------------------------------
# collatz-steps
# ---------------------------------------------------------------------------


class TestCollatzSteps:
    def test_one_never_enters_the_loop(self):
        assert run_apply(builtin("collatz-steps"), "1") == (None, "0")

    def test_six(self):
        assert run_apply(builtin("collatz-steps"), "6") == (None, str(oracle_steps(6)))
        assert run_apply(builtin("collatz-steps"), "6") == (None, "8")

    def test_known_long_trajectory_bignum(self):
        err, res = run_apply(builtin("collatz-steps"), str(KNOWN_BIG))
        assert err is None
        assert res == str(KNOWN_BIG_STEPS)

    @pytest.mark.parametrize("bad", ["0", "-5", "x", "", "2.0"])
    def test_rejects_nonpositive_and_non_integers(self, bad):
        assert run_apply(builtin("collatz-steps"), bad) == (EPARSE, None)

    def test_exhaustive_agreement_up_to_ten_thousand(self):
        for n in range(1, 10_001):
            assert worker.collatz_steps(n) == oracle_steps(n), n


# ---------------------------------------------------------------------------
# collatz-range
# ---------------------------------------------------------------------------


class TestCollatzRange:
    def test_singleton_range(self):
        assert run_apply(builtin("collatz-range"), "1:1") == (None, "1:0")

    def test_one_to_ten(self):
        want_n, want_s = oracle_longest(1, 10)
        assert (want_n, want_s) == (9, 19)
        assert run_apply(builtin("collatz-range"), "1:10") == (None, "9:19")

    def test_tie_broken_by_smaller_number(self):
        # 12 and 13 both take 9 steps; the smaller one must win.
        assert oracle_steps(12) == oracle_steps(13) == 9
        assert run_apply(builtin("collatz-range"), "12:2") == (None, "12:9")

    @settings(deadline=None, max_examples=60)
    @given(start=st.integers(1, 400), count=st.integers(1, 50))
    def test_matches_brute_force(self, start, count):
        want_n, want_s = oracle_longest(start, count)
        err, res = run_apply(builtin("collatz-range"), f"{start}:{count}")
        assert err is None
        assert res == f"{want_n}:{want_s}"

    def test_known_window_contains_the_long_trajectory(self):
        err, res = run_apply(builtin("collatz-range"), f"{KNOWN_BIG}:175")
        assert err is None
        argmax, steps = res.split(":")
        assert int(steps) >= KNOWN_BIG_STEPS
        if int(argmax) == KNOWN_BIG:
            assert int(steps) == KNOWN_BIG_STEPS

    @pytest.mark.parametrize(
        "bad", ["5", "a:b", "1:0", "0:5", "-3:4", ":", "1:", ":1", "1:2:3"]
    )
    def test_malformed_specs(self, bad):
        assert run_apply(builtin("collatz-range"), bad) == (EPARSE, None)


# ---------------------------------------------------------------------------
# identity
# ---------------------------------------------------------------------------


class TestIdentity:
    @pytest.mark.parametrize("x", ["hello", "", "  spaced  ", "héllo ✓", "123"])
    def test_returns_input_unchanged(self, x):
        assert run_apply(builtin("identity"), x) == (None, x)


# ---------------------------------------------------------------------------
# specs and the registry
# ---------------------------------------------------------------------------


class TestFunctionSpecs:
    def test_registry_is_exactly_the_five_builtins(self):
        assert set(BUILTIN_NAMES) == {
            "square",
            "sleep-square",
            "collatz-steps",
            "collatz-range",
            "identity",
        }

    def test_parse_plain_builtin(self):
        spec = parse_function_spec("square")
        assert (spec.kind, spec.name, spec.args) == ("builtin", "square", [])

    def test_parse_builtin_with_args(self):
        spec = parse_function_spec("sleep-square 0.25")
        assert (spec.kind, spec.name, spec.args) == ("builtin", "sleep-square", ["0.25"])

    def test_parse_exec(self):
        spec = parse_function_spec("exec:/usr/bin/tool --flag x")
        assert (spec.kind, spec.name, spec.args) == (
            "exec",
            "/usr/bin/tool",
            ["--flag", "x"],
        )

    @pytest.mark.parametrize("bad", ["", "   ", "exec:"])
    def test_parse_rejects_empty(self, bad):
        with pytest.raises(ValueError):
            parse_function_spec(bad)

    def test_unknown_builtin_rejected(self):
        with pytest.raises(ValueError):
            FunctionSpec("builtin", "frobnicate")

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            FunctionSpec("magic", "square")

    def test_bad_delay_rejected_at_build_time(self):
        with pytest.raises(ValueError):
            make_function(SimRuntime(), FunctionSpec("builtin", "sleep-square", ["nope"]))
        with pytest.raises(ValueError):
            make_function(SimRuntime(), FunctionSpec("builtin", "sleep-square", ["-1"]))


# ---------------------------------------------------------------------------
# the sequential worker
# ---------------------------------------------------------------------------


class TestWorker:
    def test_large_synchronous_batch_stays_ordered(self):
        rt = SimRuntime()
        w = Worker(rt, builtin("square"))
        done = []
        for i in range(5000):  # deep enough to catch unbounded recursion
            w.submit(i, str(i), lambda tag, err, res: done.append((tag, res)))
        rt.run()
        assert done == [(i, str(i * i)) for i in range(5000)]

    def test_async_results_arrive_in_submission_order(self):
        rt = SimRuntime()
        w = Worker(rt, builtin("sleep-square", "0.1", runtime=rt))
        done = []
        for i in (3, 1, 2):
            w.submit(i, str(i), lambda tag, err, res: done.append(tag))
        rt.run()
        assert done == [3, 1, 2]

    def test_one_apply_at_a_time(self):
        rt = SimRuntime()

        class Probe:
            def __init__(self):
                self.active = 0
                self.peak = 0

            def apply(self, x, done):
                self.active += 1
                self.peak = max(self.peak, self.active)

                def finish():
                    self.active -= 1
                    done(None, x)

                rt.call_later(1.0, finish)

        probe = Probe()
        w = Worker(rt, probe)
        for i in range(5):
            w.submit(i, "v", lambda tag, err, res: None)
        rt.run()
        assert probe.peak == 1

    def test_double_done_is_an_assertion_failure(self):
        rt = SimRuntime()

        class Bad:
            def apply(self, x, done):
                done(None, x)
                done(None, x)

        w = Worker(rt, Bad())
        with pytest.raises(AssertionError):
            w.submit(0, "v", lambda tag, err, res: None)

    def test_error_and_result_are_mutually_exclusive(self):
        rt = SimRuntime()

        class Bad:
            def apply(self, x, done):
                done("E1", "also-a-result")

        w = Worker(rt, Bad())
        with pytest.raises(AssertionError):
            w.submit(0, "v", lambda tag, err, res: None)

    def test_stop_drops_queued_work(self):
        rt = SimRuntime()
        w = Worker(rt, builtin("sleep-square", runtime=rt))
        done = []
        for i in range(3):
            w.submit(i, str(i), lambda tag, err, res: done.append(tag))
        w.stop()
        rt.run()
        assert done == []

    def test_resubmit_from_done_callback(self):
        rt = SimRuntime()
        w = Worker(rt, builtin("square"))
        done = []

        def on_done(tag, err, res):
            done.append((tag, res))
            if tag < 3:
                w.submit(tag + 1, str(tag + 1), on_done)

        w.submit(0, "0", on_done)
        rt.run()
        assert done == [(0, "0"), (1, "1"), (2, "4"), (3, "9")]


# ---------------------------------------------------------------------------
# processor loop: VALUE in -> RESULT out
# ---------------------------------------------------------------------------


class TestProcessorLoop:
    def test_value_to_ok_result(self):
        rt = SimRuntime()
        sent = []
        loop = ProcessorLoop(rt, builtin("square"), lambda *a: sent.append(a))
        loop.handle_value(5, "3")
        rt.run()
        assert sent == [(5, True, "9")]

    def test_function_error_to_not_ok_result(self):
        rt = SimRuntime()
        sent = []
        loop = ProcessorLoop(rt, builtin("square"), lambda *a: sent.append(a))
        loop.handle_value(5, "junk")
        rt.run()
        assert sent == [(5, False, EPARSE)]

    def test_results_keep_arrival_order(self):
        rt = SimRuntime()
        sent = []
        loop = ProcessorLoop(
            rt, builtin("sleep-square", "0.5", runtime=rt), lambda *a: sent.append(a)
        )
        for seq, x in [(9, "2"), (4, "3"), (7, "4")]:
            loop.handle_value(seq, x)
        rt.run()
        assert sent == [(9, True, "4"), (4, True, "9"), (7, True, "16")]

    def test_stop_silences_the_loop(self):
        rt = SimRuntime()
        sent = []
        loop = ProcessorLoop(
            rt, builtin("sleep-square", runtime=rt), lambda *a: sent.append(a)
        )
        loop.handle_value(1, "2")
        loop.handle_value(2, "3")
        loop.stop()
        rt.run()
        assert sent == []


# ---------------------------------------------------------------------------
# external process functions
# ---------------------------------------------------------------------------

ECHO_CHILD = """\
import sys
while True:
    line = sys.stdin.readline()
    if not line:
        break
    sys.stdout.write("OK " + line.rstrip("\\n") + "\\n")
    sys.stdout.flush()
"""

ERR_CHILD = """\
import sys
while True:
    line = sys.stdin.readline()
    if not line:
        break
    sys.stdout.write("ERR E1 boom\\n")
    sys.stdout.flush()
"""

DIE_ON_COMMAND_CHILD = """\
import os, sys
while True:
    line = sys.stdin.readline()
    if not line:
        break
    if line.strip() == "die":
        os._exit(1)
    sys.stdout.write("OK " + line.rstrip("\\n") + "\\n")
    sys.stdout.flush()
"""

BABBLER_CHILD = """\
import sys
while True:
    line = sys.stdin.readline()
    if not line:
        break
    sys.stdout.write("OK " + line.rstrip("\\n") + "\\n")
    sys.stdout.write("this line was never asked for\\n")
    sys.stdout.flush()
"""


def child_script(tmp_path, source, name="child.py"):
    path = tmp_path / name
    path.write_text(source)
    return [sys.executable, "-u", str(path)]


def live_apply(rt, fn, x, timeout=5.0):
    box = []
    ready = threading.Event()

    def done(err, res):
        box.append((err, res))
        ready.set()

    rt.post(fn.apply, x, done)
    assert ready.wait(timeout), "apply never completed"
    return box[0]


@pytest.fixture
def live_rt():
    rt = LiveRuntime(seed=0)
    rt.start_in_thread()
    yield rt
    rt.stop()


class TestExecFunction:
    def test_rejected_under_a_simulated_clock(self, tmp_path):
        argv = child_script(tmp_path, ECHO_CHILD)
        with pytest.raises(TypeError):
            ExecFunction(SimRuntime(), argv)

    def test_missing_executable_rejected(self, live_rt):
        with pytest.raises(FileNotFoundError):
            ExecFunction(live_rt, ["/no/such/binary"])

    def test_echo_child_is_identity(self, live_rt, tmp_path):
        fn = ExecFunction(live_rt, child_script(tmp_path, ECHO_CHILD))
        try:
            assert live_apply(live_rt, fn, "hello") == (None, "hello")
            assert live_apply(live_rt, fn, "") == (None, "")
            assert live_apply(live_rt, fn, "a b  c") == (None, "a b  c")
        finally:
            fn.close()

    def test_err_reply_surfaces_the_code(self, live_rt, tmp_path):
        fn = ExecFunction(live_rt, child_script(tmp_path, ERR_CHILD))
        try:
            assert live_apply(live_rt, fn, "anything") == ("E1", None)
        finally:
            fn.close()

    def test_crash_fails_outstanding_and_restarts(self, live_rt, tmp_path):
        argv = child_script(tmp_path, DIE_ON_COMMAND_CHILD)
        fn = ExecFunction(live_rt, argv, restart_backoff=0.05)
        try:
            assert live_apply(live_rt, fn, "one") == (None, "one")
            assert live_apply(live_rt, fn, "die") == (EWORKER, None)
            # After the backoff a fresh child serves new work.
            assert live_apply(live_rt, fn, "two") == (None, "two")
            assert fn.restarts == 1
        finally:
            fn.close()

    def test_queued_work_during_downtime_is_served_after_restart(
        self, live_rt, tmp_path
    ):
        argv = child_script(tmp_path, DIE_ON_COMMAND_CHILD)
        fn = ExecFunction(live_rt, argv, restart_backoff=0.05)
        try:
            assert live_apply(live_rt, fn, "die") == (EWORKER, None)
            # Submitted while the child is down; must complete post-restart.
            assert live_apply(live_rt, fn, "later") == (None, "later")
        finally:
            fn.close()

    def test_protocol_violation_triggers_restart(self, live_rt, tmp_path):
        argv = child_script(tmp_path, BABBLER_CHILD)
        fn = ExecFunction(live_rt, argv, restart_backoff=0.05)
        try:
            # First reply is matched; the unsolicited extra line kills the child.
            assert live_apply(live_rt, fn, "x") == (None, "x")
            deadline = time.monotonic() + 5.0
            while fn.restarts < 1 and time.monotonic() < deadline:
                time.sleep(0.01)
            assert fn.restarts >= 1
            assert live_apply(live_rt, fn, "y") == (None, "y")
        finally:
            fn.close()

    def test_close_terminates_the_child(self, live_rt, tmp_path):
        fn = ExecFunction(live_rt, child_script(tmp_path, ECHO_CHILD))
        proc = fn._proc
        assert proc is not None and proc.poll() is None
        fn.close()
        assert proc.wait(timeout=5.0) is not None

    def test_backoff_doubles_up_to_the_cap(self, live_rt, tmp_path):
        # A child that dies instantly forces back-to-back restarts; each
        # failed round doubles the delay until it sticks at the cap.
        argv = child_script(tmp_path, "import os\nos._exit(1)\n")
        fn = ExecFunction(live_rt, argv, restart_backoff=0.05, backoff_cap=0.2)
        try:
            deadline = time.monotonic() + 5.0
            while fn.restarts < 3 and time.monotonic() < deadline:
                time.sleep(0.01)
            assert fn.restarts >= 3
            assert fn._backoff == 0.2  # 0.05 -> 0.1 -> 0.2, then capped
        finally:
            fn.close()

    def test_backoff_resets_after_a_successful_reply(self, live_rt, tmp_path):
        argv = child_script(tmp_path, DIE_ON_COMMAND_CHILD)
        fn = ExecFunction(live_rt, argv, restart_backoff=0.05, backoff_cap=0.2)
        try:
            assert live_apply(live_rt, fn, "die") == (EWORKER, None)
            assert fn._backoff > 0.05  # crash doubled it
            assert live_apply(live_rt, fn, "ok") == (None, "ok")
            assert fn._backoff == 0.05
        finally:
            fn.close()

    def test_through_worker_crash_then_next_value(self, live_rt, tmp_path):
        # The worker keeps feeding after an EWORKER failure.
        argv = child_script(tmp_path, DIE_ON_COMMAND_CHILD)
        fn = ExecFunction(live_rt, argv, restart_backoff=0.05)
        w = Worker(live_rt, fn)
        results = []
        ready = threading.Event()

        def on_done(tag, err, res):
            results.append((tag, err, res))
            if len(results) == 3:
                ready.set()

        try:
            for tag, x in [(1, "a"), (2, "die"), (3, "b")]:
                live_rt.post(w.submit, tag, x, on_done)
            assert ready.wait(10.0)
            assert results == [(1, None, "a"), (2, EWORKER, None), (3, None, "b")]
        finally:
            fn.close()


class TestMakeFunctionExec:
    def test_exec_spec_builds_an_exec_function(self, live_rt, tmp_path):
        path = tmp_path / "child.py"
        path.write_text(ECHO_CHILD)
        spec = FunctionSpec("exec", sys.executable, ["-u", str(path)])
        fn = make_function(live_rt, spec)
        try:
            assert isinstance(fn, ExecFunction)
            assert live_apply(live_rt, fn, "ping") == (None, "ping")
        finally:
            fn.close()
