from __future__ import annotations

import io
import json

import numpy as np
import pytest

from moehub_sim.core.engine import Engine, Rng, TraceSink, fork_stream, ns_to_ps, ps_per_unit
from moehub_sim.core.errors import DeadlockError, EventBudgetExceeded, PastEventError
from tests.conftest import Recorder


def test_unit_conversion_is_integer_picoseconds():
    assert ns_to_ps(250) == 250_000
    assert ns_to_ps(0.5) == 500
    assert ps_per_unit(16, 100e9) == 160
    with pytest.raises(ValueError):
        ps_per_unit(1, 0)


def test_event_at_time_zero_fires_first():
    engine = Engine()
    fired = []
    engine.call_at(5, fired.append, "later")
    engine.call_at(0, fired.append, "now")
    engine.run_until()
    assert fired == ["now", "later"]


def test_equal_times_fire_in_sequence_order():
    engine = Engine()
    recorder = Recorder("p")
    engine.register(recorder)
    first = engine.schedule(100, "p", "a")
    second = engine.schedule(100, "p", "b")
    assert first.sequence < second.sequence
    engine.run_until()
    assert [kind for _, kind, _ in recorder.events] == ["a", "b"]


def test_scheduling_in_the_past_aborts():
    engine = Engine()
    engine.call_at(60, lambda: engine.call_at(50, lambda: None))
    with pytest.raises(PastEventError, match="past event"):
        engine.run_until()


def test_run_until_returns_last_event_time():
    assert Engine().run_until() == 0
    engine = Engine()
    engine.call_at(40, lambda: None)
    assert engine.run_until() == 40


def test_deadline_stops_before_later_events():
    engine = Engine()
    fired = []
    engine.call_at(10, fired.append, 10)
    engine.call_at(30, fired.append, 30)
    engine.run_until(20)
    assert fired == [10]
    assert engine.pending() == 1


def test_event_budget_guard():
    engine = Engine(event_budget=1000)

    def again() -> None:
        engine.call_at(engine.now + 1, again)

    engine.call_at(0, again)
    with pytest.raises(EventBudgetExceeded):
        engine.run_until()
    assert engine.fired == 1000


def test_drained_queue_with_busy_component_is_a_deadlock():
    engine = Engine()
    engine.register(Recorder("stuck", idle=False))
    with pytest.raises(DeadlockError, match="stuck"):
        engine.run_until()


def test_duplicate_component_names_rejected():
    engine = Engine()
    engine.register(Recorder("p"))
    with pytest.raises(ValueError):
        engine.register(Recorder("p"))


def test_trace_has_one_line_per_fired_event():
    stream = io.StringIO()
    sink = TraceSink(stream)
    engine = Engine(trace=sink)
    for t in (3, 1, 2):
        engine.call_at(t, lambda: engine.annotate(note="x"))
    engine.run_until()
    lines = stream.getvalue().splitlines()
    assert len(lines) == engine.fired == sink.count == 3
    records = [json.loads(line) for line in lines]
    assert [r["t_ps"] for r in records] == [1, 2, 3]
    assert all(r["component"] == "callbacks" and r["note"] == "x" for r in records)


def test_fork_stream_is_deterministic_per_label():
    root = Rng(1234)
    a = fork_stream(root, "routing").generator().random(8)
    b = fork_stream(root, "routing").generator().random(8)
    c = fork_stream(root, "arbiter").generator().random(8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_labeled_streams_are_uncorrelated():
    root = Rng(99)
    x = fork_stream(root, "routing").generator().random(1_000_000)
    y = fork_stream(root, "arbiter").generator().random(1_000_000)
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.01
