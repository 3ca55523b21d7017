from __future__ import annotations

import pytest

from moehub_sim.core.aau import AddressAllocationUnit
from moehub_sim.core.engine import Rng
from moehub_sim.services import validation
from moehub_sim.services.validation import (
    RAT_CAPACITIES,
    SINGLE_GPU_RATIO_MIN,
    SUITES,
    SuiteResult,
    check_aau,
    check_congestion,
    check_dam,
    check_readiness,
    check_rpm,
    run_validation,
    single_gpu_gap,
)


def test_suite_result_collects_violations():
    result = SuiteResult("x")
    result.expect(True, "fine")
    result.expect(False, "broken")
    assert not result.ok
    assert result.as_dict() == {"suite": "x", "ok": False, "checked": 2, "violations": ["broken"]}


def test_aau_replay_holds_for_every_capacity():
    result = check_aau(Rng(3), rounds=3, arrivals=200)
    assert result.ok, result.violations
    assert result.checked > 3 * 200 * len(RAT_CAPACITIES)


def test_aau_replay_catches_a_table_that_never_evicts(monkeypatch):
    monkeypatch.setattr(AddressAllocationUnit, "evict_if_full", lambda self: None)
    result = check_aau(Rng(3), rounds=2, arrivals=200, capacities=(1,))
    assert not result.ok
    assert any("evicted" in v or "RAT holds" in v for v in result.violations)


def test_rpm_order_bypass_and_coalescing():
    result = check_rpm(Rng(5), requests=600, windows=5)
    assert result.ok, result.violations


def test_dam_tiles():
    assert check_dam(Rng(2), rounds=2).ok


def test_layer_readiness_follows_the_last_write():
    result = check_readiness(Rng(4), None, layers=1)
    assert result.ok, result.violations
    assert result.checked > 0


def test_merging_beats_fifo_under_bursts():
    result = check_congestion(Rng(6), None, seeds=1)
    assert result.ok, result.violations


def test_single_gpu_layer_tracks_the_ideal_layer():
    ratio, stats = single_gpu_gap()
    assert SINGLE_GPU_RATIO_MIN <= ratio <= 1.0
    assert stats["fabric"]["flits"] == 0
    assert stats["gpus"]["issue_stalls"] == 0
    hub = stats["totals"]["hub"]
    assert hub["loopback_writes"] == hub["writes"] > 0


def test_run_validation_reports_every_suite(monkeypatch):
    def quick(name):
        return lambda rng, resolved: SuiteResult(name, checked=1)

    monkeypatch.setattr(validation, "SUITES", {name: quick(name) for name in SUITES})
    results = run_validation(1)
    assert [r["suite"] for r in results] == list(SUITES)
    assert all(r["ok"] for r in results)


@pytest.mark.parametrize("capacity", RAT_CAPACITIES)
def test_capacity_grid_runs_alone(capacity):
    assert check_aau(Rng(9), rounds=1, arrivals=100, capacities=(capacity,)).ok
