from __future__ import annotations

from moehub_sim.services.attribution import BUCKETS, attribute


def test_empty_activity_is_all_overhead():
    out = attribute([], 100)
    assert out["mediation"] == 100
    assert sum(out.values()) == 100
    assert set(out) == set(BUCKETS)


def test_overlap_goes_to_the_higher_priority_bucket():
    out = attribute([(0, 20, "routing"), (10, 50, "gemm1")], 100)
    assert out["routing"] == 10
    assert out["expert_compute"] == 40
    assert out["exposed_combine"] == 50


def test_idle_gaps_split_around_expert_compute():
    out = attribute([(0, 10, "routing"), (30, 60, "gemm2"), (70, 75, "scaling")], 80)
    assert out["exposed_dispatch"] == 20
    assert out["expert_compute"] == 30
    assert out["scaling"] == 5
    assert out["exposed_combine"] == 15
    assert sum(out.values()) == 80


def test_late_start_is_charged_to_mediation():
    out = attribute([(20, 40, "gemm1")], 50)
    assert (out["mediation"], out["expert_compute"], out["exposed_combine"]) == (20, 20, 10)


def test_polling_and_unknown_kinds():
    out = attribute([(0, 10, "poll"), (5, 30, "copy")], 30)
    assert out["polling"] == 10
    assert out["mediation"] == 0
    assert sum(out.values()) == 30


def test_intervals_clipped_to_the_span():
    out = attribute([(-5, 10, "routing"), (5, 500, "gemm1")], 40)
    assert out == {**dict.fromkeys(BUCKETS, 0), "routing": 5, "expert_compute": 35}
    assert attribute([(0, 10, "gemm1")], 0) == dict.fromkeys(BUCKETS, 0)
