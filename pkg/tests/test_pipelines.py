from __future__ import annotations

import json
from dataclasses import replace

import pytest

from moehub_sim.core.dam import CountMode
from moehub_sim.core.engine import Rng, TraceSink
from moehub_sim.services.attribution import BUCKETS
from moehub_sim.services.pipelines import (
    Pipeline,
    fragments,
    run_baseline_layer,
    run_ideal_layer,
    run_layer,
    run_moehub_layer,
)
from moehub_sim.services.workload import generate_routing

ALL = [p.value for p in Pipeline]


@pytest.fixture(scope="module")
def results():
    from moehub_sim.services.validation import TINY_MODEL, tiny_params

    routing = generate_routing(TINY_MODEL, 0.03, Rng(7))
    params = tiny_params(None)
    return routing, {name: run_layer(name, routing, params) for name in ALL}


def test_fragments_split_rows_into_store_sizes():
    assert fragments(0, 512, 128) == [(0, 128), (128, 128), (256, 128), (384, 128)]
    assert fragments(0, 96, 64) == [(0, 64), (64, 32)]


@pytest.mark.parametrize("name", ALL)
def test_breakdown_covers_the_span(results, name):
    result = results[1][name]
    assert result.span_ps > 0
    assert set(result.breakdown) == set(BUCKETS)
    assert sum(result.breakdown.values()) == result.span_ps


@pytest.mark.parametrize("name", ALL)
def test_every_event_fires(results, name):
    events = results[1][name].events
    assert events["fired"] == events["scheduled"] > 0


@pytest.mark.parametrize("name", ALL)
def test_no_pipeline_beats_the_ideal_layer(results, name):
    layers = results[1]
    assert layers[name].span_ps >= layers["ideal"].span_ps


@pytest.mark.parametrize("name", ["moehub", "mh_pkt", "mh_dep", "mh_base", "mediated_pipelined", "mediated_nonoverlap"])
def test_every_token_reaches_its_experts(results, name):
    routing, layers = results
    result = layers[name]
    expected = routing.tokens * routing.cfg.top_k
    assert result.pairs_ok is True
    assert result.tokens_delivered == expected
    assert result.combined_outputs == expected


@pytest.mark.parametrize("name", ["ideal", "moehub", "mediated_pipelined", "mediated_nonoverlap"])
def test_expert_flops_match_the_routing(results, name):
    routing, layers = results
    cfg = routing.cfg
    rows = int(routing.tokens_per_expert.sum())
    assert layers[name].expert_flops == 4 * rows * cfg.hidden_size * cfg.ffn_hidden_size


def test_moehub_beats_the_host_mediated_layer(results):
    layers = results[1]
    assert layers["moehub"].span_ps < layers["mediated_nonoverlap"].span_ps


def test_result_is_json_ready(results):
    data = results[1]["moehub"].to_dict()
    assert json.loads(json.dumps(data))["pipeline"] == "moehub"
    assert data["link_report"]["window_ps"] == [0, data["span_ps"]]


def test_rerun_is_identical(results):
    from moehub_sim.services.validation import tiny_params

    routing, layers = results
    again = run_layer("moehub", routing, tiny_params(None))
    assert again.to_dict() == layers["moehub"].to_dict()


def test_trace_lines_match_fired_events(tiny_routing, tiny_sim_params):
    sink = TraceSink()
    result = run_ideal_layer(tiny_routing, tiny_sim_params, trace=sink)
    assert len(sink.lines) == sink.count == result.events["fired"]
    assert all(json.loads(line)["t_ps"] >= 0 for line in sink.lines[:50])


def test_named_entry_points(tiny_routing, tiny_sim_params):
    assert run_moehub_layer(tiny_routing, tiny_sim_params, pkt=False, dep=False).pipeline == "mh_base"
    assert run_baseline_layer(tiny_routing, tiny_sim_params, "mediated_pipelined").pipeline == "mediated_pipelined"
    with pytest.raises(ValueError):
        run_baseline_layer(tiny_routing, tiny_sim_params, "moehub")
    with pytest.raises(ValueError):
        run_layer("fastest", tiny_routing, tiny_sim_params)


@pytest.mark.parametrize("name", ["ideal", "moehub", "mh_base", "mediated_pipelined", "mediated_nonoverlap"])
def test_empty_layer_completes(tiny_cfg, tiny_sim_params, name):
    routing = generate_routing(tiny_cfg.with_grid(seq_len_per_gpu=0), 0.0, Rng(1))
    result = run_layer(name, routing, tiny_sim_params)
    assert result.tokens_delivered == 0
    assert sum(result.breakdown.values()) == result.span_ps


@pytest.mark.parametrize("name", ["moehub", "mh_dep"])
def test_ack_count_mode_runs_clean(tiny_routing, tiny_sim_params, name):
    params = replace(tiny_sim_params, hub=replace(tiny_sim_params.hub, count_mode=CountMode.ACK))
    result = run_layer(name, tiny_routing, params)
    expected = tiny_routing.tokens * tiny_routing.cfg.top_k
    assert result.pairs_ok is True
    assert result.tokens_delivered == result.combined_outputs == expected
    assert sum(result.breakdown.values()) == result.span_ps
