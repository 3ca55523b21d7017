"""Experiment configuration: JSON schema v1, defaults merge, unit conversion to SimParams"""

from __future__ import annotations

import json
import os
from dataclasses import asdict
from pathlib import Path
from typing import Any, Mapping, TypedDict

from moehub_sim.core.dam import CountMode
from moehub_sim.core.engine import DEFAULT_EVENT_BUDGET, ns_to_ps, ps_per_unit
from moehub_sim.core.errors import ConfigError
from moehub_sim.core.fabric import RoutePolicy, Topology
from moehub_sim.core.gpu import GpuTiming, issue_interval_ps
from moehub_sim.core.hub import HubTiming
from moehub_sim.core.packets import FLIT_BYTES, LINE_BYTES
from moehub_sim.core.system import SimParams
from moehub_sim.services.pipelines import Pipeline
from moehub_sim.services.workload import MAX_TARGET_STD, PRESETS, MoeConfig, preset

SCHEMA_VERSION = 1
SEED_ENV = "MOEHUB_SIM_SEED"

MODEL_FIELDS = ("name", "hidden_size", "ffn_hidden_size", "n_experts", "top_k", "n_layers", "dtype_bytes")


class ModelDict(TypedDict):
    name: str
    hidden_size: int
    ffn_hidden_size: int
    n_experts: int
    top_k: int
    n_layers: int
    dtype_bytes: int


_DEFAULT_FABRIC: dict[str, Any] = {
    "n_switches": 4,
    "gpu_bandwidth_gbps": 400.0,
    "link_latency_ns": 250.0,
    "queue_packets": 256,
    "egress_queue_packets": 4,
    "route_policy": "hashed",
    "route_salt": 0,
    "high_water": 0.75,
    "loopback_ns": 500.0,
    "write_acks": True,
}

_DEFAULT_GPU: dict[str, Any] = {
    "n_sms": 132,
    "tbs_per_sm": 1,
    "tflops": 700.0,
    "hbm_tbps": 3.0,
    "launch_latency_ns": 5000.0,
    "store_issue_rate_greq": 8.0,
    "issue_batch": 4,
    "poll_interval_ns": 1000.0,
    "poll_interference": 0.0,
    "tile_m": 128,
    "tile_n": 128,
    "topk_ns": 500.0,
}

_DEFAULT_HUB: dict[str, Any] = {
    "clock_ghz": 1.6,
    "ingress_ns": 10.0,
    "rpm_entries": 64,
    "bypass_ns": 2000.0,
    "mask_first": True,
    "rowid_priority": True,
    "hold_partial": True,
    "rat_capacity": 4096,
    "rat_banks": 16,
    "recover_penalty_ns": 600.0,
    "spill_write_ns": 100.0,
    "mmio_latency_ns": 2000.0,
    "signal_latency_ns": 100.0,
    "count_mode": "coverage",
    "store_bytes": 64,
    "bulk_store_bytes": 128,
    "metadata_bytes": 16,
    "combine_dam": True,
    "capacity_factor": 1.0,
}

_DEFAULT_LATENCY: dict[str, Any] = {
    "host_roundtrip_ns": 15000.0,
    "pipeline_chunks": 4,
    "event_budget": DEFAULT_EVENT_BUDGET,
}

# null axes default to the single top-level value
_DEFAULT_GRID: dict[str, Any] = {
    "seq_len_per_gpu": None,
    "target_std": None,
    "seeds": None,
    "n_gpus": None,
    "models": None,
}

_DEFAULT_OUTPUT: dict[str, Any] = {
    "dir": "out",
    "trace": False,
    "dependency_tables": False,
    "shadow": True,
    "utilization_bucket_ns": 1000.0,
}

_DEFAULT_CHECKS: dict[str, Any] = {
    "ideal_lower_bound": True,
    "mh_beats_baselines": False,
    "speedup_min": None,
    "ideal_ratio_min": None,
    "ordering": [],
    "speedup_trend": None,
    "span_monotonic": None,
    "ablation_gain": None,
}

_DEFAULT: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "name": "experiment",
    "seed": 1,
    "model": "mixtral-8x7b",
    "n_gpus": 8,
    "seq_len_per_gpu": 1024,
    "target_std": 0.032,
    "pipelines": ["ideal", "moehub", "mediated_pipelined", "mediated_nonoverlap"],
    "fabric": _DEFAULT_FABRIC,
    "gpu": _DEFAULT_GPU,
    "hub": _DEFAULT_HUB,
    "latency": _DEFAULT_LATENCY,
    "grid": _DEFAULT_GRID,
    "output": _DEFAULT_OUTPUT,
    "checks": _DEFAULT_CHECKS,
}

_SECTIONS = ("fabric", "gpu", "hub", "latency", "grid", "output", "checks")
# top-level keys validated by their own resolvers
_UNCOERCED = (*_SECTIONS, "model")

# trend rule -> required fields
_TREND_KEYS = {
    "speedup_trend": ("baseline", "axis", "direction"),
    "span_monotonic": ("pipeline", "axis"),
    "ablation_gain": ("axis",),
}
_TREND_AXES = ("n_gpus", "seq_len_per_gpu", "target_std")
_TREND_FIELDS = ("baseline", "variant", "pipeline", "axis", "direction", "tolerance", "min_share", "pkt_direction", "dep_direction")


def seed_override() -> int | None:
    """Seed forced through the environment, if any."""
    value = os.environ.get(SEED_ENV, "").strip()
    if not value:
        return None
    try:
        return int(value, 0)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}: not an integer: {value!r}") from None


def _coerce(path: str, value: Any, default: Any, problems: list[str]) -> Any:
    if default is None or isinstance(default, list):
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            problems.append(f"{path}: expected true/false")
            return default
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer")
            return default
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number")
            return default
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        problems.append(f"{path}: expected a string")
        return default
    return value


def _merge(section: str, defaults: Mapping[str, Any], data: Any, problems: list[str]) -> dict[str, Any]:
    """Defaults with known user keys merged over them; unknown keys are reported with their path."""
    merged = dict(defaults)
    if data is None:
        return merged
    if not isinstance(data, dict):
        problems.append(f"{section}: expected an object")
        return merged
    for key, value in data.items():
        path = f"{section}.{key}" if section else key
        if key not in defaults:
            problems.append(f"{path}: unknown key")
            continue
        if key in _UNCOERCED and not section:
            continue
        merged[key] = _coerce(path, value, defaults[key], problems)
    return merged


def _resolve_model(path: str, value: Any, problems: list[str]) -> ModelDict | None:
    if isinstance(value, str):
        if value not in PRESETS:
            problems.append(f"{path}: unknown preset {value!r} (known: {', '.join(sorted(PRESETS))})")
            return None
        cfg = preset(value)
        return {k: getattr(cfg, k) for k in MODEL_FIELDS}  # type: ignore[return-value]
    if not isinstance(value, dict):
        problems.append(f"{path}: expected a preset name or an object")
        return None
    base: dict[str, Any] = {"name": "custom", "n_layers": 1, "dtype_bytes": 2}
    if "preset" in value:
        resolved = _resolve_model(f"{path}.preset", value["preset"], problems)
        if resolved is None:
            return None
        base.update(resolved)
    for key, item in value.items():
        if key == "preset":
            continue
        if key not in MODEL_FIELDS:
            problems.append(f"{path}.{key}: unknown key")
        elif key == "name":
            base[key] = _coerce(f"{path}.{key}", item, "", problems)
        else:
            base[key] = _coerce(f"{path}.{key}", item, 0, problems)
    missing = [k for k in MODEL_FIELDS if k not in base]
    if missing:
        problems.append(f"{path}: missing {', '.join(missing)}")
        return None
    return {k: base[k] for k in MODEL_FIELDS}  # type: ignore[return-value]


def _axis(path: str, value: Any, fallback: Any, problems: list[str]) -> list[Any]:
    if value is None:
        return [fallback]
    if not isinstance(value, list) or not value:
        problems.append(f"{path}: expected a non-empty list")
        return [fallback]
    return list(value)


def _require(problems: list[str], ok: bool, message: str) -> None:
    if not ok:
        problems.append(message)


def parse_config(data: Any, *, seed: int | None = None) -> dict[str, Any]:
    """Validate ``data`` and return the resolved configuration (all defaults materialized, user units)."""
    problems: list[str] = []
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    resolved = _merge("", _DEFAULT, data, problems)
    for section in _SECTIONS:
        resolved[section] = _merge(section, _DEFAULT[section], data.get(section), problems)
    if resolved["schema_version"] != SCHEMA_VERSION:
        problems.append(f"schema_version: unsupported version {resolved['schema_version']} (expected {SCHEMA_VERSION})")
    override = seed if seed is not None else seed_override()
    if override is not None:
        resolved["seed"] = override

    model = _resolve_model("model", resolved["model"], problems)
    if model is not None:
        resolved["model"] = model

    grid = resolved["grid"]
    grid["seq_len_per_gpu"] = _axis("grid.seq_len_per_gpu", grid["seq_len_per_gpu"], resolved["seq_len_per_gpu"], problems)
    grid["target_std"] = _axis("grid.target_std", grid["target_std"], resolved["target_std"], problems)
    grid["seeds"] = _axis("grid.seeds", grid["seeds"], resolved["seed"], problems)
    grid["n_gpus"] = _axis("grid.n_gpus", grid["n_gpus"], resolved["n_gpus"], problems)
    models = []
    for i, item in enumerate(_axis("grid.models", grid["models"], resolved["model"], problems)):
        m = _resolve_model(f"grid.models[{i}]", item, problems)
        if m is not None:
            models.append(m)
    grid["models"] = models

    pipelines = resolved["pipelines"]
    known = {p.value for p in Pipeline}
    if not isinstance(pipelines, list) or not pipelines:
        problems.append("pipelines: expected a non-empty list")
    else:
        for name in pipelines:
            if name not in known:
                problems.append(f"pipelines: unknown pipeline {name!r} (known: {', '.join(sorted(known))})")
        _require(problems, len(set(map(str, pipelines))) == len(pipelines), "pipelines: duplicate entries")
    for name in resolved["checks"]["ordering"] or []:
        if name not in known:
            problems.append(f"checks.ordering: unknown pipeline {name!r}")
    checks = resolved["checks"]
    for key, required in _TREND_KEYS.items():
        rule = checks[key]
        if rule is None:
            continue
        if not isinstance(rule, dict):
            problems.append(f"checks.{key}: expected an object")
            continue
        for name in required:
            _require(problems, name in rule, f"checks.{key}: missing {name}")
        for name in rule:
            _require(problems, name in _TREND_FIELDS, f"checks.{key}.{name}: unknown key")
        _require(problems, rule.get("axis", "seq_len_per_gpu") in _TREND_AXES, f"checks.{key}.axis: not a numeric grid axis")
        for name in ("direction", "pkt_direction", "dep_direction"):
            _require(problems, rule.get(name, "decreasing") in ("increasing", "decreasing"),
                     f"checks.{key}.{name}: expected increasing or decreasing")
        for name in ("baseline", "pipeline"):
            if name in rule:
                _require(problems, rule[name] in known, f"checks.{key}.{name}: unknown pipeline {rule[name]!r}")

    for std in grid["target_std"]:
        _require(problems, isinstance(std, (int, float)) and 0.0 <= std <= MAX_TARGET_STD,
                 f"target_std: {std} outside [0, {MAX_TARGET_STD}]")
    for seq in grid["seq_len_per_gpu"]:
        _require(problems, isinstance(seq, int) and not isinstance(seq, bool) and seq >= 0,
                 f"seq_len_per_gpu: {seq} must be a non-negative integer")
    for s in grid["seeds"]:
        _require(problems, isinstance(s, int) and not isinstance(s, bool), f"grid.seeds: {s!r} is not an integer")
    for n in grid["n_gpus"]:
        if not isinstance(n, int) or isinstance(n, bool) or n < 1:
            problems.append(f"n_gpus: {n!r} must be a positive integer")
            continue
        for m in models:
            cfg = MoeConfig(m["name"], m["hidden_size"], m["ffn_hidden_size"], m["n_experts"], m["top_k"],
                            m["n_layers"], m["dtype_bytes"], n_gpus=n)
            problems.extend(cfg.problems())

    fabric, gpu, hub, latency, output = (resolved[k] for k in ("fabric", "gpu", "hub", "latency", "output"))
    _require(problems, fabric["route_policy"] in {p.value for p in RoutePolicy},
             f"fabric.route_policy: unknown policy {fabric['route_policy']!r}")
    _require(problems, 0.0 < fabric["high_water"] <= 1.0, "fabric.high_water: must be in (0, 1]")
    for section, keys in (
        ("fabric", ("n_switches", "gpu_bandwidth_gbps", "queue_packets", "egress_queue_packets")),
        ("gpu", ("n_sms", "tbs_per_sm", "tflops", "hbm_tbps", "store_issue_rate_greq", "issue_batch", "tile_m", "tile_n")),
        ("hub", ("clock_ghz", "rpm_entries", "rat_capacity", "rat_banks", "capacity_factor")),
        ("latency", ("pipeline_chunks", "event_budget")),
    ):
        for key in keys:
            _require(problems, resolved[section][key] > 0, f"{section}.{key}: must be positive")
    for section, key in (("fabric", "link_latency_ns"), ("fabric", "loopback_ns"), ("gpu", "launch_latency_ns"),
                         ("gpu", "poll_interval_ns"), ("gpu", "poll_interference"), ("gpu", "topk_ns"),
                         ("hub", "ingress_ns"), ("hub", "bypass_ns"), ("hub", "recover_penalty_ns"),
                         ("hub", "spill_write_ns"), ("hub", "mmio_latency_ns"), ("hub", "signal_latency_ns"),
                         ("latency", "host_roundtrip_ns"), ("output", "utilization_bucket_ns")):
        _require(problems, resolved[section][key] >= 0, f"{section}.{key}: must not be negative")
    _require(problems, hub["count_mode"] in {m.value for m in CountMode}, f"hub.count_mode: unknown mode {hub['count_mode']!r}")
    for key in ("store_bytes", "bulk_store_bytes", "metadata_bytes"):
        size = hub[key]
        _require(problems, 0 < size <= LINE_BYTES and size % FLIT_BYTES == 0,
                 f"hub.{key}: must be a multiple of {FLIT_BYTES} B up to {LINE_BYTES} B")
    for m in models:
        _require(problems, gpu["tile_n"] * m["dtype_bytes"] % FLIT_BYTES == 0,
                 f"gpu.tile_n: {gpu['tile_n']} columns of {m['dtype_bytes']} B do not fill whole {FLIT_BYTES} B sub-blocks")
    if problems:
        raise ConfigError(problems)
    return resolved


def load_config(path: str | Path, *, seed: int | None = None) -> dict[str, Any]:
    config_path = Path(path).expanduser()
    try:
        text = config_path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"{config_path}: file not found") from None
    except OSError as exc:
        raise ConfigError(f"{config_path}: {exc.strerror or exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{config_path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(data, seed=seed)


def emit_config(resolved: Mapping[str, Any]) -> str:
    return json.dumps(resolved, ensure_ascii=False, indent=2, sort_keys=True)


def model_config(model: Mapping[str, Any], *, n_gpus: int, seq_len_per_gpu: int) -> MoeConfig:
    return MoeConfig(**{k: model[k] for k in MODEL_FIELDS}, n_gpus=n_gpus, seq_len_per_gpu=seq_len_per_gpu)


def build_params(resolved: Mapping[str, Any], *, n_gpus: int | None = None, dtype_bytes: int | None = None) -> SimParams:
    """Convert the user-unit sections into integer-picosecond simulator parameters."""
    fabric, gpu, hub, latency, output = (resolved[k] for k in ("fabric", "gpu", "hub", "latency", "output"))
    n_sms = gpu["n_sms"]
    topology = Topology(
        n_gpus=n_gpus if n_gpus is not None else resolved["n_gpus"],
        n_switches=fabric["n_switches"],
        gpu_bandwidth=fabric["gpu_bandwidth_gbps"] * 1e9,
        link_latency_ps=ns_to_ps(fabric["link_latency_ns"]),
        queue_packets=fabric["queue_packets"],
        egress_queue_packets=fabric["egress_queue_packets"],
    )
    timing = GpuTiming(
        n_sms=n_sms,
        tbs_per_sm=gpu["tbs_per_sm"],
        launch_latency_ps=ns_to_ps(gpu["launch_latency_ns"]),
        sm_flops=gpu["tflops"] * 1e12 / n_sms,
        sm_mem_bw=gpu["hbm_tbps"] * 1e12 / n_sms,
        dtype_bytes=dtype_bytes if dtype_bytes is not None else resolved["model"]["dtype_bytes"],
        store_issue_ps=issue_interval_ps(gpu["store_issue_rate_greq"] * 1e9),
        issue_batch=gpu["issue_batch"],
        poll_interval_ps=ns_to_ps(gpu["poll_interval_ns"]),
        poll_interference=gpu["poll_interference"],
    )
    hub_timing = HubTiming(
        ingress_ps=ns_to_ps(hub["ingress_ns"]),
        cycle_ps=ps_per_unit(1, hub["clock_ghz"] * 1e9),
        write_acks=fabric["write_acks"],
        rpm_entries=hub["rpm_entries"],
        bypass_ps=ns_to_ps(hub["bypass_ns"]),
        mask_first=hub["mask_first"],
        rowid_priority=hub["rowid_priority"],
        hold_partial=hub["hold_partial"],
        rat_capacity=hub["rat_capacity"],
        rat_banks=hub["rat_banks"],
        recover_penalty_ps=ns_to_ps(hub["recover_penalty_ns"]),
        spill_write_ps=ns_to_ps(hub["spill_write_ns"]),
        mmio_latency_ps=ns_to_ps(hub["mmio_latency_ns"]),
        signal_latency_ps=ns_to_ps(hub["signal_latency_ns"]),
        count_mode=CountMode(hub["count_mode"]),
    )
    return SimParams(
        topology=topology,
        route_policy=RoutePolicy(fabric["route_policy"]),
        route_salt=fabric["route_salt"],
        high_water=fabric["high_water"],
        loopback_ps=ns_to_ps(fabric["loopback_ns"]),
        gpu=timing,
        hub=hub_timing,
        host_roundtrip_ps=ns_to_ps(latency["host_roundtrip_ns"]),
        pipeline_chunks=latency["pipeline_chunks"],
        store_bytes=hub["store_bytes"],
        bulk_store_bytes=hub["bulk_store_bytes"],
        metadata_bytes=hub["metadata_bytes"],
        combine_dam=hub["combine_dam"],
        topk_ps=ns_to_ps(gpu["topk_ns"]),
        capacity_factor=hub["capacity_factor"],
        tile_m=gpu["tile_m"],
        tile_n=gpu["tile_n"],
        event_budget=latency["event_budget"],
        shadow=output["shadow"],
        utilization_bucket_ps=ns_to_ps(output["utilization_bucket_ns"]),
    )


def params_summary(params: SimParams) -> dict[str, Any]:
    """Picosecond view of the parameters, for reports."""
    out = asdict(params)
    out["route_policy"] = params.route_policy.value
    out["hub"]["count_mode"] = params.hub.count_mode.value
    return out
