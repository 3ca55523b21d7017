"""Grid driver: runs every (grid point, pipeline) cell, merges results, derives speedups and trend checks"""

from __future__ import annotations

import itertools
import json
import logging
import multiprocessing as mp
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from moehub_sim.core.engine import Rng, TraceSink, fork_stream
from moehub_sim.services.pipelines import BASELINES, MH_KNOBS, Pipeline, run_layer
from moehub_sim.services.settings import SCHEMA_VERSION, build_params, model_config, params_summary
from moehub_sim.services.workload import generate_routing

logger = logging.getLogger(__name__)

AXES = ("model", "n_gpus", "seq_len_per_gpu", "target_std", "seed")

ABLATION_PIPELINES = ["mh_base", "mh_pkt", "mh_dep", "moehub", "mediated_pipelined"]


@dataclass(frozen=True)
class GridPoint:
    model: int  # index into grid.models
    n_gpus: int
    seq_len_per_gpu: int
    target_std: float
    seed: int

    def coords(self, models: list[Mapping[str, Any]]) -> dict[str, Any]:
        return {
            "model": models[self.model]["name"],
            "n_gpus": self.n_gpus,
            "seq_len_per_gpu": self.seq_len_per_gpu,
            "target_std": self.target_std,
            "seed": self.seed,
        }

    def label(self, models: list[Mapping[str, Any]]) -> str:
        name = re.sub(r"[^A-Za-z0-9.]+", "-", models[self.model]["name"])
        return f"{name}_g{self.n_gpus}_s{self.seq_len_per_gpu}_std{self.target_std:g}_seed{self.seed}"


def grid_points(resolved: Mapping[str, Any], *, single: bool = False) -> list[GridPoint]:
    """Cartesian product of the grid axes; ``single`` keeps only the top-level point."""
    if single:
        return [GridPoint(0, resolved["n_gpus"], resolved["seq_len_per_gpu"], float(resolved["target_std"]), resolved["seed"])]
    grid = resolved["grid"]
    return [
        GridPoint(m, n, seq, float(std), seed)
        for m, n, seq, std, seed in itertools.product(
            range(len(grid["models"])), grid["n_gpus"], grid["seq_len_per_gpu"], grid["target_std"], grid["seeds"]
        )
    ]


def _models(resolved: Mapping[str, Any], single: bool) -> list[Mapping[str, Any]]:
    return [resolved["model"]] if single else resolved["grid"]["models"]


def run_cell(resolved: Mapping[str, Any], point: GridPoint, models: list[Mapping[str, Any]], pipelines: list[str],
             trace_dir: str | None, tables_dir: str | None = None) -> list[dict[str, Any]]:
    """Simulate one grid point under every pipeline on a shared routing draw."""
    model = models[point.model]
    cfg = model_config(model, n_gpus=point.n_gpus, seq_len_per_gpu=point.seq_len_per_gpu)
    params = build_params(resolved, n_gpus=point.n_gpus, dtype_bytes=model["dtype_bytes"])
    coords = point.coords(models)
    label = point.label(models)
    routing = generate_routing(cfg, point.target_std, fork_stream(Rng(point.seed), "workload"))
    rows = []
    for name in pipelines:
        row: dict[str, Any] = {**coords, "pipeline": name, "cell": f"{label}_{name}", "routing": routing.summary()}
        started = time.perf_counter()
        stream = None
        try:
            sink = None
            if trace_dir is not None:
                path = Path(trace_dir) / f"trace_{row['cell']}.ndjson"
                stream = path.open("w", encoding="utf-8")
                sink = TraceSink(stream)
                row["trace"] = path.name
            result = run_layer(name, routing, params, trace=sink)
        except OSError:
            raise
        except Exception as exc:
            logger.error("%s failed: %s: %s", row["cell"], type(exc).__name__, exc)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        else:
            row.update(status="ok", span_ps=result.span_ps, result=result.to_dict())
            if sink is not None:
                row["trace_lines"] = sink.count
            if tables_dir is not None and result.dependency_tables:
                path = Path(tables_dir) / f"deptables_{row['cell']}.json"
                path.write_text(json.dumps(result.dependency_tables, ensure_ascii=False, indent=2), encoding="utf-8")
                row["dependency_tables"] = path.name
            logger.info("%s: span %.3f us (%d tokens, std %.3f, seed %d) in %.2fs", row["cell"], result.span_ps / 1e6,
                        cfg.tokens, point.target_std, point.seed, time.perf_counter() - started)
        finally:
            if stream is not None:
                stream.close()
        rows.append(row)
    return rows


def _sort_key(row: Mapping[str, Any], order: dict[str, int]) -> tuple:
    return (row["model"], row["n_gpus"], row["seq_len_per_gpu"], row["target_std"], row["seed"], order[row["pipeline"]])


def run_experiment(resolved: Mapping[str, Any], *, command: str = "sweep", pipelines: list[str] | None = None,
                   jobs: int = 1, trace_dir: str | Path | None = None,
                   tables_dir: str | Path | None = None) -> dict[str, Any]:
    """Run the grid (``command == "run"`` runs the top-level point only) and build the report."""
    single = command == "run"
    pipelines = list(pipelines or resolved["pipelines"])
    models = _models(resolved, single)
    points = grid_points(resolved, single=single)
    trace = str(trace_dir) if trace_dir is not None else None
    tables = str(tables_dir) if tables_dir is not None else None
    args = [(resolved, p, models, pipelines, trace, tables) for p in points]
    logger.info("%s: %d point(s) x %d pipeline(s), %d job(s)", command, len(points), len(pipelines), jobs)
    if jobs > 1 and len(points) > 1:
        with mp.Pool(min(jobs, len(points))) as pool:
            chunks = pool.starmap(run_cell, args)
    else:
        chunks = [run_cell(*a) for a in args]
    order = {name: i for i, name in enumerate(pipelines)}
    cells = sorted((row for chunk in chunks for row in chunk), key=lambda r: _sort_key(r, order))

    report: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "name": resolved["name"],
        "command": command,
        "config": resolved,
        "params": params_summary(build_params(resolved)),
        "pipelines": pipelines,
        "axes": axes_of(cells),
        "cells": cells,
        "speedups": speedup_table(cells),
        "summary": summarize(cells),
        "failed": sum(1 for c in cells if c["status"] != "ok"),
    }
    report["checks"] = check_trends(report, resolved["checks"])
    return report


def axes_of(cells: Iterable[Mapping[str, Any]]) -> dict[str, list[Any]]:
    out: dict[str, set] = {axis: set() for axis in AXES}
    for cell in cells:
        for axis in AXES:
            out[axis].add(cell[axis])
    return {axis: sorted(values) for axis, values in out.items()}


def _points(cells: Iterable[Mapping[str, Any]]) -> dict[tuple, dict[str, Mapping[str, Any]]]:
    """Grid coordinates -> pipeline -> successful cell."""
    out: dict[tuple, dict[str, Mapping[str, Any]]] = {}
    for cell in cells:
        key = tuple(cell[a] for a in AXES)
        bucket = out.setdefault(key, {})
        if cell["status"] == "ok":
            bucket[cell["pipeline"]] = cell
    return out


def speedup_table(cells: list[Mapping[str, Any]]) -> list[dict[str, Any]]:
    """Baseline span / variant span for every baseline present at a grid point."""
    rows = []
    for key, by_pipeline in _points(cells).items():
        coords = dict(zip(AXES, key))
        for baseline in BASELINES:
            base = by_pipeline.get(baseline.value)
            if base is None:
                continue
            for variant, cell in by_pipeline.items():
                speedup = 1.0 if variant == baseline.value else base["span_ps"] / cell["span_ps"]
                rows.append({**coords, "baseline": baseline.value, "variant": variant, "speedup": speedup})
    return rows


def summarize(cells: list[Mapping[str, Any]]) -> list[dict[str, Any]]:
    """Per grid point: ideal/MoE-Hub span ratio and MoE-Hub speedup over each baseline."""
    out = []
    for key, by_pipeline in _points(cells).items():
        mh = by_pipeline.get(Pipeline.MOEHUB.value)
        ideal = by_pipeline.get(Pipeline.IDEAL.value)
        entry: dict[str, Any] = dict(zip(AXES, key))
        entry["ideal_over_moehub"] = ideal["span_ps"] / mh["span_ps"] if mh and ideal else None
        for baseline in BASELINES:
            base = by_pipeline.get(baseline.value)
            entry[f"moehub_over_{baseline.value}"] = base["span_ps"] / mh["span_ps"] if mh and base else None
        out.append(entry)
    return out


def check_trends(report: Mapping[str, Any], checks: Mapping[str, Any]) -> list[dict[str, Any]]:
    """Evaluate the configured trend assertions; every entry carries ``ok`` and a detail line."""
    results: list[dict[str, Any]] = []
    points = _points(report["cells"])

    def add(name: str, failures: list[str], checked: int) -> None:
        detail = f"{checked} point(s) checked" if not failures else "; ".join(failures[:10])
        results.append({"name": name, "ok": not failures, "detail": detail})

    failed = [c["cell"] for c in report["cells"] if c["status"] != "ok"]
    add("cells", [f"{c} failed" for c in failed], len(report["cells"]))

    def pairs(lo: str, hi: str) -> list[tuple[tuple, float, float]]:
        return [(key, bp[lo]["span_ps"], bp[hi]["span_ps"]) for key, bp in points.items() if lo in bp and hi in bp]

    if checks.get("ideal_lower_bound"):
        failures, checked = [], 0
        for key, bp in points.items():
            ideal = bp.get(Pipeline.IDEAL.value)
            if ideal is None:
                continue
            for name, cell in bp.items():
                checked += 1
                if cell["span_ps"] < ideal["span_ps"]:
                    failures.append(f"{name} {cell['span_ps']} ps below ideal {ideal['span_ps']} ps at {key}")
        add("ideal_lower_bound", failures, checked)

    if checks.get("mh_beats_baselines"):
        failures, checked = [], 0
        for baseline in BASELINES:
            for key, base, mh in pairs(baseline.value, Pipeline.MOEHUB.value):
                checked += 1
                if mh > base:
                    failures.append(f"moehub {mh} ps slower than {baseline.value} {base} ps at {key}")
        add("mh_beats_baselines", failures, checked)

    rule = checks.get("speedup_min")
    if rule:
        baseline, variant, floor = rule["baseline"], rule.get("variant", "moehub"), float(rule["min"])
        found = pairs(baseline, variant)
        failures = [f"{variant} over {baseline} = {base / span:.3f} < {floor} at {key}"
                    for key, base, span in found if base / span < floor]
        if not found:
            failures.append(f"no point has both {baseline} and {variant}")
        add("speedup_min", failures, len(found))

    floor = checks.get("ideal_ratio_min")
    if floor is not None:
        found = pairs(Pipeline.IDEAL.value, Pipeline.MOEHUB.value)
        failures = [f"ideal/moehub = {ideal / mh:.3f} < {floor} at {key}" for key, ideal, mh in found if ideal / mh < floor]
        if not found:
            failures.append("no point has both ideal and moehub")
        add("ideal_ratio_min", failures, len(found))

    ordering = checks.get("ordering") or []
    if len(ordering) > 1:
        failures, checked = [], 0
        for key, bp in points.items():
            spans = [(name, bp[name]["span_ps"]) for name in ordering if name in bp]
            checked += 1
            for (a, sa), (b, sb) in zip(spans, spans[1:]):
                if sb > sa:
                    failures.append(f"{b} {sb} ps slower than {a} {sa} ps at {key}")
        add("ordering", failures, checked)

    rule = checks.get("speedup_trend")
    if rule:
        axis, baseline, variant = rule["axis"], rule["baseline"], rule.get("variant", Pipeline.MOEHUB.value)
        gains = _axis_means(
            ((dict(zip(AXES, key))[axis], base / span) for key, base, span in pairs(baseline, variant))
        )
        failures = []
        if len(gains) < 2:
            failures.append(f"{axis}: fewer than two points with {baseline} and {variant}")
        else:
            lo, hi = gains[min(gains)], gains[max(gains)]
            if not _moves(lo, hi, rule["direction"]):
                failures.append(f"{variant} over {baseline}: {lo:.3f} at {axis}={min(gains)} vs {hi:.3f} at {axis}={max(gains)}, "
                                f"expected {rule['direction']}")
        add("speedup_trend", failures, len(gains))

    rule = checks.get("span_monotonic")
    if rule:
        axis, name, tolerance = rule["axis"], rule["pipeline"], float(rule.get("tolerance", 0.02))
        spans = _axis_means(
            (dict(zip(AXES, key))[axis], bp[name]["span_ps"]) for key, bp in points.items() if name in bp
        )
        ordered = sorted(spans.items())
        failures = [f"{name} span drops {sa:.0f} -> {sb:.0f} ps from {axis}={a} to {b}"
                    for (a, sa), (b, sb) in zip(ordered, ordered[1:]) if sb < sa * (1.0 - tolerance)]
        add("span_monotonic", failures, len(ordered))

    rule = checks.get("ablation_gain")
    if rule:
        axis, share = rule["axis"], float(rule.get("min_share", 8 / 9))
        base = Pipeline.MH_BASE.value
        failures, checked = [], 0
        for variant, direction in ((Pipeline.MH_PKT.value, rule.get("pkt_direction")),
                                   (Pipeline.MH_DEP.value, rule.get("dep_direction"))):
            found = pairs(base, variant)
            checked += len(found)
            if not found:
                failures.append(f"no point has both {base} and {variant}")
                continue
            wins = sum(span <= b for _, b, span in found)
            if wins < share * len(found):
                failures.append(f"{variant} beats {base} at {wins}/{len(found)} point(s), below {share:.2f}")
            if direction is None:
                continue
            xs = [dict(zip(AXES, key))[axis] for key, _, _ in found]
            gains = [b / span for _, b, span in found]
            corr = rank_correlation(xs, gains)
            if corr is not None and not _moves(0.0, corr, direction):
                failures.append(f"{variant} gain over {base} has rank correlation {corr:.2f} with {axis}, expected {direction}")
        add("ablation_gain", failures, checked)
    return results


def _axis_means(values: Iterable[tuple[Any, float]]) -> dict[Any, float]:
    acc: dict[Any, list[float]] = {}
    for x, v in values:
        acc.setdefault(x, []).append(v)
    return {x: float(np.mean(v)) for x, v in acc.items()}


def _moves(lo: float, hi: float, direction: str) -> bool:
    return hi > lo if direction == "increasing" else hi < lo


def rank_correlation(xs: list[float], ys: list[float]) -> float | None:
    """Spearman correlation of two samples (average ranks for ties); None when either side is constant."""
    if len(xs) < 2:
        return None
    rx = _ranks(np.asarray(xs, dtype=float))
    ry = _ranks(np.asarray(ys, dtype=float))
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        return None
    return float(np.corrcoef(rx, ry)[0, 1])


def _ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=float)
    ranks[order] = np.arange(len(values), dtype=float)
    for v in np.unique(values):
        tied = values == v
        ranks[tied] = ranks[tied].mean()
    return ranks


def report_ok(report: Mapping[str, Any]) -> bool:
    return report["failed"] == 0 and all(c["ok"] for c in report["checks"])


def mean_by(cells: Iterable[Mapping[str, Any]], axis: str, value: str) -> dict[Any, dict[str, float]]:
    """axis value -> pipeline -> mean of ``value`` over the other coordinates (successful cells)."""
    acc: dict[Any, dict[str, list[float]]] = {}
    for cell in cells:
        if cell["status"] != "ok":
            continue
        acc.setdefault(cell[axis], {}).setdefault(cell["pipeline"], []).append(float(_field(cell, value)))
    return {k: {p: float(np.mean(v)) for p, v in sorted(by.items())} for k, by in sorted(acc.items())}


def _field(cell: Mapping[str, Any], value: str) -> float:
    if value == "span_us":
        return cell["span_ps"] / 1e6
    if value == "flops_per_ps":
        return cell["result"]["expert_flops"] / cell["span_ps"]
    return cell[value]


def primary_baseline(pipelines: Iterable[str]) -> str | None:
    present = set(pipelines)
    for baseline in reversed(BASELINES):
        if baseline.value in present:
            return baseline.value
    return None


def is_ablation(pipelines: Iterable[str]) -> bool:
    knobs = {p.value for p in MH_KNOBS}
    return sum(1 for p in pipelines if p in knobs) > 1
