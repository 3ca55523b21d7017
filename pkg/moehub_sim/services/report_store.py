"""Report persistence: report.json, CSV tables and plot-ready data files"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Mapping, TypedDict

import pandas as pd

from moehub_sim.services.attribution import BUCKETS
from moehub_sim.services.experiment import (
    AXES,
    is_ablation,
    mean_by,
    primary_baseline,
)
from moehub_sim.services.fs_service import ensure_output_dir, stale_outputs
from moehub_sim.services.pipelines import MH_KNOBS
from moehub_sim.services.settings import SCHEMA_VERSION

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"


class MetricsReport(TypedDict, total=False):
    schema_version: int
    name: str
    command: str
    config: dict[str, Any]
    params: dict[str, Any]
    pipelines: list[str]
    axes: dict[str, list[Any]]
    cells: list[dict[str, Any]]
    speedups: list[dict[str, Any]]
    summary: list[dict[str, Any]]
    checks: list[dict[str, Any]]
    failed: int


_DEFAULT_REPORT: MetricsReport = {
    "schema_version": SCHEMA_VERSION,
    "name": "",
    "command": "",
    "config": {},
    "params": {},
    "pipelines": [],
    "axes": {},
    "cells": [],
    "speedups": [],
    "summary": [],
    "checks": [],
    "failed": 0,
}


def save_report(report: Mapping[str, Any], folder: str | Path) -> Path:
    path = Path(folder) / REPORT_FILE
    merged: MetricsReport = dict(_DEFAULT_REPORT)  # type: ignore[assignment]
    merged.update({k: v for k, v in report.items() if k in _DEFAULT_REPORT})  # type: ignore[typeddict-item]
    path.write_text(json.dumps(merged, ensure_ascii=False, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_report(path: str | Path) -> MetricsReport:
    """Read a saved report; unknown keys are dropped, missing ones defaulted."""
    target = Path(path)
    if target.is_dir():
        target = target / REPORT_FILE
    data = json.loads(target.read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError(f"{target}: not a report object")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{target}: unsupported report schema {data.get('schema_version')!r}")
    report: MetricsReport = dict(_DEFAULT_REPORT)  # type: ignore[assignment]
    report.update({k: v for k, v in data.items() if k in _DEFAULT_REPORT})  # type: ignore[typeddict-item]
    return report


# -- tables ------------------------------------------------------------------
def cell_rows(cells: list[Mapping[str, Any]]) -> list[dict[str, Any]]:
    rows = []
    for cell in cells:
        row = {axis: cell[axis] for axis in AXES}
        row.update(pipeline=cell["pipeline"], status=cell["status"], realized_std=cell["routing"]["realized_std"])
        result = cell.get("result")
        if result is not None:
            link = result["link_report"]
            row.update(
                span_ps=result["span_ps"],
                span_us=result["span_ps"] / 1e6,
                critical_gpu=result["critical_gpu"],
                tokens_delivered=result["tokens_delivered"],
                combined_outputs=result["combined_outputs"],
                pairs_ok=result["pairs_ok"],
                down_min=link["down_min"],
                down_mean=link["down_mean"],
                up_mean=link["up_mean"],
                events=result["events"]["fired"],
            )
            row.update({f"bd_{b}_ps": result["breakdown"][b] for b in BUCKETS})
        row["error"] = cell.get("error", "")
        rows.append(row)
    return rows


def _write_dat(path: Path, header: str, frame: pd.DataFrame) -> None:
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"# {header}\n# {' '.join(str(c) for c in frame.columns)}\n")
        frame.to_csv(fh, sep=" ", header=False, index=False, na_rep="nan", float_format="%.6g")


def _axis_frame(by: dict[Any, dict[str, float]], axis: str, pipelines: list[str]) -> pd.DataFrame:
    rows = [{axis: key, **{p: values.get(p) for p in pipelines}} for key, values in by.items()]
    return pd.DataFrame(rows, columns=[axis, *pipelines])


def _utilization_blocks(path: Path, cells: list[Mapping[str, Any]], pipelines: list[str]) -> bool:
    """Link-utilization timelines of the first grid point, one gnuplot index block per pipeline."""
    ok = [c for c in cells if c["status"] == "ok"]
    if not ok:
        return False
    first = tuple(ok[0][a] for a in AXES)
    blocks = [c for c in ok if tuple(c[a] for a in AXES) == first]
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"# switch->GPU link utilization, {dict(zip(AXES, first))}\n")
        for i, cell in enumerate(sorted(blocks, key=lambda c: pipelines.index(c["pipeline"]))):
            if i:
                fh.write("\n\n")
            fh.write(f"# pipeline {cell['pipeline']}\n# t_us down_min down_mean\n")
            for t, lo, mean in cell["result"]["timeline"]:
                fh.write(f"{t / 1e6:.6g} {lo:.6g} {mean:.6g}\n")
    return True


def emit_outputs(report: Mapping[str, Any], folder: str | Path, *, formats: set[str] | None = None) -> list[Path]:
    """Write report.json, CSV tables and plot data; traces are streamed by the cells themselves."""
    formats = formats or {"json", "csv", "plotdata"}
    out = ensure_output_dir(folder)
    written: list[Path] = []
    cells = report["cells"]
    pipelines = list(report["pipelines"])
    axes = report["axes"]
    swept = [axis for axis in AXES if len(axes.get(axis, [])) > 1]

    if "json" in formats:
        written.append(save_report(report, out))

    if "csv" in formats:
        path = out / "cells.csv"
        pd.DataFrame(cell_rows(cells)).to_csv(path, index=False)
        written.append(path)
        path = out / "speedup.csv"
        pd.DataFrame(report["speedups"], columns=[*AXES, "baseline", "variant", "speedup"]).to_csv(path, index=False)
        written.append(path)
        for axis in swept:
            path = out / f"by_{axis}.csv"
            _axis_frame(mean_by(cells, axis, "span_us"), axis, pipelines).to_csv(path, index=False)
            written.append(path)

    if "plotdata" in formats:
        path = out / "fig_link_utilization.dat"
        if _utilization_blocks(path, cells, pipelines):
            written.append(path)
        baseline = primary_baseline(pipelines)
        speedups = [s for s in report["speedups"] if s["baseline"] == baseline]
        if "seq_len_per_gpu" in swept and baseline is not None:
            by: dict[Any, dict[str, list[float]]] = {}
            for s in speedups:
                tokens = s["seq_len_per_gpu"] * s["n_gpus"]
                by.setdefault(tokens, {}).setdefault(s["variant"], []).append(s["speedup"])
            mean = {k: {p: sum(v) / len(v) for p, v in d.items()} for k, d in sorted(by.items())}
            path = out / "fig_speedup_vs_tokens.dat"
            _write_dat(path, f"speedup over {baseline} vs tokens", _axis_frame(mean, "tokens", pipelines))
            written.append(path)
        if "target_std" in swept:
            path = out / "fig_span_vs_std.dat"
            _write_dat(path, "layer span (us) vs expert-load std", _axis_frame(mean_by(cells, "target_std", "span_us"), "target_std", pipelines))
            written.append(path)
        if is_ablation(pipelines) and baseline is not None:
            bars: dict[str, list[float]] = {}
            for s in speedups:
                if s["variant"] in {p.value for p in MH_KNOBS}:
                    bars.setdefault(s["variant"], []).append(s["speedup"])
            frame = pd.DataFrame(
                [{"variant": p, "speedup": sum(bars[p]) / len(bars[p])} for p in pipelines if p in bars],
                columns=["variant", "speedup"],
            )
            path = out / "fig_ablation.dat"
            _write_dat(path, f"speedup over {baseline}", frame)
            written.append(path)
        if "n_gpus" in swept:
            flops = mean_by(cells, "n_gpus", "flops_per_ps")
            smallest = next(iter(flops.values()), {})
            norm = {n: {p: v / smallest[p] if smallest.get(p) else None for p, v in d.items()} for n, d in flops.items()}
            path = out / "fig_scaling.dat"
            _write_dat(path, "expert FLOPS normalized to the smallest GPU count", _axis_frame(norm, "n_gpus", pipelines))
            written.append(path)

    logger.info("wrote %d file(s) to %s", len(written), out)
    streamed = [out / f"trace_{c['cell']}.ndjson" for c in cells if "trace_lines" in c]
    streamed += [out / c["dependency_tables"] for c in cells if "dependency_tables" in c]
    for path in stale_outputs(out, [*written, *streamed]):
        logger.warning("%s is left over from an earlier run", path.name)
    return written
