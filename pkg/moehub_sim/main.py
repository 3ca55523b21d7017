from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from moehub_sim.core.errors import ConfigError

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3

logger = logging.getLogger("moehub_sim")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moehub_sim", description="MoE-Hub layer simulator")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("run", "simulate the config's single point under every pipeline"),
        ("sweep", "simulate the full grid"),
        ("ablate", "grid over the MoE-Hub ablation variants against the pipelined baseline"),
        ("validate", "run the property suites on tiny randomized instances"),
    ):
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("config", type=Path)
        cmd.add_argument("--seed", type=int, default=None, help="override the config seed")
        cmd.add_argument("--out", type=Path, default=None, help="output directory (default: config output.dir)")
        if name != "validate":
            cmd.add_argument("--trace", action="store_true", help="write one NDJSON event trace per cell")
            cmd.add_argument("--dependency-tables", action="store_true", help="write each cell's DAM dependency tables as JSON")
            cmd.add_argument("--jobs", type=int, default=1, help="grid cells simulated concurrently")
    return parser


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _print_cells(report: dict[str, Any]) -> None:
    for cell in report["cells"]:
        if cell["status"] == "ok":
            print(f"{cell['cell']:<60} {cell['span_ps'] / 1e6:12.3f} us")
        else:
            print(f"{cell['cell']:<60} FAILED {cell['error']}")
    for entry in report["summary"]:
        ratios = {k: v for k, v in entry.items() if k.startswith(("moehub_over_", "ideal_over_")) and v is not None}
        if ratios:
            print("  ".join(f"{k}={v:.3f}" for k, v in ratios.items()))
    for check in report["checks"]:
        print(f"[{'ok' if check['ok'] else 'FAIL'}] {check['name']}: {check['detail']}")


def _run(args: argparse.Namespace, resolved: dict[str, Any], out: Path) -> int:
    from moehub_sim.services.experiment import ABLATION_PIPELINES, report_ok, run_experiment
    from moehub_sim.services.fs_service import ensure_output_dir
    from moehub_sim.services.report_store import emit_outputs

    ensure_output_dir(out)
    trace = args.trace or resolved["output"]["trace"]
    tables = args.dependency_tables or resolved["output"]["dependency_tables"]
    pipelines = ABLATION_PIPELINES if args.command == "ablate" else None
    report = run_experiment(resolved, command=args.command, pipelines=pipelines, jobs=max(1, args.jobs),
                            trace_dir=out if trace else None, tables_dir=out if tables else None)
    emit_outputs(report, out)
    _print_cells(report)
    return EXIT_OK if report_ok(report) else EXIT_FAILED


def _validate(args: argparse.Namespace, resolved: dict[str, Any], out: Path) -> int:
    from moehub_sim.services.fs_service import ensure_output_dir
    from moehub_sim.services.validation import run_validation

    results = run_validation(resolved["seed"], resolved)
    ensure_output_dir(out)
    (out / "validation.json").write_text(json.dumps(results, ensure_ascii=False, indent=2, sort_keys=True), encoding="utf-8")
    for res in results:
        print(f"[{'ok' if res['ok'] else 'FAIL'}] {res['suite']}: {res['checked']} checks")
        for line in res["violations"]:
            print(f"    {line}")
    return EXIT_OK if all(r["ok"] for r in results) else EXIT_FAILED


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    from moehub_sim.services.settings import load_config

    try:
        resolved = load_config(args.config, seed=args.seed)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out if args.out is not None else Path(resolved["output"]["dir"])
    try:
        if args.command == "validate":
            return _validate(args, resolved, out)
        return _run(args, resolved, out)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
