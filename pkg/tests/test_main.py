from __future__ import annotations

import json

import pytest

from moehub_sim.main import EXIT_CONFIG, EXIT_FAILED, EXIT_IO, EXIT_OK, build_parser, main
from moehub_sim.services.settings import SEED_ENV


@pytest.fixture(autouse=True)
def no_seed_env(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    args = build_parser().parse_args(["-vv", "sweep", "c.json", "--jobs", "3", "--trace"])
    assert (args.verbose, args.command, args.jobs, args.trace) == (2, "sweep", 3, True)


def test_sweep_writes_outputs(config_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["sweep", str(config_file), "--out", str(out)]) == EXIT_OK
    assert (out / "report.json").is_file()
    assert (out / "cells.csv").is_file()
    printed = capsys.readouterr().out
    assert "[ok] ideal_lower_bound" in printed


def test_run_with_traces(config_file, tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(config_file), "--out", str(out), "--trace"]) == EXIT_OK
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert len(report["cells"]) == 3
    for c in report["cells"]:
        lines = (out / c["trace"]).read_text(encoding="utf-8").splitlines()
        assert len(lines) == c["trace_lines"] == c["result"]["events"]["fired"]


def test_run_with_dependency_tables(config_file, tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(config_file), "--out", str(out), "--dependency-tables"]) == EXIT_OK
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    dumped = [c for c in report["cells"] if "dependency_tables" in c]
    assert dumped and all(c["pipeline"] != "ideal" for c in dumped)
    assert all((out / c["dependency_tables"]).is_file() for c in dumped)


def test_seed_flag_overrides_config(config_file, tmp_path):
    out = tmp_path / "out"
    assert main(["run", str(config_file), "--out", str(out), "--seed", "99"]) == EXIT_OK
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert {c["seed"] for c in report["cells"]} == {99}


def test_missing_config_is_a_config_error(tmp_path, capsys):
    assert main(["run", str(tmp_path / "none.json")]) == EXIT_CONFIG
    assert "file not found" in capsys.readouterr().err


def test_invalid_config_lists_every_problem(tmp_path, tiny_config, capsys):
    tiny_config.update(n_gpus=3, colour="red")
    path = write_config(tmp_path, tiny_config)
    assert main(["sweep", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "colour: unknown key" in err
    assert "n_experts not divisible" in err
    assert not (tmp_path / "out").exists()


def test_unwritable_output_is_an_io_error(config_file, tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("", encoding="utf-8")
    assert main(["run", str(config_file), "--out", str(blocker / "out")]) == EXIT_IO


def test_failed_trend_check_exits_nonzero(tmp_path, tiny_config):
    tiny_config["checks"] = {"ideal_ratio_min": 1.5}
    path = write_config(tmp_path, tiny_config)
    assert main(["run", str(path), "--out", str(tmp_path / "out")]) == EXIT_FAILED


def test_ablate_runs_the_variants(config_file, tmp_path):
    out = tmp_path / "out"
    assert main(["ablate", str(config_file), "--out", str(out), "--jobs", "2"]) == EXIT_OK
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["pipelines"] == ["mh_base", "mh_pkt", "mh_dep", "moehub", "mediated_pipelined"]
    assert (out / "fig_ablation.dat").is_file()


def test_validate(config_file, tmp_path):
    out = tmp_path / "out"
    assert main(["validate", str(config_file), "--out", str(out)]) == EXIT_OK
    results = json.loads((out / "validation.json").read_text(encoding="utf-8"))
    assert [r["suite"] for r in results] == ["aau", "rpm", "dam", "readiness", "congestion", "single_gpu", "determinism"]
    assert all(r["ok"] and r["checked"] > 0 for r in results)
