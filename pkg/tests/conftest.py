from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import pytest

from moehub_sim.core.engine import Rng
from moehub_sim.core.system import SimParams
from moehub_sim.services.validation import TINY_MODEL, tiny_params
from moehub_sim.services.workload import MoeConfig, RoutingResult, generate_routing


class Recorder:
    """Minimal engine component that records the events it receives."""

    def __init__(self, name: str, *, idle: bool = True) -> None:
        self.name = name
        self.idle = idle
        self.events: list[tuple[int, str, Any]] = []
        self.engine = None

    def handle(self, event) -> None:
        self.events.append((event.fire_at, event.kind, event.payload))

    def is_idle(self) -> bool:
        return self.idle


class RecordingSink:
    """Tile sink that remembers DAM decisions."""

    def __init__(self) -> None:
        self.released: list[tuple[int, int, int, int, int]] = []
        self.flags: list[tuple[int, int, int, int, int]] = []
        self.deallocated: list[tuple[int, int, int]] = []

    def release_tile(self, kernel_id: int, segment: int, tile: int, rows: int, at: int) -> None:
        self.released.append((kernel_id, segment, tile, rows, at))

    def set_tile_flag(self, kernel_id: int, segment: int, tile: int, rows: int, at: int) -> None:
        self.flags.append((kernel_id, segment, tile, rows, at))

    def deallocate_tile(self, kernel_id: int, segment: int, tile: int) -> None:
        self.deallocated.append((kernel_id, segment, tile))


@pytest.fixture
def tiny_cfg() -> MoeConfig:
    return TINY_MODEL


@pytest.fixture
def tiny_sim_params() -> SimParams:
    return tiny_params(None)


@pytest.fixture
def tiny_routing(tiny_cfg: MoeConfig) -> RoutingResult:
    return generate_routing(tiny_cfg, 0.03, Rng(7))


@pytest.fixture
def tiny_config() -> dict[str, Any]:
    """User config for a few-token, two-GPU experiment."""
    return {
        "schema_version": 1,
        "name": "tiny",
        "seed": 11,
        "model": {"name": "tiny", "hidden_size": 256, "ffn_hidden_size": 512, "n_experts": 4, "top_k": 2},
        "n_gpus": 2,
        "seq_len_per_gpu": 32,
        "target_std": 0.02,
        "pipelines": ["ideal", "moehub", "mediated_nonoverlap"],
        "gpu": {"n_sms": 16, "tile_m": 32, "tile_n": 64},
        "grid": {"seq_len_per_gpu": [16, 32]},
        "checks": {"ideal_lower_bound": True},
    }


@pytest.fixture
def config_file(tmp_path: Path, tiny_config: dict[str, Any]) -> Path:
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config), encoding="utf-8")
    return path
