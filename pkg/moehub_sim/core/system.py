"""Assembly of one simulated machine: engine, fabric, GPUs, hubs and the shadow memory model"""

from __future__ import annotations

import logging
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Any

from moehub_sim.core.aau import MallocRegion
from moehub_sim.core.engine import DEFAULT_EVENT_BUDGET, Engine, SimTime, TraceSink
from moehub_sim.core.errors import SafetyViolation
from moehub_sim.core.fabric import Fabric, RoutePolicy, Topology
from moehub_sim.core.gpu import Gpu, GpuTiming
from moehub_sim.core.hub import EgressMode, Hub, HubTiming
from moehub_sim.core.packets import FLIT_BYTES, LINE_BYTES, Packet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimParams:
    """Everything a single simulation instance needs, in integer picoseconds."""

    topology: Topology = field(default_factory=Topology)
    route_policy: RoutePolicy = RoutePolicy.HASHED
    route_salt: int = 0
    high_water: float = 0.75
    loopback_ps: SimTime = 500_000
    gpu: GpuTiming = field(default_factory=GpuTiming)
    hub: HubTiming = field(default_factory=HubTiming)
    host_roundtrip_ps: SimTime = 15_000_000
    pipeline_chunks: int = 4
    store_bytes: int = 64
    bulk_store_bytes: int = 128
    metadata_bytes: int = 16
    combine_dam: bool = True
    topk_ps: SimTime = 500_000
    capacity_factor: float = 1.0
    tile_m: int = 128
    tile_n: int = 128
    event_budget: int = DEFAULT_EVENT_BUDGET
    shadow: bool = True
    utilization_bucket_ps: SimTime = 1_000_000


class ShadowMemory:
    """Byte-coverage bitmap and token tags per region row, independent of the hub counters."""

    def __init__(self) -> None:
        self._regions: dict[int, list[MallocRegion]] = {}
        self._bases: dict[int, list[int]] = {}
        self.coverage: dict[tuple[Any, int], int] = {}
        self.tags: dict[tuple[Any, int], Any] = {}
        self.writes = 0
        self.conflicts = 0

    def add_region(self, gpu: int, region: MallocRegion) -> None:
        bases = self._bases.setdefault(gpu, [])
        regions = self._regions.setdefault(gpu, [])
        at = bisect_right(bases, region.base_addr)
        bases.insert(at, region.base_addr)
        regions.insert(at, region)

    def region_at(self, gpu: int, address: int) -> MallocRegion | None:
        bases = self._bases.get(gpu)
        if not bases:
            return None
        i = bisect_right(bases, address) - 1
        if i < 0:
            return None
        region = self._regions[gpu][i]
        return region if address < region.end_addr else None

    def listener(self, gpu: int):
        def record(packet: Packet, address: int) -> None:
            self.record(gpu, address, packet.mask, packet.tag)

        return record

    def record(self, gpu: int, address: int, mask: int, tag: Any) -> None:
        region = self.region_at(gpu, address)
        if region is None:
            return
        self.writes += 1
        row, col = divmod(address - region.base_addr, region.row_size)
        key = (region.malloc_id, row)
        self.coverage[key] = self.coverage.get(key, 0) | (mask << (col // FLIT_BYTES))
        if tag is not None and col < LINE_BYTES:
            previous = self.tags.setdefault(key, tag)
            if previous != tag:
                self.conflicts += 1
                raise SafetyViolation(f"row {row} of {tuple(region.malloc_id)} written by {previous} and {tag}")

    def check_rows(self, region: MallocRegion, first_row: int, rows: int, counted_bytes: int) -> None:
        """Raise unless every counted byte of rows [first_row, first_row + rows) is present."""
        need = (1 << (counted_bytes // FLIT_BYTES)) - 1
        for row in range(first_row, first_row + rows):
            have = self.coverage.get((region.malloc_id, row), 0)
            if have & need != need:
                missing = (need & ~have).bit_count() * FLIT_BYTES
                raise SafetyViolation(
                    f"thread block started on row {row} of {tuple(region.malloc_id)} with {missing} B unwritten"
                )


class System:
    """One independent simulation instance."""

    def __init__(self, params: SimParams, *, egress: EgressMode = EgressMode.RPM, trace: TraceSink | None = None) -> None:
        self.params = params
        self.engine = Engine(event_budget=params.event_budget, trace=trace)
        self.fabric = Fabric(
            self.engine,
            params.topology,
            policy=params.route_policy,
            high_water=params.high_water,
            loopback_ps=params.loopback_ps,
            salt=params.route_salt,
        )
        self.gpus: list[Gpu] = []
        self.hubs: list[Hub] = []
        self.shadow = ShadowMemory() if params.shadow else None
        for g in range(params.topology.n_gpus):
            gpu = Gpu(self.engine, g, params.gpu)
            hub = Hub(self.engine, g, self.fabric, params.hub, gpu, mode=egress, on_space=gpu.on_store_space)
            gpu.hub = hub
            if self.shadow is not None:
                hub.write_listeners.append(self.shadow.listener(g))
            self.gpus.append(gpu)
            self.hubs.append(hub)
        self.fabric.set_credit_listener(self._on_credit)

    def _on_credit(self, gpu: int) -> None:
        self.hubs[gpu].kick()

    @property
    def n_gpus(self) -> int:
        return len(self.gpus)

    def register_region(self, gpu: int, base_addr: int, row_size: int, capacity_rows: int) -> MallocRegion:
        """rowspMalloc on ``gpu``: install AAU metadata and make the region visible to the shadow model."""
        hub = self.hubs[gpu]
        malloc_id = hub.aau.register_region(base_addr, row_size, capacity_rows, now=self.engine.now)
        region = hub.aau.region(malloc_id)
        if self.shadow is not None:
            self.shadow.add_region(gpu, region)
        return region

    def run(self) -> SimTime:
        return self.engine.run_until()

    def stats(self) -> dict[str, Any]:
        return {
            "events": {"scheduled": self.engine.scheduled, "fired": self.engine.fired},
            "gpus": [dict(g.stats) for g in self.gpus],
            "hubs": [h.report() for h in self.hubs],
        }
