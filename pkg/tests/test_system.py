from __future__ import annotations

import pytest

from moehub_sim.core.errors import SafetyViolation
from moehub_sim.core.fabric import Topology
from moehub_sim.core.hub import EgressMode
from moehub_sim.core.packets import LogicalDest, Priority, StoreRequest
from moehub_sim.core.system import SimParams, System

PARAMS = SimParams(topology=Topology(n_gpus=2, n_switches=1, gpu_bandwidth=100e9))


def halves(src: int, dst: int, mid, row: int) -> list[StoreRequest]:
    return [StoreRequest(src, dst, 64, Priority.HIGH, logical_dest=LogicalDest(mid, row, offset)) for offset in (0, 64)]


def run_two_halves(egress: EgressMode, src: int = 0):
    system = System(PARAMS, egress=egress)
    region = system.register_region(1, 0x10000, 256, 4)
    system.gpus[src].issue_stores(halves(src, 1, region.malloc_id, 42), 0)
    system.run()
    return system, region


def test_rowsp_store_lands_in_the_first_free_row():
    system, region = run_two_halves(EgressMode.RPM)
    hub0, hub1 = system.hubs
    assert hub1.aau.allocations(region.malloc_id) == {42: 0}
    assert system.shadow.coverage[(region.malloc_id, 0)] == 0xFF
    assert hub0.rpm.stats.merges == 1
    assert hub0.stats["packets_sent"] == 1
    assert hub0.stats["acks_received"] == 1
    assert system.fabric.is_idle()


def test_fifo_egress_sends_one_packet_per_store():
    system, region = run_two_halves(EgressMode.FIFO)
    hub0, hub1 = system.hubs
    assert hub0.stats["packets_sent"] == 2
    assert hub0.stats["acks_received"] == 2
    assert hub1.stats["writes"] == 2
    assert system.shadow.coverage[(region.malloc_id, 0)] == 0xFF


def test_local_stores_use_loopback():
    system, region = run_two_halves(EgressMode.RPM, src=1)
    hub1 = system.hubs[1]
    assert hub1.stats["local_stores"] == 2
    assert hub1.stats["acks_sent"] == 0
    assert system.fabric.injected_flits == 0
    assert system.fabric.loopback_packets == 2
    assert hub1.stats["loopback_writes"] == 2
    assert hub1.aau.allocated_rows(region.malloc_id) == 1


def test_shadow_memory_catches_unwritten_bytes():
    system, region = run_two_halves(EgressMode.RPM)
    system.shadow.check_rows(region, 0, 1, 128)
    with pytest.raises(SafetyViolation, match="unwritten"):
        system.shadow.check_rows(region, 0, 1, 256)


def test_shadow_memory_rejects_two_tokens_in_one_row():
    system = System(PARAMS)
    region = system.register_region(1, 0x10000, 256, 4)
    with pytest.raises(SafetyViolation, match="written by"):
        system.shadow.record(1, 0x10000, 0x0F, (1, 0))
        system.shadow.record(1, 0x10040, 0xF0, (2, 0))
    assert system.shadow.conflicts == 1
    assert system.shadow.region_at(1, 0x10000 + 4 * 256) is None
    assert system.shadow.region_at(0, 0x10000) is None
    assert region.end_addr == 0x10400
