from __future__ import annotations

import pytest

from moehub_sim.core.engine import Engine
from moehub_sim.core.errors import SetupError
from moehub_sim.core.fabric import Fabric, RoutePolicy, Topology, mix64
from moehub_sim.core.packets import Packet, PacketKind


class HubStub:
    """Stands in for a hub: records ingress times and returns credit to the fabric."""

    def __init__(self, gpu: int, fabric_ref: list[Fabric]) -> None:
        self.name = f"hub{gpu}"
        self.arrivals: list[tuple[int, Packet]] = []
        self._fabric = fabric_ref

    def handle(self, event) -> None:
        self.arrivals.append((event.fire_at, event.payload))
        self._fabric[0].delivered(event.payload)

    def is_idle(self) -> bool:
        return True


def build(n_gpus: int = 2, **topology) -> tuple[Engine, Fabric, list[HubStub]]:
    engine = Engine()
    ref: list[Fabric] = []
    hubs = [HubStub(g, ref) for g in range(n_gpus)]
    for hub in hubs:
        engine.register(hub)
    topo = Topology(n_gpus=n_gpus, n_switches=1, gpu_bandwidth=100e9, **topology)
    fabric = Fabric(engine, topo)
    ref.append(fabric)
    return engine, fabric, hubs


def store(src: int, dst: int, addr: int = 0) -> Packet:
    return Packet(src, dst, 128, PacketKind.PLAIN_STORE, 0, phys_addr=addr)


def test_flit_time_on_a_100_gbps_link():
    assert Topology(n_switches=1, gpu_bandwidth=100e9).flit_ps == 160
    assert Topology().link_bandwidth == 100e9


def test_full_line_store_takes_nine_flits():
    assert store(0, 1).flits == 9
    assert Packet(0, 1, 0, PacketKind.WRITE_ACK, 0).flits == 1


def test_one_hop_delivery_time():
    engine, fabric, hubs = build()
    fabric.inject(store(0, 1))
    engine.run_until()
    # two serializations of 9 flits plus two link latencies
    assert hubs[1].arrivals[0][0] == 2 * 9 * 160 + 2 * 250_000 == 502_880
    assert fabric.is_idle()
    assert fabric.delivered_flits == fabric.injected_flits == 9


def test_loopback_skips_the_fabric():
    engine, fabric, hubs = build()
    fabric.inject(store(1, 1))
    engine.run_until()
    assert hubs[1].arrivals[0][0] == 500_000
    assert fabric.injected_flits == 0
    assert fabric.loopback_packets == 1


def test_downstream_port_serializes_two_senders():
    engine, fabric, hubs = build(3)
    fabric.inject(store(0, 1))
    fabric.inject(store(2, 1))
    engine.run_until()
    assert [t for t, _ in hubs[1].arrivals] == [502_880, 504_320]


def test_credit_backpressure_holds_the_uplink():
    engine, fabric, hubs = build(3, queue_packets=1)
    fabric.inject(store(0, 1))
    fabric.inject(store(2, 1))
    engine.run_until()
    # the second packet may only leave gpu2 once the switch->gpu1 queue frees its slot
    assert [t for t, _ in hubs[1].arrivals] == [502_880, 754_320]
    assert fabric.is_idle()


def test_destination_outside_topology_rejected():
    _, fabric, _ = build()
    with pytest.raises(SetupError):
        fabric.inject(store(0, 5))


def test_hashed_routing_is_deterministic():
    engine = Engine()
    fabric = Fabric(engine, Topology(n_gpus=4, n_switches=4), salt=3)
    picks = [fabric.candidate_switch(0, 2, key) for key in range(64)]
    assert picks == [mix64(0, 2, key, 3) % 4 for key in range(64)]
    assert len(set(picks)) == 4


def test_round_robin_routing_cycles_switches():
    engine = Engine()
    fabric = Fabric(engine, Topology(n_gpus=2, n_switches=4), policy=RoutePolicy.ROUND_ROBIN)
    picks = [fabric.route(store(0, 1, addr=128 * i)) for i in range(6)]
    assert picks == [0, 1, 2, 3, 0, 1]


def test_link_report_counts_busy_time():
    engine, fabric, _ = build()
    fabric.inject(store(0, 1))
    end = engine.run_until()
    report = fabric.link_report(0, end)
    up = report["links"]["gpu0->sw0"]
    down = report["links"]["sw0->gpu1"]
    assert up["flits"] == down["flits"] == 9
    assert up["utilization"] == pytest.approx(1440 / 502_880)
    assert report["links"]["sw0->gpu0"]["utilization"] == 0.0
    assert report["down_min"] == 0.0


def test_utilization_timeline_buckets():
    engine, fabric, _ = build()
    fabric.inject(store(0, 1))
    end = engine.run_until()
    timeline = fabric.utilization_timeline(0, end, 100_000)
    assert timeline[0][0] == 0
    assert all(0.0 <= low <= mean <= 1.0 for _, low, mean in timeline)
    # the downlink is busy in [251440, 252880)
    busy = [mean for t, _, mean in timeline if t == 200_000]
    assert busy == [pytest.approx(1440 / 100_000 / 2)]
    assert fabric.utilization_timeline(0, end, 0) == []
