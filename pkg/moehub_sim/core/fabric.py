"""Single-tier GPU/switch interconnect with flit serialization and credit backpressure"""

from __future__ import annotations

import logging
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable

from moehub_sim.core.engine import Engine, Event, SimTime, ps_per_unit
from moehub_sim.core.errors import SetupError
from moehub_sim.core.packets import FLIT_BYTES, Packet

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1


class RoutePolicy(Enum):
    HASHED = "hashed"
    ROUND_ROBIN = "round_robin"


@dataclass(frozen=True)
class Topology:
    """Every GPU connects to every switch; a GPU's bandwidth is split evenly over its uplinks."""

    n_gpus: int = 8
    n_switches: int = 4
    gpu_bandwidth: float = 400e9  # bytes/s, per GPU and direction
    link_latency_ps: SimTime = 250_000
    queue_packets: int = 256
    egress_queue_packets: int = 4

    @property
    def link_bandwidth(self) -> float:
        return self.gpu_bandwidth / self.n_switches

    @property
    def flit_ps(self) -> SimTime:
        return ps_per_unit(FLIT_BYTES, self.link_bandwidth)

    def links(self) -> list[tuple[str, str, float, SimTime]]:
        """(endpoint A, endpoint B, bandwidth, latency) for each direction."""
        out = []
        for g in range(self.n_gpus):
            for s in range(self.n_switches):
                out.append((f"gpu{g}", f"sw{s}", self.link_bandwidth, self.link_latency_ps))
                out.append((f"sw{s}", f"gpu{g}", self.link_bandwidth, self.link_latency_ps))
        return out


def mix64(*values: int) -> int:
    """Platform-independent integer hash (splitmix64 finalizer over the inputs)."""
    h = 0x9E3779B97F4A7C15
    for v in values:
        h = (h ^ (v & _MASK64)) & _MASK64
        h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & _MASK64
        h ^= h >> 31
    return h


class Link:
    """One direction of a GPU<->switch link: FIFO data queue, control queue, busy intervals."""

    __slots__ = (
        "name", "index", "uplink", "gpu", "switch", "flit_ps", "latency_ps", "capacity",
        "data", "control", "inbound", "busy", "busy_until", "cumulative_busy",
        "cumulative_flits", "packets", "starts", "ends", "flits_per_interval", "blocked", "blocked_uplinks",
    )

    def __init__(self, index: int, uplink: bool, gpu: int, switch: int, flit_ps: int, latency_ps: int, capacity: int) -> None:
        self.index = index
        self.uplink = uplink
        self.gpu = gpu
        self.switch = switch
        self.name = f"gpu{gpu}->sw{switch}" if uplink else f"sw{switch}->gpu{gpu}"
        self.flit_ps = flit_ps
        self.latency_ps = latency_ps
        self.capacity = capacity
        self.data: deque[Packet] = deque()
        self.control: deque[Packet] = deque()
        self.inbound = 0
        self.busy = False
        self.busy_until = 0
        self.cumulative_busy = 0
        self.cumulative_flits = 0
        self.packets = 0
        self.starts: list[int] = []
        self.ends: list[int] = []
        self.flits_per_interval: list[int] = []
        self.blocked = False
        self.blocked_uplinks: list[Link] = []

    @property
    def occupancy(self) -> int:
        return len(self.data) + self.inbound

    def has_credit(self) -> bool:
        return self.occupancy < self.capacity

    def record(self, start: int, end: int, flits: int) -> None:
        self.cumulative_busy += end - start
        self.cumulative_flits += flits
        self.packets += 1
        if self.ends and self.ends[-1] == start:
            self.ends[-1] = end
            self.flits_per_interval[-1] += flits
        else:
            self.starts.append(start)
            self.ends.append(end)
            self.flits_per_interval.append(flits)

    def busy_within(self, start: int, end: int) -> tuple[int, int]:
        """(busy ps, flits) inside [start, end)."""
        busy = 0
        flits = 0
        i = bisect_right(self.ends, start)
        starts, ends, per = self.starts, self.ends, self.flits_per_interval
        while i < len(starts) and starts[i] < end:
            s, e = starts[i], ends[i]
            overlap = min(e, end) - max(s, start)
            if overlap > 0:
                busy += overlap
                flits += per[i] if overlap == e - s else overlap // self.flit_ps
            i += 1
        return busy, flits


class Fabric:
    """Output-queued switches; store-and-forward per hop; loopback for same-GPU stores."""

    name = "fabric"

    def __init__(
        self,
        engine: Engine,
        topology: Topology,
        *,
        policy: RoutePolicy = RoutePolicy.HASHED,
        high_water: float = 0.75,
        loopback_ps: SimTime = 500_000,
        salt: int = 0,
    ) -> None:
        if topology.n_gpus < 1 or topology.n_switches < 1:
            raise SetupError("topology needs at least one GPU and one switch")
        self.engine = engine
        self.topology = topology
        self.policy = policy
        self.high_water_packets = max(1, int(topology.queue_packets * high_water))
        self.loopback_ps = loopback_ps
        self.salt = salt
        flit_ps = topology.flit_ps
        self.flit_ps = flit_ps
        n_g, n_s = topology.n_gpus, topology.n_switches
        self.up: list[list[Link]] = []
        self.down: list[list[Link]] = []
        self.links: list[Link] = []
        for g in range(n_g):
            row = []
            for s in range(n_s):
                link = Link(len(self.links), True, g, s, flit_ps, topology.link_latency_ps, topology.egress_queue_packets)
                self.links.append(link)
                row.append(link)
            self.up.append(row)
        for g in range(n_g):
            row = []
            for s in range(n_s):
                link = Link(len(self.links), False, g, s, flit_ps, topology.link_latency_ps, topology.queue_packets)
                self.links.append(link)
                row.append(link)
            self.down.append(row)
        self._rr = [0] * n_g
        self._credit_listener: Callable[[int], None] | None = None
        self._congestion_waiters: list[set[int]] = [set() for _ in self.links]
        self.injected_flits = 0
        self.delivered_flits = 0
        self.injected_packets = 0
        self.delivered_packets = 0
        self.loopback_packets = 0
        self.loopback_pending = 0
        self.record_packets = False
        self.packet_log: list[tuple[int, int, int, int, int]] = []
        engine.register(self)

    # -- routing ------------------------------------------------------------
    def candidate_switch(self, src: int, dst: int, key: int) -> int:
        n = self.topology.n_switches
        if self.policy is RoutePolicy.ROUND_ROBIN:
            return self._rr[src] % n
        return mix64(src, dst, key, self.salt) % n

    def route(self, packet: Packet) -> int:
        """Pick (and commit) the switch for a remote packet."""
        switch = self.candidate_switch(packet.src_gpu, packet.dst_gpu, packet.routing_key)
        if self.policy is RoutePolicy.ROUND_ROBIN:
            self._rr[packet.src_gpu] += 1
        return switch

    # -- credit queries used by hub egress ---------------------------------
    def set_credit_listener(self, listener: Callable[[int], None]) -> None:
        self._credit_listener = listener

    def egress_ready(self, src: int, switch: int) -> bool:
        return self.up[src][switch].has_credit()

    def any_egress_ready(self, src: int) -> bool:
        return any(link.has_credit() for link in self.up[src])

    def downstream_congested(self, switch: int, dst: int) -> bool:
        return self.down[dst][switch].occupancy >= self.high_water_packets

    def downstream_full(self, switch: int, dst: int) -> bool:
        return not self.down[dst][switch].has_credit()

    def wait_for_drain(self, switch: int, dst: int, gpu: int) -> None:
        """Ask to be told (via the credit listener) when the switch->dst queue drains."""
        self._congestion_waiters[self.down[dst][switch].index].add(gpu)

    # -- injection ----------------------------------------------------------
    def inject(self, packet: Packet) -> None:
        engine = self.engine
        if not 0 <= packet.dst_gpu < self.topology.n_gpus:
            raise SetupError(f"destination gpu{packet.dst_gpu} outside topology")
        if packet.src_gpu == packet.dst_gpu:
            self.loopback_packets += 1
            self.loopback_pending += 1
            engine.schedule(engine.now + self.loopback_ps, f"hub{packet.dst_gpu}", "ingress", packet)
            return
        if packet.switch < 0:
            packet.switch = self.route(packet)
        link = self.up[packet.src_gpu][packet.switch]
        if packet.kind.is_data:
            link.data.append(packet)
        else:
            link.control.append(packet)
        self.injected_flits += packet.flits
        self.injected_packets += 1
        if not link.busy and not link.blocked:
            self._start(link)

    def delivered(self, packet: Packet) -> None:
        """Called by the receiving hub when a packet reaches its ingress."""
        if packet.src_gpu == packet.dst_gpu:
            self.loopback_pending -= 1
            return
        self.delivered_flits += packet.flits
        self.delivered_packets += 1
        if self.record_packets:
            self.packet_log.append((packet.src_gpu, packet.dst_gpu, packet.switch, packet.issue_time, self.engine.now))

    @property
    def in_flight_flits(self) -> int:
        return self.injected_flits - self.delivered_flits

    # -- link machinery -----------------------------------------------------
    def _start(self, link: Link) -> None:
        if link.control:
            packet = link.control.popleft()
        elif link.data:
            packet = link.data[0]
            if link.uplink:
                downstream = self.down[packet.dst_gpu][packet.switch]
                if not downstream.has_credit():
                    link.blocked = True
                    downstream.blocked_uplinks.append(link)
                    return
                downstream.inbound += 1
            link.data.popleft()
            self._on_dequeue(link)
        else:
            return
        now = self.engine.now
        end = now + packet.flits * link.flit_ps
        link.busy = True
        link.busy_until = end
        link.record(now, end, packet.flits)
        self.engine.schedule(end, self.name, "tx_done", (link, packet))

    def _on_dequeue(self, link: Link) -> None:
        if link.uplink:
            if self._credit_listener is not None:
                self._credit_listener(link.gpu)
            return
        if link.blocked_uplinks:
            waiting = link.blocked_uplinks
            link.blocked_uplinks = []
            for up in waiting:
                up.blocked = False
                if not up.busy:
                    self._start(up)
        waiters = self._congestion_waiters[link.index]
        if waiters and link.occupancy < self.high_water_packets and self._credit_listener is not None:
            self._congestion_waiters[link.index] = set()
            for gpu in sorted(waiters):
                self._credit_listener(gpu)

    def handle(self, event: Event) -> None:
        if event.kind == "tx_done":
            link, packet = event.payload
            link.busy = False
            if link.uplink:
                self.engine.schedule_in(link.latency_ps, self.name, "switch_arrival", packet)
            else:
                self.engine.schedule_in(link.latency_ps, f"hub{packet.dst_gpu}", "ingress", packet)
            if not link.blocked:
                self._start(link)
        elif event.kind == "switch_arrival":
            packet = event.payload
            link = self.down[packet.dst_gpu][packet.switch]
            if packet.kind.is_data:
                link.inbound -= 1
                link.data.append(packet)
            else:
                link.control.append(packet)
            self.engine.annotate(link=link.name, occupancy=link.occupancy)
            if not link.busy:
                self._start(link)
        else:
            raise ValueError(f"fabric: unknown event kind {event.kind}")

    def is_idle(self) -> bool:
        return self.in_flight_flits == 0 and self.loopback_pending == 0

    # -- reporting ----------------------------------------------------------
    def link_report(self, start: SimTime, end: SimTime) -> dict:
        """Per-direction utilization and flit counts over [start, end)."""
        window = end - start
        links: dict[str, dict] = {}
        down_utils: list[float] = []
        up_utils: list[float] = []
        for link in self.links:
            if window > 0:
                busy, flits = link.busy_within(start, end)
                util = busy / window
            else:
                busy, flits, util = 0, 0, 0.0
            links[link.name] = {"direction": "up" if link.uplink else "down", "utilization": util, "flits": flits}
            (up_utils if link.uplink else down_utils).append(util)
        return {
            "window_ps": [start, end],
            "links": links,
            "down_min": min(down_utils) if down_utils and window > 0 else 0.0,
            "down_mean": sum(down_utils) / len(down_utils) if down_utils and window > 0 else 0.0,
            "up_mean": sum(up_utils) / len(up_utils) if up_utils and window > 0 else 0.0,
            "injected_flits": self.injected_flits,
            "delivered_flits": self.delivered_flits,
        }

    def utilization_timeline(self, start: SimTime, end: SimTime, bucket_ps: SimTime) -> list[tuple[int, float, float]]:
        """(bucket start, min, mean) switch->GPU utilization per time bucket."""
        out = []
        if bucket_ps <= 0:
            return out
        t = start
        while t < end:
            t_end = min(t + bucket_ps, end)
            utils = [link.busy_within(t, t_end)[0] / (t_end - t) for link in self.links if not link.uplink]
            out.append((t, min(utils), sum(utils) / len(utils)))
            t = t_end
        return out
