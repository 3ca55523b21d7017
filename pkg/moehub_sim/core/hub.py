"""Per-GPU hub: egress packet management, ingress allocation, write completion and acks"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable

from moehub_sim.core.aau import AddressAllocationUnit
from moehub_sim.core.dam import CountMode, DataAvailabilityManager, TileSink
from moehub_sim.core.engine import Engine, Event, SimTime
from moehub_sim.core.errors import SetupError
from moehub_sim.core.fabric import Fabric
from moehub_sim.core.packets import LINE_BYTES, LogicalDest, Packet, PacketKind, Priority, StoreRequest
from moehub_sim.core.rpm import BufferEntry, EgressCheck, RuntimePacketManager

logger = logging.getLogger(__name__)


class EgressMode(Enum):
    RPM = "rpm"
    FIFO = "fifo"  # arrival order, one packet per store, no merging


@dataclass(frozen=True)
class HubTiming:
    ingress_ps: SimTime = 10_000
    cycle_ps: SimTime = 625
    write_acks: bool = True
    rpm_entries: int = 64
    bypass_ps: SimTime = 2_000_000
    mask_first: bool = True
    rowid_priority: bool = True
    hold_partial: bool = True
    rat_capacity: int = 4096
    rat_banks: int = 16
    recover_penalty_ps: SimTime = 600_000
    spill_write_ps: SimTime = 100_000
    mmio_latency_ps: SimTime = 2_000_000
    signal_latency_ps: SimTime = 100_000
    count_mode: CountMode = CountMode.COVERAGE


def request_packet(request: StoreRequest, now: SimTime) -> Packet:
    """Unmerged single-store packet (loopback and FIFO egress)."""
    if request.logical_dest is not None:
        dest = request.logical_dest
        base = LogicalDest(dest.malloc_id, dest.row_id, dest.row_offset - dest.row_offset % LINE_BYTES)
        kind = PacketKind.ROWSP if request.priority is Priority.HIGH else PacketKind.ROWSP_NOP
        return Packet(request.src_gpu, request.dst_gpu, request.size, kind, now, logical_dest=base, mask=request.mask, tag=request.tag)
    line = request.phys_addr - request.phys_addr % LINE_BYTES  # type: ignore[operator]
    return Packet(request.src_gpu, request.dst_gpu, request.size, PacketKind.PLAIN_STORE, now, phys_addr=line, mask=request.mask, tag=request.tag)


class Hub:
    def __init__(
        self,
        engine: Engine,
        gpu_id: int,
        fabric: Fabric,
        timing: HubTiming,
        sink: TileSink,
        *,
        mode: EgressMode = EgressMode.RPM,
        on_space: Callable[[], None] | None = None,
    ) -> None:
        self.engine = engine
        self.gpu_id = gpu_id
        self.name = f"hub{gpu_id}"
        self.fabric = fabric
        self.timing = timing
        self.mode = mode
        self.on_space = on_space
        peers = [g for g in range(fabric.topology.n_gpus) if g != gpu_id]
        self.aau = AddressAllocationUnit(
            gpu_id,
            rat_capacity=timing.rat_capacity,
            rat_banks=timing.rat_banks,
            recover_penalty_ps=timing.recover_penalty_ps,
            spill_write_ps=timing.spill_write_ps,
            mmio_latency_ps=timing.mmio_latency_ps,
        )
        self.rpm = RuntimePacketManager(
            gpu_id,
            peers,
            entries=timing.rpm_entries,
            bypass_ps=timing.bypass_ps,
            mask_first=timing.mask_first,
            rowid_priority=timing.rowid_priority,
            hold_partial=timing.hold_partial,
        )
        self.fifo: deque[Packet] = deque()
        self.fifo_capacity = max(1, timing.rpm_entries * max(1, len(peers)))
        self.dam = DataAvailabilityManager(gpu_id, engine, sink, signal_latency_ps=timing.signal_latency_ps, count_mode=timing.count_mode)
        self.on_control: Callable[[Packet], None] | None = None
        self.write_listeners: list[Callable[[Packet, int], None]] = []
        self._arb_pending = False
        self._timer_at: SimTime | None = None
        self._stalled = False
        self._ingress_free: SimTime = 0
        self.pending_writes = 0
        self.stats = {"local_stores": 0, "loopback_writes": 0, "packets_sent": 0, "writes": 0, "acks_sent": 0, "acks_received": 0,
                      "control_received": 0, "aau_penalty_ps": 0, "fifo_peak": 0}
        engine.register(self)

    # -- egress -------------------------------------------------------------
    def accept(self, request: StoreRequest) -> bool:
        """Take one store from the local SMs; False asks the issuer to stall."""
        now = self.engine.now
        if request.dst_gpu == self.gpu_id:
            self.stats["local_stores"] += 1
            self.fabric.inject(request_packet(request, now))
            return True
        if self.mode is EgressMode.RPM:
            if not self.rpm.enqueue(request, now):
                self._stalled = True
                return False
            if self.timing.bypass_ps == 0:
                self.rpm.timer_bypass(now)
            else:
                self._arm_timer()
        else:
            if len(self.fifo) >= self.fifo_capacity:
                self._stalled = True
                return False
            self.fifo.append(request_packet(request, now))
            if len(self.fifo) > self.stats["fifo_peak"]:
                self.stats["fifo_peak"] = len(self.fifo)
        self.kick()
        return True

    def kick(self) -> None:
        """Request an arbitration round at the current instant."""
        if not self._arb_pending:
            self._arb_pending = True
            self.engine.schedule(self.engine.now, self.name, "arbitrate")

    def _arm_timer(self) -> None:
        if self._timer_at is not None:
            return
        deadline = self.rpm.next_timer_deadline()
        if deadline is not None:
            self._timer_at = deadline
            self.engine.schedule(max(deadline, self.engine.now), self.name, "rpm_timer")

    def _egress_check(self, entry: BufferEntry) -> EgressCheck:
        fabric = self.fabric
        switch = fabric.candidate_switch(self.gpu_id, entry.dst_gpu, entry.order_key)
        if not fabric.egress_ready(self.gpu_id, switch):
            return EgressCheck.NO_CREDIT
        if fabric.downstream_congested(switch, entry.dst_gpu):
            return EgressCheck.CONGESTED
        return EgressCheck.OK

    def _arbitrate(self) -> None:
        self._arb_pending = False
        now = self.engine.now
        fabric = self.fabric
        sent = 0
        if self.mode is EgressMode.RPM:
            skipped: list = []
            while True:
                entry, skipped = self.rpm.select_next(self._egress_check)
                if entry is None:
                    break
                fabric.inject(entry.to_packet(self.gpu_id, now))
                sent += 1
            for entry, verdict in skipped:
                if verdict is EgressCheck.CONGESTED:
                    switch = fabric.candidate_switch(self.gpu_id, entry.dst_gpu, entry.order_key)
                    fabric.wait_for_drain(switch, entry.dst_gpu, self.gpu_id)
                    self.engine.annotate(skip=entry.dst_gpu, switch=switch)
        else:
            fifo = self.fifo
            while fifo:
                packet = fifo[0]
                if packet.switch < 0:
                    packet.switch = fabric.route(packet)
                if not fabric.egress_ready(self.gpu_id, packet.switch):
                    break
                fifo.popleft()
                packet.issue_time = now
                fabric.inject(packet)
                sent += 1
        if sent:
            self.stats["packets_sent"] += sent
            self.engine.annotate(sent=sent)
            if self._stalled:
                self._stalled = False
                if self.on_space is not None:
                    self.on_space()

    # -- ingress ------------------------------------------------------------
    def _on_ingress(self, packet: Packet) -> None:
        self.fabric.delivered(packet)
        kind = packet.kind
        if kind is PacketKind.WRITE_ACK:
            self.stats["acks_received"] += 1
            return
        if kind is PacketKind.CONTROL:
            self.stats["control_received"] += 1
            if self.on_control is not None:
                self.on_control(packet)
            return
        now = self.engine.now
        if packet.src_gpu == self.gpu_id:
            # loopback writes skip the fabric ingress port
            start = now
            self.stats["loopback_writes"] += 1
        else:
            start = max(now, self._ingress_free)
            self._ingress_free = start + self.timing.cycle_ps
        penalty = 0
        if packet.logical_dest is not None:
            dest = packet.logical_dest
            if dest.malloc_id.gpu != self.gpu_id:
                raise SetupError(f"{self.name}: st.rowsp for {tuple(dest.malloc_id)} arrived at gpu{self.gpu_id}")
            translation = self.aau.translate(dest.malloc_id, dest.row_id, dest.row_offset)
            address = translation.address
            penalty = translation.penalty_ps
            self.stats["aau_penalty_ps"] += penalty
            self.engine.annotate(aau=translation.outcome.value, row=dest.row_id, local_row=translation.local_row_id)
        else:
            address = packet.phys_addr  # type: ignore[assignment]
        self.pending_writes += 1
        self.engine.schedule(start + self.timing.ingress_ps + penalty, self.name, "write_done", (packet, address))

    def _on_write_done(self, packet: Packet, address: int) -> None:
        self.pending_writes -= 1
        self.stats["writes"] += 1
        for listener in self.write_listeners:
            listener(packet, address)
        self.dam.on_write_ack(address, packet.mask)
        if self.timing.write_acks and packet.src_gpu != self.gpu_id:
            self.stats["acks_sent"] += 1
            self.fabric.inject(Packet(self.gpu_id, packet.src_gpu, 0, PacketKind.WRITE_ACK, self.engine.now, ack_for=address))

    def send_control(self, dst_gpu: int, tag: object) -> None:
        """Header-only control message (counts, addresses, flags)."""
        self.fabric.inject(Packet(self.gpu_id, dst_gpu, 0, PacketKind.CONTROL, self.engine.now, tag=tag))

    # -- engine -------------------------------------------------------------
    def handle(self, event: Event) -> None:
        kind = event.kind
        if kind == "ingress":
            self._on_ingress(event.payload)
        elif kind == "write_done":
            self._on_write_done(*event.payload)
        elif kind == "arbitrate":
            self._arbitrate()
        elif kind == "rpm_timer":
            self._timer_at = None
            promoted = self.rpm.timer_bypass(self.engine.now)
            if promoted:
                self.engine.annotate(promoted=promoted)
                self.kick()
            self._arm_timer()
        else:
            raise ValueError(f"{self.name}: unknown event kind {kind}")

    def is_idle(self) -> bool:
        return self.rpm.is_empty() and not self.fifo and self.pending_writes == 0

    def report(self) -> dict:
        return {
            "hub": dict(self.stats),
            "aau": dict(self.aau.stats),
            "rpm": self.rpm.stats.as_dict(),
            "dam": dict(self.dam.stats),
        }
