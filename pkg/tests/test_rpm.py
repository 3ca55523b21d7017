from __future__ import annotations

import pytest

from moehub_sim.core.packets import LogicalDest, MallocId, PacketKind, Priority, StoreRequest
from moehub_sim.core.rpm import EgressCheck, RuntimePacketManager


def rowsp(dst: int, row: int, offset: int = 0, size: int = 128, priority: Priority = Priority.HIGH) -> StoreRequest:
    return StoreRequest(0, dst, size, priority, logical_dest=LogicalDest(MallocId(dst, 0), row, offset))


def always_ok(entry) -> EgressCheck:
    return EgressCheck.OK


def drain(rpm: RuntimePacketManager, check=always_ok) -> list:
    out = []
    while True:
        entry, _ = rpm.select_next(check)
        if entry is None:
            return out
        out.append(entry)


def test_full_line_leaves_as_one_rowsp_packet():
    rpm = RuntimePacketManager(0, [1])
    assert rpm.enqueue(rowsp(1, 4, offset=256), 0)
    (entry,) = drain(rpm)
    packet = entry.to_packet(0, 10)
    assert packet.kind is PacketKind.ROWSP
    assert packet.payload_bytes == 128
    assert packet.logical_dest == LogicalDest(MallocId(1, 0), 4, 256)
    assert rpm.is_empty()


def test_fragments_of_one_line_merge():
    rpm = RuntimePacketManager(0, [1])
    rpm.enqueue(rowsp(1, 4, offset=128, size=64), 0)
    assert drain(rpm) == []
    rpm.enqueue(rowsp(1, 4, offset=192, size=64), 5)
    (entry,) = drain(rpm)
    assert entry.full
    assert entry.logical_base.row_offset == 128
    assert rpm.stats.merges == 1
    assert rpm.stats.entries_created == 1
    assert rpm.stats.emitted_bytes == rpm.stats.enqueued_bytes == 128


def test_rewritten_sub_blocks_counted_once():
    rpm = RuntimePacketManager(0, [1])
    rpm.enqueue(rowsp(1, 4, size=64), 0)
    rpm.enqueue(rowsp(1, 4, offset=32, size=32), 0)
    assert rpm.stats.overwrites == 2
    assert rpm.resident_bytes == 64
    assert rpm.stats.enqueued_bytes == 64
    rpm.enqueue(rowsp(1, 4, offset=64, size=64), 0)
    drain(rpm)
    assert rpm.stats.emitted_bytes == rpm.stats.enqueued_bytes == 128


def test_partial_entry_held_until_bypass_timer():
    rpm = RuntimePacketManager(0, [1], bypass_ps=2_000)
    rpm.enqueue(rowsp(1, 9, size=64), 100)
    assert rpm.next_timer_deadline() == 2_100
    assert rpm.timer_bypass(2_099) == 0
    assert drain(rpm) == []
    assert rpm.timer_bypass(2_100) == 1
    (entry,) = drain(rpm)
    assert entry.promoted and not entry.full
    assert entry.to_packet(0, 0).payload_bytes == 64


def test_partials_leave_immediately_without_holding():
    rpm = RuntimePacketManager(0, [1], hold_partial=False)
    rpm.enqueue(rowsp(1, 9, size=16), 0)
    assert len(drain(rpm)) == 1


def test_full_partition_stalls_the_issuer():
    rpm = RuntimePacketManager(0, [1], entries=1)
    assert rpm.enqueue(rowsp(1, 1, size=64), 0)
    assert not rpm.has_room(rowsp(1, 2, size=64))
    assert not rpm.enqueue(rowsp(1, 2, size=64), 0)
    assert rpm.stats.stalls == 1
    # merging into the resident entry still fits
    assert rpm.enqueue(rowsp(1, 1, offset=64, size=64), 0)


def test_high_priority_before_nop_then_lower_row_first():
    rpm = RuntimePacketManager(0, [1])
    rpm.enqueue(rowsp(1, 1, priority=Priority.NOP), 0)
    rpm.enqueue(rowsp(1, 8), 1)
    rpm.enqueue(rowsp(1, 3), 2)
    order = [(e.priority, e.order_key) for e in drain(rpm)]
    assert order == [(Priority.HIGH, 3), (Priority.HIGH, 8), (Priority.NOP, 1)]


def test_age_order_when_row_priority_disabled():
    rpm = RuntimePacketManager(0, [1], rowid_priority=False)
    rpm.enqueue(rowsp(1, 8), 1)
    rpm.enqueue(rowsp(1, 3), 2)
    assert [e.order_key for e in drain(rpm)] == [8, 3]


def test_round_robin_over_peers():
    rpm = RuntimePacketManager(0, [1, 2])
    for row in range(2):
        rpm.enqueue(rowsp(1, row), 0)
        rpm.enqueue(rowsp(2, row), 0)
    assert [e.dst_gpu for e in drain(rpm)] == [1, 2, 1, 2]


def test_congested_peer_is_skipped():
    rpm = RuntimePacketManager(0, [1, 2])
    rpm.enqueue(rowsp(1, 0), 0)
    rpm.enqueue(rowsp(2, 0), 0)

    def check(entry):
        return EgressCheck.CONGESTED if entry.dst_gpu == 1 else EgressCheck.OK

    entry, skipped = rpm.select_next(check)
    assert entry.dst_gpu == 2
    assert [(e.dst_gpu, verdict) for e, verdict in skipped] == [(1, EgressCheck.CONGESTED)]
    assert rpm.stats.congestion_skips == 1
    assert rpm.select_next(check)[0] is None
    assert rpm.resident_entries == 1


def test_address_centric_store_becomes_plain_store():
    rpm = RuntimePacketManager(0, [1])
    rpm.enqueue(StoreRequest(0, 1, 64, phys_addr=0x2040), 0)
    rpm.enqueue(StoreRequest(0, 1, 64, phys_addr=0x2000), 0)
    (entry,) = drain(rpm)
    packet = entry.to_packet(0, 0)
    assert packet.kind is PacketKind.PLAIN_STORE
    assert packet.phys_addr == 0x2000
    assert packet.payload_bytes == 128


def test_unknown_peer_rejected():
    rpm = RuntimePacketManager(0, [1])
    with pytest.raises(ValueError):
        rpm.enqueue(rowsp(3, 0), 0)
