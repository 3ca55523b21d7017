from __future__ import annotations

import json

import pytest

from moehub_sim.core.aau import AddressAllocationUnit
from moehub_sim.core.dam import CountMode, DamMode, DataAvailabilityManager, GlobalCounter
from moehub_sim.core.engine import Engine
from moehub_sim.core.errors import LogicError, SetupError
from tests.conftest import RecordingSink

BASE = 0x4000
ROW = 256  # two 128 B chunks per row


@pytest.fixture
def region():
    aau = AddressAllocationUnit(0)
    return aau.region(aau.register_region(BASE, ROW, 8))


def make_dam(mode: DamMode = DamMode.SIGNAL, **kwargs):
    engine = Engine()
    sink = RecordingSink()
    dam = DataAvailabilityManager(0, engine, sink, signal_latency_ps=100, **kwargs)
    dam.attach_phase("dispatch", mode)
    return engine, sink, dam


def ack_rows(dam, rows, chunks=(0, 1)):
    for row in rows:
        for chunk in chunks:
            dam.on_write_ack(BASE + row * ROW + chunk * 128)


def test_tile_ready_after_its_last_chunk(region):
    _, sink, dam = make_dam()
    table = dam.build_dependency_table(region, 1, 0, 4, phase="dispatch")
    assert [(e.rows, e.threshold) for e in table.entries] == [(4, 8), (4, 8)]
    ack_rows(dam, range(4), chunks=(0,))
    ack_rows(dam, range(3), chunks=(1,))
    assert sink.released == []
    fired = dam.on_write_ack(BASE + 3 * ROW + 128)
    assert fired is table.entries[0]
    assert sink.released == [(1, 0, 0, 4, 100)]


def test_chunk_counts_once_its_sub_blocks_are_covered(region):
    _, _, dam = make_dam()
    table = dam.build_dependency_table(region, 1, 0, 4, phase="dispatch")
    dam.on_write_ack(BASE, mask=0x0F)
    assert table.entries[0].counter == 0
    dam.on_write_ack(BASE, mask=0xF0)
    assert table.entries[0].counter == 1


def test_duplicate_ack_is_not_counted_twice(region):
    _, _, dam = make_dam()
    table = dam.build_dependency_table(region, 1, 0, 4, phase="dispatch")
    dam.on_write_ack(BASE)
    dam.on_write_ack(BASE)
    assert table.entries[0].counter == 1
    assert dam.stats["duplicates"] == 1


def half_acks(dam, rows, chunks=(0, 1)):
    for row in rows:
        for chunk in chunks:
            for mask in (0x0F, 0xF0):
                dam.on_write_ack(BASE + row * ROW + chunk * 128, mask=mask)


def test_ack_mode_counts_sub_line_acks_in_line_units(region):
    _, sink, dam = make_dam(count_mode=CountMode.ACK)
    table = dam.build_dependency_table(region, 1, 0, 4, phase="dispatch")
    half_acks(dam, range(3))
    half_acks(dam, [3], chunks=(0,))
    dam.on_write_ack(BASE + 3 * ROW + 128, mask=0x0F)
    assert table.entries[0].counter == 7
    assert sink.released == []
    assert dam.on_write_ack(BASE + 3 * ROW + 128, mask=0xF0) is table.entries[0]
    assert sink.released == [(1, 0, 0, 4, 100)]
    assert dam.stats["counted"] == 8


def test_ack_mode_counts_duplicates(region):
    _, _, dam = make_dam(count_mode=CountMode.ACK)
    table = dam.build_dependency_table(region, 1, 0, 4, phase="dispatch")
    dam.on_write_ack(BASE, mask=0x0F)
    dam.on_write_ack(BASE, mask=0xF0)
    assert table.entries[0].counter == 1
    dam.on_write_ack(BASE)
    assert table.entries[0].counter == 2
    assert dam.stats["duplicates"] == 1


def test_ack_mode_all_ready_sizes_partial_tiles_from_acked_bytes(region):
    _, sink, dam = make_dam(count_mode=CountMode.ACK)
    dam.build_dependency_table(region, 1, 0, 4, phase="dispatch")
    half_acks(dam, [4])
    dam.on_write_ack(BASE + 5 * ROW, mask=0x0F)
    assert dam.on_all_ready("dispatch") == 1
    assert sink.deallocated == [(1, 0, 0)]
    assert sink.released == [(1, 0, 1, 2, 100)]


def test_metadata_columns_are_tallied_separately(region):
    _, _, dam = make_dam()
    table = dam.build_dependency_table(region, 1, 0, 4, phase="dispatch", counted_bytes=128)
    assert table.entries[0].threshold == 4
    dam.on_write_ack(BASE + 128)
    assert dam.stats["metadata_acks"] == 1
    assert table.entries[0].counter == 0


def test_ack_outside_every_table_is_untracked(region):
    _, _, dam = make_dam()
    dam.build_dependency_table(region, 1, 0, 4, phase="dispatch")
    assert dam.on_write_ack(0x100) is None
    assert dam.on_write_ack(BASE + 8 * ROW) is None
    assert dam.stats["untracked"] == 2


def test_all_ready_releases_partial_and_frees_untouched_tiles(region):
    _, sink, dam = make_dam()
    dam.build_dependency_table(region, 1, 0, 4, phase="dispatch")
    ack_rows(dam, range(6))
    assert [r[2] for r in sink.released] == [0]
    assert dam.on_all_ready("dispatch") == 0
    assert sink.released[-1] == (1, 0, 1, 2, 100)


def test_all_ready_deallocates_tiles_never_written(region):
    _, sink, dam = make_dam()
    dam.build_dependency_table(region, 1, 0, 4, phase="dispatch")
    ack_rows(dam, range(4))
    assert dam.on_all_ready("dispatch") == 1
    assert sink.deallocated == [(1, 0, 1)]
    with pytest.raises(LogicError, match="twice"):
        dam.on_all_ready("dispatch")


def test_flag_mode_sets_software_flag(region):
    _, sink, dam = make_dam(DamMode.FLAG)
    dam.build_dependency_table(region, 1, 0, 4, phase="dispatch")
    ack_rows(dam, range(4))
    assert sink.released == []
    assert sink.flags == [(1, 0, 0, 4, 0)]


def test_finalize_rows_shrinks_the_last_tile(region):
    _, sink, dam = make_dam(DamMode.FLAG)
    table = dam.build_dependency_table(region, 1, 0, 4, phase="dispatch")
    ack_rows(dam, [4])
    dam.finalize_rows(table, 5)
    assert sink.flags == [(1, 0, 1, 1, 0)]
    assert table.entries[1].threshold == 2
    with pytest.raises(SetupError):
        dam.finalize_rows(table, 9)


def test_table_setup_errors(region):
    _, _, dam = make_dam()
    with pytest.raises(SetupError, match="not attached"):
        dam.build_dependency_table(region, 1, 0, 4, phase="combine")
    dam.build_dependency_table(region, 1, 0, 4, phase="dispatch")
    with pytest.raises(SetupError, match="already"):
        dam.build_dependency_table(region, 2, 0, 4, phase="dispatch")
    with pytest.raises(SetupError):
        make_dam()[2].build_dependency_table(region, 1, 0, 4, phase="dispatch", counted_bytes=24)


def test_global_counter_fires_once_after_latency():
    engine = Engine()
    counter = GlobalCounter(engine, "dispatch", 3, latency_ps=50)
    heard = []
    counter.subscribe(lambda name: heard.append((engine.now, name)))
    engine.call_at(10, counter.add, 2)
    engine.call_at(20, counter.add, 1)
    engine.run_until()
    assert heard == [(70, "dispatch")]
    assert counter.fired_at == 20


def test_zero_target_counter_fires_on_arm():
    engine = Engine()
    counter = GlobalCounter(engine, "combine", 0)
    heard = []
    counter.subscribe(heard.append)
    counter.arm()
    engine.run_until()
    assert heard == ["combine"]
    counter.arm()
    assert counter.all_ready_fired


def test_shared_counter_drives_all_ready(region):
    engine, sink, dam = make_dam()
    counter = GlobalCounter(engine, "dispatch", 12)
    dam.attach_phase("dispatch", DamMode.SIGNAL, counter)
    dam.build_dependency_table(region, 1, 0, 4, phase="dispatch")
    engine.call_at(0, ack_rows, dam, range(6))
    engine.run_until()
    assert counter.all_ready_fired
    assert sink.deallocated == []
    assert [r[2:4] for r in sink.released] == [(0, 4), (1, 2)]


def test_dump_lists_tables_with_their_counters(region):
    _, _, dam = make_dam()
    dam.build_dependency_table(region, 1, 0, 4, phase="dispatch")
    ack_rows(dam, range(4))
    (table,) = dam.dump()
    assert (table["gpu"], table["phase"], table["malloc_id"], table["tm"]) == (0, "dispatch", [0, 0], 4)
    first, second = table["entries"]
    assert first["range"] == [BASE, BASE + 4 * ROW]
    assert (first["counter"], first["threshold"], first["fired"]) == (8, 8, True)
    assert (second["counter"], second["fired"]) == (0, False)
    json.dumps(table)
