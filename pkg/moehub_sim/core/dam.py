"""Data Availability Manager: range-lookup dependency tables, tile counters, AllReady

Each dependency table covers one registered region consumed by one GEMM segment.
Row-tile ``i`` of the segment depends on rows ``[i*TM, (i+1)*TM)`` of the region;
its counter counts completed 128 B chunks of the counted column span (the
activation bytes; trailing metadata columns are tallied separately).
"""

from __future__ import annotations

import logging
from bisect import bisect_right
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Any, Callable, Protocol

from moehub_sim.core.aau import MallocRegion
from moehub_sim.core.engine import Engine, SimTime
from moehub_sim.core.errors import LogicError, SetupError
from moehub_sim.core.packets import FLIT_BYTES, FULL_MASK, LINE_BYTES

logger = logging.getLogger(__name__)


class DamMode(Enum):
    SIGNAL = "signal"  # hardware Ready to the dispatcher
    FLAG = "flag"  # software flag observed by polling thread blocks


class CountMode(Enum):
    COVERAGE = "coverage"  # a chunk counts once, when all its bytes are present
    ACK = "ack"  # every write acknowledgment counts


class TileSink(Protocol):
    def release_tile(self, kernel_id: int, segment: int, tile: int, rows: int, at: SimTime) -> None: ...

    def set_tile_flag(self, kernel_id: int, segment: int, tile: int, rows: int, at: SimTime) -> None: ...

    def deallocate_tile(self, kernel_id: int, segment: int, tile: int) -> None: ...


@dataclass(slots=True)
class DependencyEntry:
    index: int
    start: int
    end: int
    rows: int
    threshold: int
    counter: int = 0
    acked_flits: int = 0
    fired: bool = False
    deallocated: bool = False
    released_rows: int | None = None

    @property
    def addr_range(self) -> tuple[int, int]:
        return (self.start, self.end)


@lru_cache(maxsize=64)
def tile_layout(capacity_rows: int, row_size: int, counted_bytes: int, tm: int) -> tuple[tuple[int, int, int, int], ...]:
    """(start offset, end offset, rows, threshold) per row tile; cached by shape."""
    chunks = -(-counted_bytes // LINE_BYTES)
    out = []
    for i in range(-(-capacity_rows // tm)):
        rows = min(tm, capacity_rows - i * tm)
        out.append((i * tm * row_size, (i * tm + rows) * row_size, rows, rows * chunks))
    return tuple(out)


@dataclass
class DependencyTable:
    name: str
    phase: str
    region: MallocRegion
    kernel_id: int
    segment: int
    tm: int
    counted_bytes: int
    entries: list[DependencyEntry] = field(default_factory=list)
    coverage: dict[tuple[int, int], int] = field(default_factory=dict)
    finalized_rows: int | None = None

    @property
    def base(self) -> int:
        return self.region.base_addr

    @property
    def end(self) -> int:
        return self.region.end_addr

    @property
    def row_size(self) -> int:
        return self.region.row_size

    @property
    def chunks_per_row(self) -> int:
        return -(-self.counted_bytes // LINE_BYTES)

    @property
    def flits_per_row(self) -> int:
        return self.counted_bytes // FLIT_BYTES

    def expected_mask(self, chunk: int) -> int:
        tail = self.counted_bytes - chunk * LINE_BYTES
        if tail >= LINE_BYTES:
            return FULL_MASK
        return (1 << (tail // FLIT_BYTES)) - 1

    def dump(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "malloc_id": list(self.region.malloc_id),
            "kernel_id": self.kernel_id,
            "segment": self.segment,
            "tm": self.tm,
            "counted_bytes": self.counted_bytes,
            "finalized_rows": self.finalized_rows,
            "entries": [
                {"index": e.index, "range": [e.start, e.end], "rows": e.rows, "threshold": e.threshold,
                 "counter": e.counter, "fired": e.fired, "deallocated": e.deallocated, "released_rows": e.released_rows}
                for e in self.entries
            ],
        }


class GlobalCounter:
    """Layer-wide count of expected acknowledgments; fires AllReady exactly once."""

    def __init__(self, engine: Engine, name: str, target: int, *, latency_ps: SimTime = 0) -> None:
        self.engine = engine
        self.name = name
        self.target = target
        self.latency_ps = latency_ps
        self.current = 0
        self.all_ready_fired = False
        self.fired_at: SimTime | None = None
        self._listeners: list[Callable[[str], Any]] = []

    def subscribe(self, listener: Callable[[str], Any]) -> None:
        self._listeners.append(listener)

    def arm(self) -> None:
        """Fire immediately when nothing is expected at all."""
        if self.target == 0 and not self.all_ready_fired:
            self._fire()

    def add(self, n: int = 1) -> None:
        self.current += n
        if self.current == self.target:
            self._fire()
        elif self.current > self.target:
            logger.warning("%s: %d acknowledgments over target %d", self.name, self.current, self.target)

    def _fire(self) -> None:
        if self.all_ready_fired:
            raise LogicError(f"{self.name}: AllReady fired twice")
        self.all_ready_fired = True
        self.fired_at = self.engine.now
        logger.debug("%s AllReady at t=%d ps (%d acks)", self.name, self.engine.now, self.current)
        for listener in self._listeners:
            self.engine.call_at(self.engine.now + self.latency_ps, listener, self.name)


class DataAvailabilityManager:
    def __init__(
        self,
        gpu: int,
        engine: Engine,
        sink: TileSink,
        *,
        signal_latency_ps: SimTime = 100_000,
        count_mode: CountMode = CountMode.COVERAGE,
    ) -> None:
        self.gpu = gpu
        self.engine = engine
        self.sink = sink
        self.signal_latency_ps = signal_latency_ps
        self.count_mode = count_mode
        self.tables: list[DependencyTable] = []
        self._bases: list[int] = []
        self.modes: dict[str, DamMode] = {}
        self.counters: dict[str, GlobalCounter] = {}
        self._all_ready_done: set[str] = set()
        self.ready_log: list[tuple[int, int, int, SimTime, SimTime]] = []
        self.stats = {"acks": 0, "counted": 0, "duplicates": 0, "metadata_acks": 0, "untracked": 0,
                      "ready": 0, "released_partial": 0, "deallocated": 0, "flags": 0}

    # -- table construction -------------------------------------------------
    def attach_phase(self, phase: str, mode: DamMode, counter: GlobalCounter | None = None) -> None:
        self.modes[phase] = mode
        if counter is not None:
            self.counters[phase] = counter
            counter.subscribe(self.on_all_ready)

    def build_dependency_table(
        self,
        region: MallocRegion,
        kernel_id: int,
        segment: int,
        tm: int,
        *,
        phase: str,
        counted_bytes: int | None = None,
    ) -> DependencyTable:
        """One entry per row tile over the region's full capacity."""
        if phase not in self.modes:
            raise SetupError(f"gpu{self.gpu}: dependency phase {phase!r} not attached")
        if tm <= 0:
            raise SetupError("row tile height must be positive")
        counted = region.row_size if counted_bytes is None else counted_bytes
        if not 0 < counted <= region.row_size or counted % FLIT_BYTES:
            raise SetupError(f"counted span {counted} B invalid for {region.row_size} B rows")
        for other in self.tables:
            if other.region.malloc_id == region.malloc_id or region.overlaps(other.base, other.end - other.base):
                raise SetupError(f"gpu{self.gpu}: region {tuple(region.malloc_id)} already has a dependency table")
        table = DependencyTable(f"gpu{self.gpu}/{phase}/k{kernel_id}s{segment}", phase, region, kernel_id, segment, tm, counted)
        for index, (start, end, rows, threshold) in enumerate(tile_layout(region.capacity_rows, region.row_size, counted, tm)):
            table.entries.append(DependencyEntry(index, region.base_addr + start, region.base_addr + end, rows, threshold))
        at = bisect_right(self._bases, region.base_addr)
        self.tables.insert(at, table)
        self._bases.insert(at, region.base_addr)
        return table

    def table_for(self, address: int) -> DependencyTable | None:
        i = bisect_right(self._bases, address) - 1
        if i >= 0 and address < self.tables[i].end:
            return self.tables[i]
        return None

    def dump(self) -> list[dict[str, Any]]:
        """Tables in address order, with their counters as they stand now."""
        return [{"gpu": self.gpu, "phase": t.phase, **t.dump()} for t in self.tables]

    # -- acknowledgments ----------------------------------------------------
    def on_write_ack(self, address: int, mask: int = FULL_MASK) -> DependencyEntry | None:
        """Account one completed local write of the 128 B line at ``address``; returns the entry that fired."""
        self.stats["acks"] += 1
        table = self.table_for(address)
        if table is None:
            self.stats["untracked"] += 1
            self.engine.annotate(dam="untracked", address=address)
            return None
        offset = address - table.base
        row, col = divmod(offset, table.row_size)
        if col >= table.counted_bytes:
            self.stats["metadata_acks"] += 1
            return None
        entry = table.entries[row // table.tm]
        if entry.deallocated:
            return None
        chunk = col // LINE_BYTES
        slot = (row, chunk)
        expected = table.expected_mask(chunk)
        old = table.coverage.get(slot, 0)
        new = old | (mask & expected)
        table.coverage[slot] = new
        duplicate = (old & mask) != 0
        if duplicate:
            self.stats["duplicates"] += 1
            self.engine.annotate(dam="duplicate", row=row, chunk=chunk)
        if entry.counter >= entry.threshold:
            return None
        if self.count_mode is CountMode.COVERAGE:
            if new != expected or old == expected:
                return None
            delta = 1
        else:
            # acks count in line-chunk units, partial masks pro rata
            entry.acked_flits += (mask & expected).bit_count()
            delta = min(entry.threshold, entry.acked_flits * table.chunks_per_row // table.flits_per_row) - entry.counter
            if delta <= 0:
                return None
        entry.counter += delta
        self.stats["counted"] += delta
        counter = self.counters.get(table.phase)
        fired = None
        if entry.counter == entry.threshold and not entry.fired:
            self._fire(table, entry, entry.rows)
            fired = entry
        if counter is not None:
            counter.add(delta)
        return fired

    def _fire(self, table: DependencyTable, entry: DependencyEntry, rows: int) -> None:
        entry.fired = True
        entry.released_rows = rows
        now = self.engine.now
        if self.modes[table.phase] is DamMode.SIGNAL:
            at = now + self.signal_latency_ps
            self.stats["ready"] += 1
            self.ready_log.append((table.kernel_id, table.segment, entry.index, now, at))
            self.engine.annotate(dam="ready", table=table.name, tile=entry.index, rows=rows)
            self.sink.release_tile(table.kernel_id, table.segment, entry.index, rows, at)
        else:
            self.stats["flags"] += 1
            self.sink.set_tile_flag(table.kernel_id, table.segment, entry.index, rows, now)

    # -- completion ---------------------------------------------------------
    def on_all_ready(self, phase: str) -> int:
        """Deallocate never-touched tiles and force-release partially filled ones."""
        if phase in self._all_ready_done:
            raise LogicError(f"gpu{self.gpu}: AllReady for {phase!r} delivered twice")
        self._all_ready_done.add(phase)
        deallocated = 0
        for table in self.tables:
            if table.phase != phase:
                continue
            for entry in table.entries:
                if entry.fired or entry.deallocated:
                    continue
                if entry.counter == 0 and entry.acked_flits == 0:
                    entry.deallocated = True
                    deallocated += 1
                    self.sink.deallocate_tile(table.kernel_id, table.segment, entry.index)
                else:
                    if self.count_mode is CountMode.ACK:
                        filled = -(-entry.acked_flits // table.flits_per_row)
                        if entry.acked_flits % table.flits_per_row:
                            logger.warning("%s tile %d: %d acked sub-blocks is not a whole number of rows",
                                           table.name, entry.index, entry.acked_flits)
                            self.engine.annotate(dam="ack_mismatch", table=table.name, tile=entry.index)
                    else:
                        filled = -(-entry.counter // table.chunks_per_row)
                    rows = min(entry.rows, filled)
                    self.stats["released_partial"] += 1
                    self._fire(table, entry, rows)
        self.stats["deallocated"] += deallocated
        logger.debug("gpu%d %s AllReady: %d tile(s) deallocated", self.gpu, phase, deallocated)
        return deallocated

    def finalize_rows(self, table: DependencyTable, rows: int) -> None:
        """Software path: the final row count became known (polling consumers)."""
        if rows > table.region.capacity_rows:
            raise SetupError(f"{table.name}: {rows} rows exceed capacity {table.region.capacity_rows}")
        table.finalized_rows = rows
        for entry in table.entries:
            if entry.fired or entry.deallocated:
                continue
            first = entry.index * table.tm
            present = max(0, min(entry.rows, rows - first))
            if present == 0:
                entry.fired = True
                entry.released_rows = 0
                self.sink.set_tile_flag(table.kernel_id, table.segment, entry.index, 0, self.engine.now)
                continue
            entry.rows = present
            entry.threshold = present * table.chunks_per_row
            if entry.counter >= entry.threshold:
                self._fire(table, entry, present)
