"""Runtime Packet Manager: per-peer merge buffers, congestion-aware round-robin emission"""

from __future__ import annotations

import heapq
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable

from moehub_sim.core.engine import SimTime
from moehub_sim.core.packets import (
    FLIT_BYTES,
    FULL_MASK,
    LINE_BYTES,
    LogicalDest,
    Packet,
    PacketKind,
    Priority,
    StoreRequest,
)

logger = logging.getLogger(__name__)


class EgressCheck(Enum):
    """Answer of the egress side when asked whether a packet may leave now."""

    OK = "ok"
    NO_CREDIT = "no_credit"
    CONGESTED = "congested"


@dataclass(slots=True)
class BufferEntry:
    key: tuple
    priority: Priority
    dst_gpu: int
    mask: int
    insert_time: SimTime
    order_key: int
    sequence: int
    logical_base: LogicalDest | None = None
    line_addr: int | None = None
    tag: Any = None
    promoted: bool = False
    resident: bool = True
    version: int = 0
    overwrites: int = 0

    @property
    def full(self) -> bool:
        return self.mask == FULL_MASK

    @property
    def nbytes(self) -> int:
        return self.mask.bit_count() * FLIT_BYTES

    def to_packet(self, src_gpu: int, now: SimTime) -> Packet:
        if self.logical_base is not None:
            kind = PacketKind.ROWSP if self.priority is Priority.HIGH else PacketKind.ROWSP_NOP
            return Packet(src_gpu, self.dst_gpu, self.nbytes, kind, now, logical_dest=self.logical_base, mask=self.mask, tag=self.tag)
        return Packet(src_gpu, self.dst_gpu, self.nbytes, PacketKind.PLAIN_STORE, now, phys_addr=self.line_addr, mask=self.mask, tag=self.tag)


def entry_key(request: StoreRequest) -> tuple:
    """Index of the merge slot a request lands in: row chunk for st.rowsp, line address otherwise."""
    if request.logical_dest is not None:
        dest = request.logical_dest
        return ("row", dest.malloc_id, dest.row_id, dest.row_offset // LINE_BYTES)
    return ("line", request.phys_addr // LINE_BYTES)  # type: ignore[operator]


def selection_key(entry: BufferEntry, *, mask_first: bool = True, rowid_priority: bool = True) -> tuple:
    """Four-level order: priority class, mask fullness, RowID, age (mask/RowID swappable)."""
    mask_class = 0 if entry.full or entry.promoted else 1
    row = entry.order_key if rowid_priority else 0
    if mask_first:
        return (entry.priority.value, mask_class, row, entry.insert_time, entry.sequence)
    return (entry.priority.value, row, mask_class, entry.insert_time, entry.sequence)


class BufferPartition:
    """Fully-associative buffer for one peer GPU."""

    def __init__(self, peer: int, capacity: int, *, mask_first: bool = True, rowid_priority: bool = True, hold_partial: bool = True) -> None:
        self.peer = peer
        self.capacity = capacity
        self.mask_first = mask_first
        self.rowid_priority = rowid_priority
        self.hold_partial = hold_partial
        self.entries: dict[tuple, BufferEntry] = {}
        self._heap: list[tuple[tuple, int, BufferEntry]] = []
        self.resident_bytes = 0

    def __len__(self) -> int:
        return len(self.entries)

    def has_room(self, slot: tuple) -> bool:
        return slot in self.entries or len(self.entries) < self.capacity

    def eligible(self, entry: BufferEntry) -> bool:
        return entry.full or entry.promoted or not self.hold_partial

    def _push(self, entry: BufferEntry) -> None:
        entry.version += 1
        heapq.heappush(self._heap, (selection_key(entry, mask_first=self.mask_first, rowid_priority=self.rowid_priority), entry.version, entry))

    def insert(self, slot: tuple, entry: BufferEntry) -> None:
        self.entries[slot] = entry
        self.resident_bytes += entry.nbytes
        if self.eligible(entry):
            self._push(entry)

    def merge(self, entry: BufferEntry, mask: int) -> int:
        """OR ``mask`` into ``entry``; returns the number of sub-blocks written twice."""
        overlap = (entry.mask & mask).bit_count()
        was_eligible = self.eligible(entry)
        was_full = entry.full
        before = entry.nbytes
        entry.mask |= mask
        self.resident_bytes += entry.nbytes - before
        entry.overwrites += overlap
        if entry.full and not was_full or not was_eligible and self.eligible(entry):
            self._push(entry)
        return overlap

    def promote(self, entry: BufferEntry) -> bool:
        if not entry.resident or entry.full or entry.promoted:
            return False
        entry.promoted = True
        self._push(entry)
        return True

    def peek(self) -> BufferEntry | None:
        heap = self._heap
        while heap:
            _, version, entry = heap[0]
            if entry.resident and entry.version == version:
                return entry
            heapq.heappop(heap)
        return None

    def pop(self, entry: BufferEntry) -> None:
        slot = (entry.key, entry.priority)
        del self.entries[slot]
        entry.resident = False
        self.resident_bytes -= entry.nbytes

    def ordered(self) -> list[BufferEntry]:
        """Eligible entries in selection order (inspection only)."""
        live = [e for e in self.entries.values() if self.eligible(e)]
        return sorted(live, key=lambda e: selection_key(e, mask_first=self.mask_first, rowid_priority=self.rowid_priority))


@dataclass
class RpmStats:
    enqueued_bytes: int = 0
    emitted_bytes: int = 0
    requests: int = 0
    merges: int = 0
    entries_created: int = 0
    packets_emitted: int = 0
    full_packets: int = 0
    overwrites: int = 0
    promotions: int = 0
    congestion_skips: int = 0
    credit_skips: int = 0
    stalls: int = 0
    max_resident_entries: dict[int, int] = field(default_factory=dict)

    def as_dict(self) -> dict[str, Any]:
        out = {k: v for k, v in self.__dict__.items() if k != "max_resident_entries"}
        out["max_resident_entries"] = max(self.max_resident_entries.values(), default=0)
        return out


class RuntimePacketManager:
    """Producer-side merge buffers, one partition per peer GPU fixed at construction."""

    def __init__(
        self,
        gpu: int,
        peers: Iterable[int],
        *,
        entries: int = 64,
        bypass_ps: SimTime = 2_000_000,
        mask_first: bool = True,
        rowid_priority: bool = True,
        hold_partial: bool = True,
    ) -> None:
        self.gpu = gpu
        self.bypass_ps = bypass_ps
        self.partitions: dict[int, BufferPartition] = {
            peer: BufferPartition(peer, entries, mask_first=mask_first, rowid_priority=rowid_priority, hold_partial=hold_partial)
            for peer in sorted(peers)
        }
        self._order = list(self.partitions)
        self._rr = 0
        self._sequence = 0
        self._timers: deque[tuple[SimTime, BufferEntry]] = deque()
        self.stats = RpmStats()

    # -- enqueue ------------------------------------------------------------
    def enqueue(self, request: StoreRequest, now: SimTime) -> bool:
        """Merge or allocate; False means the partition is full and the issuer must stall."""
        try:
            partition = self.partitions[request.dst_gpu]
        except KeyError:
            raise ValueError(f"gpu{self.gpu}: gpu{request.dst_gpu} is not a configured peer") from None
        mask = request.mask
        key = entry_key(request)
        slot = (key, request.priority)
        entry = partition.entries.get(slot)
        if entry is None:
            if len(partition) >= partition.capacity:
                self.stats.stalls += 1
                return False
            if request.logical_dest is not None:
                dest = request.logical_dest
                base = LogicalDest(dest.malloc_id, dest.row_id, dest.row_offset - dest.row_offset % LINE_BYTES)
                entry = BufferEntry(key, request.priority, request.dst_gpu, mask, now, dest.row_id, self._sequence, logical_base=base, tag=request.tag)
            else:
                line = request.phys_addr // LINE_BYTES  # type: ignore[operator]
                entry = BufferEntry(key, request.priority, request.dst_gpu, mask, now, line, self._sequence, line_addr=line * LINE_BYTES, tag=request.tag)
            self._sequence += 1
            partition.insert(slot, entry)
            self.stats.entries_created += 1
            self.stats.enqueued_bytes += entry.nbytes
            if not entry.full and self.bypass_ps >= 0:
                self._timers.append((now + self.bypass_ps, entry))
            peak = self.stats.max_resident_entries
            if len(partition) > peak.get(partition.peer, 0):
                peak[partition.peer] = len(partition)
        else:
            overlap = partition.merge(entry, mask)
            self.stats.merges += 1
            self.stats.enqueued_bytes += (mask.bit_count() - overlap) * FLIT_BYTES
            if overlap:
                self.stats.overwrites += overlap
                logger.debug("gpu%d: %d sub-block(s) rewritten in %s", self.gpu, overlap, key)
        self.stats.requests += 1
        return True

    def has_room(self, request: StoreRequest) -> bool:
        partition = self.partitions[request.dst_gpu]
        return partition.has_room((entry_key(request), request.priority))

    # -- timer bypass -------------------------------------------------------
    def timer_bypass(self, now: SimTime) -> int:
        """Promote partial entries older than the bypass threshold."""
        promoted = 0
        timers = self._timers
        while timers and timers[0][0] <= now:
            _, entry = timers.popleft()
            if self.partitions[entry.dst_gpu].promote(entry):
                promoted += 1
        self.stats.promotions += promoted
        return promoted

    def next_timer_deadline(self) -> SimTime | None:
        timers = self._timers
        while timers and (not timers[0][1].resident or timers[0][1].full):
            timers.popleft()
        return timers[0][0] if timers else None

    # -- emission -----------------------------------------------------------
    def select_next(self, check: Callable[[BufferEntry], EgressCheck]) -> tuple[BufferEntry | None, list[tuple[BufferEntry, EgressCheck]]]:
        """Round-robin over partitions; skip those whose best entry cannot leave now."""
        skipped: list[tuple[BufferEntry, EgressCheck]] = []
        order = self._order
        n = len(order)
        for step in range(n):
            index = (self._rr + step) % n
            partition = self.partitions[order[index]]
            entry = partition.peek()
            if entry is None:
                continue
            verdict = check(entry)
            if verdict is not EgressCheck.OK:
                if verdict is EgressCheck.CONGESTED:
                    self.stats.congestion_skips += 1
                else:
                    self.stats.credit_skips += 1
                skipped.append((entry, verdict))
                continue
            partition.pop(entry)
            self._rr = (index + 1) % n
            self.stats.packets_emitted += 1
            self.stats.emitted_bytes += entry.nbytes
            if entry.full:
                self.stats.full_packets += 1
            return entry, skipped
        return None, skipped

    @property
    def resident_bytes(self) -> int:
        return sum(p.resident_bytes for p in self.partitions.values())

    @property
    def resident_entries(self) -> int:
        return sum(len(p) for p in self.partitions.values())

    def is_empty(self) -> bool:
        return all(len(p) == 0 for p in self.partitions.values())
