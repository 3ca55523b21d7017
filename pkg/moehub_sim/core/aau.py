"""Address Allocation Unit: on-arrival (MallocID, RowID) -> LocalRowID translation

The Row Allocation Table (RAT) caches mappings in FIFO order; evicted mappings
spill to a per-region store in device memory and are recovered on demand. The
Allocation Pointer Table (APT) keeps one next-free pointer per region and is
never evicted.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum

from moehub_sim.core.engine import SimTime
from moehub_sim.core.errors import RegionOverflowError, SetupError
from moehub_sim.core.packets import MallocId

logger = logging.getLogger(__name__)

RatTag = tuple[MallocId, int]


@dataclass
class MallocRegion:
    malloc_id: MallocId
    base_addr: int
    row_size: int
    capacity_rows: int
    ready_at: SimTime = 0
    spill: dict[int, int] = field(default_factory=dict)

    @property
    def end_addr(self) -> int:
        return self.base_addr + self.row_size * self.capacity_rows

    def overlaps(self, base_addr: int, nbytes: int) -> bool:
        return base_addr < self.end_addr and self.base_addr < base_addr + nbytes


@dataclass(slots=True)
class RatEntry:
    tag: RatTag
    local_row_id: int
    fifo_position: int


@dataclass(slots=True)
class AptEntry:
    malloc_id: MallocId
    row_pointer: int = 0


class TranslateOutcome(Enum):
    HIT = "hit"
    ALLOCATE = "allocate"
    RECOVER = "recover"


@dataclass(frozen=True, slots=True)
class Translation:
    address: int
    local_row_id: int
    outcome: TranslateOutcome
    penalty_ps: SimTime = 0
    evicted: RatTag | None = None


class AddressAllocationUnit:
    def __init__(
        self,
        gpu: int,
        *,
        rat_capacity: int = 4096,
        rat_banks: int = 16,
        recover_penalty_ps: SimTime = 600_000,
        spill_write_ps: SimTime = 100_000,
        mmio_latency_ps: SimTime = 2_000_000,
    ) -> None:
        if rat_capacity < 1:
            raise SetupError("RAT capacity must be at least one entry")
        self.gpu = gpu
        self.rat_capacity = rat_capacity
        self.rat_banks = rat_banks
        self.recover_penalty_ps = recover_penalty_ps
        self.spill_write_ps = spill_write_ps
        self.mmio_latency_ps = mmio_latency_ps
        self.regions: dict[MallocId, MallocRegion] = {}
        self.apt: dict[MallocId, AptEntry] = {}
        self.rat: OrderedDict[RatTag, RatEntry] = OrderedDict()
        self._next_region = 0
        self._fifo_counter = 0
        self.stats = {"hits": 0, "allocations": 0, "recoveries": 0, "evictions": 0, "max_occupancy": 0}

    # -- rowspMalloc ------------------------------------------------------------
    def register_region(self, base_addr: int, row_size: int, capacity_rows: int, *, now: SimTime = 0) -> MallocId:
        """Install region metadata (modeled MMIO write) and hand back its MallocID."""
        if capacity_rows <= 0:
            raise SetupError(f"gpu{self.gpu}: region capacity must be positive")
        if row_size <= 0:
            raise SetupError(f"gpu{self.gpu}: row size must be positive")
        nbytes = row_size * capacity_rows
        for region in self.regions.values():
            if region.overlaps(base_addr, nbytes):
                raise SetupError(
                    f"gpu{self.gpu}: region at {base_addr:#x} overlaps {region.malloc_id} at {region.base_addr:#x}"
                )
        malloc_id = MallocId(self.gpu, self._next_region)
        self._next_region += 1
        self.regions[malloc_id] = MallocRegion(malloc_id, base_addr, row_size, capacity_rows, now + self.mmio_latency_ps)
        self.apt[malloc_id] = AptEntry(malloc_id)
        logger.debug("gpu%d registered %s base=%#x rows=%d x %dB", self.gpu, malloc_id, base_addr, capacity_rows, row_size)
        return malloc_id

    def region(self, malloc_id: MallocId) -> MallocRegion:
        try:
            return self.regions[malloc_id]
        except KeyError:
            raise SetupError(f"gpu{self.gpu}: unregistered MallocID {tuple(malloc_id)}") from None

    def reset_region(self, malloc_id: MallocId) -> None:
        """Flush RAT entries, spill store and APT pointer of one region."""
        region = self.region(malloc_id)
        for tag in [t for t in self.rat if t[0] == malloc_id]:
            del self.rat[tag]
        region.spill.clear()
        self.apt[malloc_id] = AptEntry(malloc_id)

    def free_region(self, malloc_id: MallocId) -> None:
        self.reset_region(malloc_id)
        del self.regions[malloc_id]
        del self.apt[malloc_id]

    # -- translation ------------------------------------------------------------
    def translate(self, malloc_id: MallocId, row_id: int, row_offset: int) -> Translation:
        region = self.region(malloc_id)
        if not 0 <= row_offset < region.row_size:
            raise SetupError(f"row offset {row_offset} outside {region.row_size} B row of {tuple(malloc_id)}")
        tag = (malloc_id, row_id)
        entry = self.rat.get(tag)
        if entry is not None:
            self.stats["hits"] += 1
            return Translation(region.base_addr + entry.local_row_id * region.row_size + row_offset, entry.local_row_id, TranslateOutcome.HIT)

        penalty = 0
        local = region.spill.pop(row_id, None)
        if local is not None:
            outcome = TranslateOutcome.RECOVER
            penalty += self.recover_penalty_ps
            self.stats["recoveries"] += 1
        else:
            apt = self.apt[malloc_id]
            if apt.row_pointer >= region.capacity_rows:
                raise RegionOverflowError(
                    f"region overflow: {tuple(malloc_id)} holds {region.capacity_rows} rows, row {row_id} does not fit"
                )
            local = apt.row_pointer
            apt.row_pointer += 1
            outcome = TranslateOutcome.ALLOCATE
            self.stats["allocations"] += 1

        evicted = self.evict_if_full()
        if evicted is not None:
            penalty += self.spill_write_ps
        self.rat[tag] = RatEntry(tag, local, self._fifo_counter)
        self._fifo_counter += 1
        if len(self.rat) > self.stats["max_occupancy"]:
            self.stats["max_occupancy"] = len(self.rat)
        return Translation(region.base_addr + local * region.row_size + row_offset, local, outcome, penalty, evicted)

    def evict_if_full(self) -> RatTag | None:
        """Spill the oldest RAT entry when no slot is free for a new one."""
        if len(self.rat) < self.rat_capacity:
            return None
        tag, entry = self.rat.popitem(last=False)
        self.regions[tag[0]].spill[tag[1]] = entry.local_row_id
        self.stats["evictions"] += 1
        return tag

    # -- inspection -------------------------------------------------------------
    def allocations(self, malloc_id: MallocId) -> dict[int, int]:
        """RowID -> LocalRowID for every row ever allocated in a region (RAT + spill)."""
        region = self.region(malloc_id)
        out = dict(region.spill)
        out.update({tag[1]: e.local_row_id for tag, e in self.rat.items() if tag[0] == malloc_id})
        return out

    def allocated_rows(self, malloc_id: MallocId) -> int:
        return self.apt[malloc_id].row_pointer
