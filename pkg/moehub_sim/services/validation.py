"""Property suites run by ``validate``: AAU, RPM and DAM mechanisms, layer-level readiness, congestion and determinism"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping

from moehub_sim.core.aau import AddressAllocationUnit, TranslateOutcome
from moehub_sim.core.dam import DamMode, DataAvailabilityManager
from moehub_sim.core.engine import Engine, Rng, SimTime, fork_stream
from moehub_sim.core.packets import FLIT_BYTES, LINE_BYTES, LogicalDest, MallocId, Packet, Priority, StoreRequest
from moehub_sim.core.rpm import EgressCheck, RuntimePacketManager
from moehub_sim.core.system import SimParams
from moehub_sim.services.pipelines import MoeHubLayer, Pipeline, run_layer
from moehub_sim.services.settings import build_params
from moehub_sim.services.workload import MoeConfig, generate_routing

logger = logging.getLogger(__name__)

TINY_MODEL = MoeConfig("tiny", hidden_size=256, ffn_hidden_size=512, n_experts=4, top_k=2, n_layers=1, n_gpus=2, seq_len_per_gpu=48)
# eight experts over four GPUs, driven with skewed routing over thin links
BURST_MODEL = MoeConfig("burst", hidden_size=256, ffn_hidden_size=512, n_experts=8, top_k=2, n_layers=1, n_gpus=4, seq_len_per_gpu=32)
# one GPU with enough expert work that fixed latencies stay small against the span
SINGLE_GPU_MODEL = MoeConfig("single", hidden_size=1024, ffn_hidden_size=2048, n_experts=4, top_k=2, n_layers=1, n_gpus=1,
                             seq_len_per_gpu=256)

RAT_CAPACITIES = (1, 4, 64, 4096)
BURST_BANDWIDTH = 50e9
SINGLE_GPU_RATIO_MIN = 0.95


@dataclass
class SuiteResult:
    suite: str
    checked: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def expect(self, condition: bool, message: str) -> None:
        self.checked += 1
        if not condition:
            self.violations.append(message)

    def as_dict(self) -> dict[str, Any]:
        return {"suite": self.suite, "ok": self.ok, "checked": self.checked, "violations": self.violations[:20]}


def check_aau(rng: Rng, *, rounds: int = 25, arrivals: int = 400, producers: int = 8, max_regions: int = 4,
              capacities: tuple[int, ...] = RAT_CAPACITIES) -> SuiteResult:
    """Random multi-region traces replayed against an unbounded map and a FIFO table model.

    LocalRowIDs are dense per region in first-arrival order, stable across spill and
    recover, and never shared between regions. Every miss evicts the oldest mapping
    once the table is full.
    """
    result = SuiteResult("aau")
    gen = rng.generator()
    row_size = 512
    for capacity in capacities:
        for r in range(rounds):
            where = f"capacity {capacity} round {r}"
            aau = AddressAllocationUnit(0, rat_capacity=capacity)
            n_regions = int(gen.integers(1, max_regions + 1))
            mids = [aau.register_region(0x10000 + i * row_size * arrivals, row_size, arrivals) for i in range(n_regions)]
            # each producer owns a disjoint RowID range; arrivals interleave across producers
            n_producers = int(gen.integers(1, producers + 1))
            pool = [(int(gen.integers(n_regions)), p * 1_000_000 + int(gen.integers(0, 64)))
                    for p in range(n_producers) for _ in range(16)]
            known: dict[tuple[MallocId, int], int] = {}
            table: OrderedDict[tuple[MallocId, int], None] = OrderedDict()
            pointers = dict.fromkeys(mids, 0)
            for pick in gen.integers(0, len(pool), size=arrivals).tolist():
                region_index, row_id = pool[pick]
                mid = mids[region_index]
                offset = int(gen.integers(0, row_size // FLIT_BYTES)) * FLIT_BYTES
                tag = (mid, row_id)
                evicted = None
                if tag in table:
                    outcome = TranslateOutcome.HIT
                else:
                    if tag in known:
                        outcome = TranslateOutcome.RECOVER
                    else:
                        outcome = TranslateOutcome.ALLOCATE
                        known[tag] = pointers[mid]
                        pointers[mid] += 1
                    if len(table) >= capacity:
                        evicted, _ = table.popitem(last=False)
                    table[tag] = None
                t = aau.translate(mid, row_id, offset)
                local = known[tag]
                base = aau.region(mid).base_addr
                result.expect(t.outcome is outcome, f"{where}: row {row_id} was a {t.outcome.value}, expected {outcome.value}")
                result.expect(t.local_row_id == local, f"{where}: row {row_id} at {t.local_row_id}, expected {local}")
                result.expect(t.evicted == evicted, f"{where}: evicted {t.evicted}, expected {evicted}")
                result.expect(t.address == base + local * row_size + offset, f"{where}: bad address for row {row_id}")
                result.expect(len(aau.rat) <= capacity, f"{where}: RAT holds {len(aau.rat)} > {capacity}")
            for mid in mids:
                own = {row: local for (m, row), local in known.items() if m == mid}
                result.expect(aau.allocations(mid) == own, f"{where}: {tuple(mid)} mappings differ from the replay")
                result.expect(sorted(own.values()) == list(range(len(own))), f"{where}: {tuple(mid)} LocalRowIDs not dense")
                result.expect(aau.allocated_rows(mid) == len(own), f"{where}: APT pointer {aau.allocated_rows(mid)} != {len(own)} rows")
    return result


def _line_pieces(gen: Any) -> list[tuple[int, int]]:
    """Random split of one 128 B line into aligned 16/32/64 B stores, shuffled."""
    pieces = []
    offset = 0
    while offset < LINE_BYTES:
        size = int(gen.choice([s for s in (16, 32, 64) if offset + s <= LINE_BYTES]))
        pieces.append((offset, size))
        offset += size
    return [pieces[i] for i in gen.permutation(len(pieces)).tolist()]


def check_rpm(rng: Rng, *, requests: int = 2000, peers: int = 3, entries: int = 8, bypass_ps: SimTime = 1_000,
              step_ps: SimTime = 50, windows: int = 20) -> SuiteResult:
    """Merging conserves every written sub-block and emission follows the four-level order.

    Partials wait at most the bypass interval before becoming eligible, and lines
    written completely inside one window leave as one full packet each.
    """
    result = SuiteResult("rpm")
    gen = rng.generator()
    rpm = RuntimePacketManager(0, range(1, peers + 1), entries=entries, bypass_ps=bypass_ps)
    wanted: dict[tuple, int] = {}
    emitted: dict[tuple, int] = {}
    now: SimTime = 0

    def emit_one() -> bool:
        best = {peer: next(iter(p.ordered()), None) for peer, p in rpm.partitions.items()}
        entry, _ = rpm.select_next(lambda e: EgressCheck.OK)
        if entry is None:
            result.expect(all(b is None for b in best.values()), "nothing emitted while eligible entries were resident")
            return False
        expected = best[entry.dst_gpu]
        result.expect(entry is expected, f"entry {entry.key} left ahead of {getattr(expected, 'key', None)}")
        result.expect(entry.full or entry.promoted, f"partial entry {entry.key} left without promotion")
        slot = (entry.key, entry.priority)
        emitted[slot] = emitted.get(slot, 0) | entry.mask
        return True

    def tick(at: SimTime) -> None:
        rpm.timer_bypass(at)
        for partition in rpm.partitions.values():
            for entry in partition.entries.values():
                if not (entry.full or entry.promoted):
                    result.expect(entry.insert_time + bypass_ps > at, f"partial entry {entry.key} held past its bypass deadline")

    for _ in range(requests):
        dst = int(gen.integers(1, peers + 1))
        row = int(gen.integers(0, 32))
        size = int(gen.choice([16, 32, 64]))
        offset = int(gen.integers(0, (LINE_BYTES - size) // FLIT_BYTES + 1)) * FLIT_BYTES
        priority = Priority.HIGH if gen.random() < 0.8 else Priority.NOP
        request = StoreRequest(0, dst, size, priority, logical_dest=LogicalDest(MallocId(dst, 0), row, offset))
        slot_key = (("row", MallocId(dst, 0), row, 0), priority)
        while not rpm.enqueue(request, now):
            now += step_ps
            tick(now)
            emit_one()
        wanted[slot_key] = wanted.get(slot_key, 0) | request.mask
        now += int(gen.integers(0, step_ps))
        tick(now)
        if gen.random() < 0.5:
            emit_one()
    now += 10 * bypass_ps
    tick(now)
    while emit_one():
        pass
    result.expect(rpm.is_empty(), f"{rpm.resident_entries} entries left resident")
    for slot, mask in wanted.items():
        result.expect(emitted.get(slot, 0) | mask == emitted.get(slot, 0), f"sub-blocks of {slot[0]} never emitted")
    stats = rpm.stats
    result.expect(stats.emitted_bytes == stats.enqueued_bytes, f"emitted {stats.emitted_bytes} B of {stats.enqueued_bytes} B written")

    for w in range(windows):
        window = RuntimePacketManager(0, range(1, peers + 1), entries=entries, bypass_ps=-1)
        lines = [(dst, row) for dst in range(1, peers + 1) for row in range(int(gen.integers(1, entries + 1)))]
        stores = [(dst, row, offset, size) for dst, row in lines for offset, size in _line_pieces(gen)]
        for i in gen.permutation(len(stores)).tolist():
            dst, row, offset, size = stores[i]
            accepted = window.enqueue(StoreRequest(0, dst, size, logical_dest=LogicalDest(MallocId(dst, 0), row, offset)), 0)
            result.expect(accepted, f"window {w}: store to gpu{dst} row {row} stalled")
        packets = 0
        while window.select_next(lambda e: EgressCheck.OK)[0] is not None:
            packets += 1
        result.expect(packets == len(lines), f"window {w}: {len(lines)} lines left as {packets} packets")
        result.expect(window.stats.full_packets == len(lines), f"window {w}: {window.stats.full_packets} full packets")
        result.expect(window.stats.merges == len(stores) - len(lines), f"window {w}: {window.stats.merges} merges")
    return result


class _RecordingSink:
    def __init__(self) -> None:
        self.released: dict[int, tuple[int, SimTime]] = {}
        self.deallocated: set[int] = set()
        self.duplicate_release: list[int] = []

    def release_tile(self, kernel_id: int, segment: int, tile: int, rows: int, at: SimTime) -> None:
        if tile in self.released:
            self.duplicate_release.append(tile)
        self.released[tile] = (rows, at)

    def set_tile_flag(self, kernel_id: int, segment: int, tile: int, rows: int, at: SimTime) -> None:
        self.release_tile(kernel_id, segment, tile, rows, at)

    def deallocate_tile(self, kernel_id: int, segment: int, tile: int) -> None:
        self.deallocated.add(tile)


def check_dam(rng: Rng, *, rounds: int = 4, capacity_rows: int = 96, tm: int = 16, row_size: int = 384) -> SuiteResult:
    """Tiles fire exactly once, only after every counted chunk is covered; AllReady frees untouched tiles."""
    result = SuiteResult("dam")
    gen = rng.generator()
    chunks = row_size // LINE_BYTES
    for r in range(rounds):
        engine = Engine()
        sink = _RecordingSink()
        dam = DataAvailabilityManager(0, engine, sink, signal_latency_ps=0)
        dam.attach_phase("dispatch", DamMode.SIGNAL)
        aau = AddressAllocationUnit(0)
        region = aau.region(aau.register_region(0x4000, row_size, capacity_rows))
        table = dam.build_dependency_table(region, 1, 0, tm, phase="dispatch")
        filled = int(gen.integers(tm, capacity_rows - tm))
        lines = [(row, c) for row in range(filled) for c in range(chunks)]
        order = gen.permutation(len(lines)).tolist()
        order += gen.choice(len(lines), size=len(lines) // 8).tolist()  # duplicates
        covered: set[tuple[int, int]] = set()
        for i in order:
            row, c = lines[i]
            tile = row // tm
            already = tile in sink.released
            dam.on_write_ack(region.base_addr + row * row_size + c * LINE_BYTES)
            covered.add((row, c))
            if tile in sink.released and not already:
                first = tile * tm
                need = {(x, k) for x in range(first, min(first + tm, capacity_rows)) for k in range(chunks)}
                result.expect(need <= covered, f"round {r}: tile {tile} released with missing chunks")
        dam.on_all_ready("dispatch")
        result.expect(not sink.duplicate_release, f"round {r}: tiles released twice: {sink.duplicate_release}")
        for entry in table.entries:
            first = entry.index * tm
            if first >= filled:
                result.expect(entry.index in sink.deallocated, f"round {r}: untouched tile {entry.index} not deallocated")
            else:
                rows = sink.released.get(entry.index, (None, 0))[0]
                result.expect(rows == min(tm, filled - first), f"round {r}: tile {entry.index} released {rows} rows")
    return result


def tiny_params(resolved: Mapping[str, Any] | None) -> SimParams:
    if resolved is None:
        params = SimParams()
    else:
        params = build_params(resolved, n_gpus=TINY_MODEL.n_gpus, dtype_bytes=TINY_MODEL.dtype_bytes)
    return replace(
        params,
        topology=replace(params.topology, n_gpus=TINY_MODEL.n_gpus),
        gpu=replace(params.gpu, n_sms=16),
        tile_m=32,
        tile_n=64,
    )


def _write_recorder(engine: Engine, writes: dict[int, SimTime]) -> Callable[[Packet, int], None]:
    def record(packet: Packet, address: int) -> None:
        writes[address] = engine.now

    return record


def check_readiness(rng: Rng, resolved: Mapping[str, Any] | None, *, layers: int = 3) -> SuiteResult:
    """In whole layers a DAM-gated tile is ready one signal latency after its last counted write.

    Partially filled tiles fire on AllReady instead. No thread block of a tile
    computes before the tile is ready.
    """
    result = SuiteResult("readiness")
    params = tiny_params(resolved)
    latency = params.hub.signal_latency_ps
    for n in range(layers):
        routing = generate_routing(TINY_MODEL, 0.03, fork_stream(rng, f"validate/readiness/{n}"))
        layer = MoeHubLayer(Pipeline.MOEHUB, routing, params)
        layer.build()
        writes: dict[int, SimTime] = {}
        for hub in layer.system.hubs:
            hub.write_listeners.append(_write_recorder(layer.engine, writes))
        layer.finish()
        all_ready = {phase: layer.phases.get(f"all_ready_{phase}") for phase in ("dispatch", "combine")}
        for gpu, hub in zip(layer.system.gpus, layer.system.hubs):
            tables = {(t.kernel_id, t.segment): t for t in hub.dam.tables}
            for kernel_id, segment, index, fired_at, ready_at in hub.dam.ready_log:
                table = tables[(kernel_id, segment)]
                entry = table.entries[index]
                where = f"layer {n} {table.name} tile {index}"
                last = max((at for address, at in writes.items()
                            if entry.start <= address < entry.end and (address - table.base) % table.row_size < table.counted_bytes),
                           default=None)
                result.expect(ready_at == fired_at + latency, f"{where}: ready {ready_at} ps, fired {fired_at} ps")
                result.expect(last is not None and last <= fired_at, f"{where}: fired at {fired_at} ps before its write at {last} ps")
                result.expect(fired_at in (last, all_ready[table.phase]),
                              f"{where}: fired at {fired_at} ps, last write {last} ps, AllReady {all_ready[table.phase]} ps")
                for tb in gpu.kernels[kernel_id].tbs:
                    if tb.segment == segment and tb.tile_i == index and tb.compute_start is not None:
                        result.expect(tb.compute_start >= ready_at, f"{where}: tb {tb.tb_id} computed at {tb.compute_start} ps")
    return result


def check_congestion(rng: Rng, resolved: Mapping[str, Any] | None, *, seeds: int = 3) -> SuiteResult:
    """Skewed bursts on thin links: per-peer merge buffers finish dispatch no later than one global FIFO."""
    result = SuiteResult("congestion")
    base = tiny_params(resolved)
    params = replace(base, topology=replace(base.topology, n_gpus=BURST_MODEL.n_gpus, gpu_bandwidth=BURST_BANDWIDTH))
    for n in range(seeds):
        routing = generate_routing(BURST_MODEL, 0.05, fork_stream(rng, f"validate/congestion/{n}"))
        merged = run_layer(Pipeline.MOEHUB, routing, params)
        fifo = run_layer(Pipeline.MH_DEP, routing, params)
        done_merged = merged.phases["all_ready_dispatch"]
        done_fifo = fifo.phases["all_ready_dispatch"]
        result.expect(done_merged <= done_fifo, f"seed {n}: dispatch done at {done_merged} ps merged, {done_fifo} ps with FIFO")
        sent_merged = merged.stats["fabric"]["packets"]
        sent_fifo = fifo.stats["fabric"]["packets"]
        result.expect(sent_merged < sent_fifo, f"seed {n}: {sent_merged} packets merged, {sent_fifo} with FIFO")
    return result


def single_gpu_gap(params: SimParams | None = None) -> tuple[float, dict[str, Any]]:
    """ideal/moehub span ratio on one GPU, where every store takes the loopback path."""
    params = params or SimParams()
    routing = generate_routing(SINGLE_GPU_MODEL, 0.0, Rng(0))
    ideal = run_layer(Pipeline.IDEAL, routing, params)
    moehub = run_layer(Pipeline.MOEHUB, routing, params)
    return ideal.span_ps / moehub.span_ps, moehub.stats


def check_single_gpu(rng: Rng, resolved: Mapping[str, Any] | None) -> SuiteResult:
    """With no peers, MoE-Hub stays within a few percent of the ideal layer."""
    result = SuiteResult("single_gpu")
    ratio, stats = single_gpu_gap()
    result.expect(ratio >= SINGLE_GPU_RATIO_MIN, f"ideal/moehub = {ratio:.3f} < {SINGLE_GPU_RATIO_MIN}")
    result.expect(stats["fabric"]["flits"] == 0, f"{stats['fabric']['flits']} flits crossed the fabric")
    result.expect(stats["gpus"]["issue_stalls"] == 0, f"{stats['gpus']['issue_stalls']} store issue stalls")
    return result


def check_pipelines(rng: Rng, resolved: Mapping[str, Any] | None) -> SuiteResult:
    """Every pipeline delivers each (token, expert) pair and none beats the ideal layer; reruns are identical."""
    result = SuiteResult("determinism")
    params = tiny_params(resolved)
    routing = generate_routing(TINY_MODEL, 0.03, fork_stream(rng, "validate/routing"))
    spans: dict[str, int] = {}
    for pipeline in Pipeline:
        first = run_layer(pipeline, routing, params).to_dict()
        second = run_layer(pipeline, routing, params).to_dict()
        spans[pipeline.value] = first["span_ps"]
        result.expect(first == second, f"{pipeline.value}: rerun differs")
        result.expect(first["pairs_ok"] is not False, f"{pipeline.value}: token/expert pairs lost")
        result.expect(sum(first["breakdown"].values()) == first["span_ps"], f"{pipeline.value}: breakdown does not sum to span")
    ideal = spans[Pipeline.IDEAL.value]
    for name, span in spans.items():
        result.expect(span >= ideal, f"{name}: {span} ps below ideal {ideal} ps")
    return result


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "aau": lambda rng, resolved: check_aau(rng),
    "rpm": lambda rng, resolved: check_rpm(rng),
    "dam": lambda rng, resolved: check_dam(rng),
    "readiness": check_readiness,
    "congestion": check_congestion,
    "single_gpu": check_single_gpu,
    "determinism": check_pipelines,
}


def run_validation(seed: int, resolved: Mapping[str, Any] | None = None) -> list[dict[str, Any]]:
    out = []
    for name, suite in SUITES.items():
        res = suite(fork_stream(Rng(seed), f"validate/{name}"), resolved)
        level = logging.INFO if res.ok else logging.ERROR
        logger.log(level, "%s: %d check(s), %d violation(s)", name, res.checked, len(res.violations))
        out.append(res.as_dict())
    return out
