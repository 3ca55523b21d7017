"""GPU compute side: SM slots, thread-block dispatcher, kernel launch, store issue"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Protocol, Sequence

from moehub_sim.core.engine import Engine, Event, SimTime, ps_per_unit
from moehub_sim.core.errors import LogicError, SetupError
from moehub_sim.core.packets import StoreRequest

logger = logging.getLogger(__name__)


class KernelKind(Enum):
    ROUTING = "routing"
    GEMM1 = "gemm1"
    GEMM2 = "gemm2"
    SCALING = "scaling"
    SHUFFLE = "shuffle"
    COPY = "copy"


class Gating(Enum):
    IMMEDIATE = "immediate"
    DAM = "dam_gated"
    POLL = "poll_gated"
    CHAINED = "chained"  # row tile i waits for row tile i of an upstream kernel


class TbState(Enum):
    AWAITING_DATA = "awaiting_data"
    READY = "ready"
    RUNNING = "running"
    DONE = "done"
    DEALLOCATED = "deallocated"


_TRANSITIONS = {
    TbState.AWAITING_DATA: {TbState.READY, TbState.DEALLOCATED},
    TbState.READY: {TbState.RUNNING},
    TbState.RUNNING: {TbState.DONE},
}


@dataclass(frozen=True)
class Segment:
    """One GEMM (or memory pass) inside a kernel; grouped kernels hold several."""

    m: int
    n: int
    k: int
    label: str = ""
    row_bytes: int | None = None  # bytes moved per row at full width, overrides the GEMM estimate
    extra_ps: SimTime = 0
    traffic_rows: int | None = None  # rows that actually stream the weights, when m is a capacity bound

    def row_tiles(self, tm: int) -> int:
        return -(-self.m // tm) if self.m > 0 and self.n > 0 else 0

    def col_tiles(self, tn: int) -> int:
        return -(-self.n // tn) if self.m > 0 and self.n > 0 else 0


@dataclass(frozen=True)
class KernelSpec:
    kind: KernelKind
    name: str
    segments: tuple[Segment, ...] = ()
    tm: int = 128
    tn: int = 128

    @classmethod
    def gemm(cls, kind: KernelKind, name: str, m: int, n: int, k: int, *, tm: int = 128, tn: int = 128) -> KernelSpec:
        return cls(kind, name, (Segment(m, n, k),), tm, tn)

    def __post_init__(self) -> None:
        if self.tm <= 0 or self.tn <= 0:
            raise SetupError(f"{self.name}: tile dimensions must be positive")
        for seg in self.segments:
            if seg.m < 0 or seg.n < 0 or seg.k < 0:
                raise SetupError(f"{self.name}: negative GEMM dimension")

    @property
    def tb_count(self) -> int:
        return sum(s.row_tiles(self.tm) * s.col_tiles(self.tn) for s in self.segments)

    @property
    def flops(self) -> int:
        return sum(2 * s.m * s.n * s.k for s in self.segments)


@dataclass(frozen=True)
class GpuTiming:
    """Per-GPU compute constants, already in integer picoseconds / per-SM rates."""

    n_sms: int = 132
    tbs_per_sm: int = 1
    launch_latency_ps: SimTime = 5_000_000
    sm_flops: float = 700e12 / 132
    sm_mem_bw: float = 3.0e12 / 132
    dtype_bytes: int = 2
    store_issue_ps: SimTime = 125
    issue_batch: int = 4
    poll_interval_ps: SimTime = 1_000_000
    poll_interference: float = 0.0

    def tb_duration(self, segment: Segment, rows: int, cols: int) -> SimTime:
        """Roofline time of one tile: max(compute, memory) plus a fixed per-TB cost.

        Operand traffic is the tile's share of the GEMM's compulsory traffic, so the
        tiles of a kernel add up to the whole-GEMM roofline.
        """
        if rows <= 0 or cols <= 0:
            return 0
        flops = 2 * rows * cols * segment.k
        if segment.row_bytes is not None:
            nbytes = rows * segment.row_bytes * cols / segment.n
        else:
            d = self.dtype_bytes
            m = segment.m if segment.traffic_rows is None else segment.traffic_rows
            nbytes = rows * segment.k * d * cols / segment.n + segment.k * cols * d * rows / max(m, rows) + rows * cols * d
        compute = flops / self.sm_flops if flops else 0.0
        memory = nbytes / self.sm_mem_bw if nbytes else 0.0
        return max(1, int(max(compute, memory) * 1e12 + 0.5)) + segment.extra_ps


@dataclass(slots=True, eq=False)
class TbDescriptor:
    tb_id: int
    kernel_id: int
    segment: int
    tile_i: int
    tile_j: int
    rows: int
    cols: int
    duration: SimTime = 0
    state: TbState = TbState.AWAITING_DATA
    ready_at: SimTime | None = None
    dispatched_at: SimTime | None = None
    compute_start: SimTime | None = None
    done_at: SimTime | None = None
    slot: int = -1
    polling: bool = False

    def move(self, state: TbState) -> None:
        if state not in _TRANSITIONS.get(self.state, ()):
            raise LogicError(f"tb {self.kernel_id}/{self.tb_id}: illegal transition {self.state.value} -> {state.value}")
        self.state = state


TileKey = tuple[int, int]


@dataclass(eq=False)
class Kernel:
    """Launched kernel handle."""

    kernel_id: int
    gpu: int
    spec: KernelSpec
    gating: Gating
    stream: str
    enqueued_at: SimTime
    order: int
    deps: list[Kernel] = field(default_factory=list)
    tbs: list[TbDescriptor] = field(default_factory=list)
    tiles: dict[TileKey, list[TbDescriptor]] = field(default_factory=dict)
    start_at: SimTime | None = None
    done_at: SimTime | None = None
    start_scheduled: bool = False
    pending_tbs: int = 0
    pending_stores: int = 0
    tile_left: dict[TileKey, int] = field(default_factory=dict)
    tile_outcome: dict[TileKey, int | None] = field(default_factory=dict)
    flags: dict[TileKey, tuple[int, SimTime]] = field(default_factory=dict)
    downstream: list[Kernel] = field(default_factory=list)
    on_start: Callable[[Kernel], None] | None = None
    on_tb_start: Callable[[Kernel, TbDescriptor], None] | None = None
    on_tb_done: Callable[[Kernel, TbDescriptor], None] | None = None
    before_compute: Callable[[Kernel, TbDescriptor], None] | None = None
    on_done: list[Callable[[Kernel], None]] = field(default_factory=list)
    first_compute: SimTime | None = None
    poll_ps: SimTime = 0
    busy_ps: SimTime = 0
    flops_done: int = 0

    @property
    def done(self) -> bool:
        return self.done_at is not None

    @property
    def started(self) -> bool:
        return self.start_at is not None

    @property
    def kind(self) -> KernelKind:
        return self.spec.kind


class StoreSink(Protocol):
    def accept(self, request: StoreRequest) -> bool: ...


class Gpu:
    """Engine component ``gpu<id>``."""

    def __init__(self, engine: Engine, gpu_id: int, timing: GpuTiming) -> None:
        if timing.n_sms <= 0 or timing.tbs_per_sm <= 0:
            raise SetupError("a GPU needs at least one SM slot")
        self.engine = engine
        self.gpu_id = gpu_id
        self.name = f"gpu{gpu_id}"
        self.timing = timing
        self.hub: StoreSink | None = None
        self.kernels: dict[int, Kernel] = {}
        self._streams: dict[str, Kernel] = {}
        self._waiting: list[Kernel] = []
        self._ready: list[tuple[int, int, TbDescriptor]] = []
        self._free_slots = list(range(timing.n_sms * timing.tbs_per_sm))
        heapq.heapify(self._free_slots)
        self.slot_busy = [0] * (timing.n_sms * timing.tbs_per_sm)
        self._polling = 0
        self._running: dict[str, int] = {}
        self._opened: dict[str, SimTime] = {}
        self._next_kernel = 0
        self._issue: list[tuple[SimTime, int, StoreRequest, Kernel | None]] = []
        self._issue_seq = 0
        self._issue_pending = False
        self._issue_stalled = False
        self.activity: list[tuple[SimTime, SimTime, str]] = []
        self.stats = {"tbs_dispatched": 0, "tbs_deallocated": 0, "sm_busy_ps": 0, "poll_ps": 0,
                      "tb_duration_ps": 0, "flops": 0, "stores_issued": 0, "issue_stalls": 0}
        engine.register(self)

    # -- kernels ------------------------------------------------------------
    def launch_kernel(
        self,
        spec: KernelSpec,
        gating: Gating = Gating.IMMEDIATE,
        *,
        stream: str = "compute",
        after: Iterable[Kernel] = (),
        chain_from: Kernel | None = None,
        at: SimTime | None = None,
    ) -> Kernel:
        """Enqueue a kernel; it starts at max(enqueue + launch latency, stream and dependency completion)."""
        enqueued = self.engine.now if at is None else at
        if enqueued < self.engine.now:
            raise SetupError(f"{spec.name}: launch in the past")
        if gating is Gating.CHAINED and chain_from is None:
            raise SetupError(f"{spec.name}: chained gating needs an upstream kernel")
        kernel = Kernel(self._next_kernel, self.gpu_id, spec, gating, stream, enqueued, self._next_kernel)
        self._next_kernel += 1
        previous = self._streams.get(stream)
        if previous is not None:
            kernel.deps.append(previous)
        kernel.deps.extend(after)
        self._streams[stream] = kernel
        self.kernels[kernel.kernel_id] = kernel
        self._build_tbs(kernel)
        if chain_from is not None:
            chain_from.downstream.append(kernel)
            for key, rows in chain_from.tile_outcome.items():
                self._chain_release(kernel, key, rows)
        self._waiting.append(kernel)
        self._try_start(kernel)
        return kernel

    def _build_tbs(self, kernel: Kernel) -> None:
        spec = kernel.spec
        tb_id = 0
        for s, seg in enumerate(spec.segments):
            for i in range(seg.row_tiles(spec.tm)):
                rows = min(spec.tm, seg.m - i * spec.tm)
                group = []
                for j in range(seg.col_tiles(spec.tn)):
                    cols = min(spec.tn, seg.n - j * spec.tn)
                    tb = TbDescriptor(tb_id, kernel.kernel_id, s, i, j, rows, cols)
                    tb.duration = self.timing.tb_duration(seg, rows, cols)
                    kernel.tbs.append(tb)
                    group.append(tb)
                    tb_id += 1
                kernel.tiles[(s, i)] = group
                kernel.tile_left[(s, i)] = len(group)
        kernel.pending_tbs = len(kernel.tbs)

    def _try_start(self, kernel: Kernel) -> None:
        if kernel.start_scheduled or any(not dep.done for dep in kernel.deps):
            return
        deps_done = max((dep.done_at for dep in kernel.deps), default=0)
        start = max(kernel.enqueued_at + self.timing.launch_latency_ps, deps_done, self.engine.now)
        kernel.start_scheduled = True
        self._waiting.remove(kernel)
        self.engine.schedule(start, self.name, "kernel_start", kernel)

    def _start_kernel(self, kernel: Kernel) -> None:
        now = self.engine.now
        kernel.start_at = now
        logger.debug("%s start %s (%d TBs) at t=%d", self.name, kernel.spec.name, len(kernel.tbs), now)
        self.engine.annotate(kernel=kernel.spec.name, tbs=len(kernel.tbs))
        if kernel.on_start is not None:
            kernel.on_start(kernel)
        for tb in kernel.tbs:
            if kernel.gating is Gating.IMMEDIATE:
                tb.move(TbState.READY)
                tb.ready_at = now
                self._push_ready(kernel, tb)
            elif kernel.gating is Gating.POLL:
                self._push_ready(kernel, tb)
            elif tb.state is TbState.READY:
                self._push_ready(kernel, tb)
        self._maybe_finish(kernel)
        self.dispatch_ready_tbs()

    def _push_ready(self, kernel: Kernel, tb: TbDescriptor) -> None:
        heapq.heappush(self._ready, (kernel.order, tb.tb_id, tb))

    def _activity_begin(self, kind: str, now: SimTime) -> None:
        count = self._running.get(kind, 0)
        if count == 0:
            self._opened[kind] = now
        self._running[kind] = count + 1

    def _activity_end(self, kind: str, now: SimTime) -> None:
        count = self._running[kind] - 1
        self._running[kind] = count
        if count == 0 and now > self._opened[kind]:
            self.activity.append((self._opened[kind], now, kind))

    # -- tile signals (DAM / flags / chaining) -------------------------------
    def release_tile(self, kernel_id: int, segment: int, tile: int, rows: int, at: SimTime) -> None:
        self.engine.schedule(at, self.name, "tile_ready", (kernel_id, segment, tile, rows))

    def deallocate_tile(self, kernel_id: int, segment: int, tile: int) -> None:
        kernel = self.kernels[kernel_id]
        for tb in kernel.tiles[(segment, tile)]:
            tb.move(TbState.DEALLOCATED)
            kernel.pending_tbs -= 1
            self.stats["tbs_deallocated"] += 1
        kernel.tile_left[(segment, tile)] = 0
        self._tile_finished(kernel, (segment, tile), None)
        if kernel.started:
            self._maybe_finish(kernel)

    def set_tile_flag(self, kernel_id: int, segment: int, tile: int, rows: int, at: SimTime) -> None:
        kernel = self.kernels[kernel_id]
        key = (segment, tile)
        if key in kernel.flags:
            raise LogicError(f"{kernel.spec.name}: tile {key} flagged twice")
        kernel.flags[key] = (rows, at)
        for tb in kernel.tiles[key]:
            if tb.polling:
                self._finish_poll(kernel, tb)

    def _apply_rows(self, kernel: Kernel, tb: TbDescriptor, rows: int) -> None:
        if rows != tb.rows:
            tb.rows = rows
            tb.duration = self.timing.tb_duration(kernel.spec.segments[tb.segment], rows, tb.cols)

    def _on_tile_ready(self, kernel_id: int, segment: int, tile: int, rows: int) -> None:
        kernel = self.kernels[kernel_id]
        now = self.engine.now
        self.engine.annotate(kernel=kernel.spec.name, tile=tile, rows=rows)
        for tb in kernel.tiles[(segment, tile)]:
            self._apply_rows(kernel, tb, rows)
            tb.move(TbState.READY)
            tb.ready_at = now
            if kernel.started:
                self._push_ready(kernel, tb)
        if kernel.started:
            self.dispatch_ready_tbs()

    def _chain_release(self, kernel: Kernel, key: TileKey, rows: int | None) -> None:
        if key not in kernel.tiles:
            return
        if rows is None:
            self.deallocate_tile(kernel.kernel_id, key[0], key[1])
        else:
            self.release_tile(kernel.kernel_id, key[0], key[1], rows, self.engine.now)

    def _tile_finished(self, kernel: Kernel, key: TileKey, rows: int | None) -> None:
        kernel.tile_outcome[key] = rows
        for down in kernel.downstream:
            self._chain_release(down, key, rows)

    # -- dispatch -----------------------------------------------------------
    def dispatch_ready_tbs(self) -> int:
        """Greedy assignment of ready TBs to idle SM slots, ascending (kernel, tb_id)."""
        dispatched = 0
        ready = self._ready
        free = self._free_slots
        now = self.engine.now
        while ready and free:
            _, _, tb = heapq.heappop(ready)
            kernel = self.kernels[tb.kernel_id]
            slot = heapq.heappop(free)
            tb.slot = slot
            tb.dispatched_at = now
            self.stats["tbs_dispatched"] += 1
            dispatched += 1
            if kernel.gating is Gating.POLL and tb.state is TbState.AWAITING_DATA:
                tb.polling = True
                self._polling += 1
                self._activity_begin("poll", now)
                if (tb.segment, tb.tile_i) in kernel.flags:
                    self._finish_poll(kernel, tb)
            else:
                self._begin_compute(kernel, tb, now)
        return dispatched

    def _finish_poll(self, kernel: Kernel, tb: TbDescriptor) -> None:
        """Compute starts at the first poll instant that observes the flag."""
        rows, flag_at = kernel.flags[(tb.segment, tb.tile_i)]
        period = self.timing.poll_interval_ps
        assert tb.dispatched_at is not None
        waited = flag_at + period - tb.dispatched_at
        polls = max(1, -(-waited // period)) if period > 0 else 0
        start = max(tb.dispatched_at + polls * period, self.engine.now)
        tb.polling = False
        self._apply_rows(kernel, tb, rows)
        self.engine.schedule(start, self.name, "poll_done", tb)

    def _on_poll_done(self, tb: TbDescriptor) -> None:
        kernel = self.kernels[tb.kernel_id]
        now = self.engine.now
        self._polling -= 1
        self._activity_end("poll", now)
        assert tb.dispatched_at is not None
        waited = now - tb.dispatched_at
        kernel.poll_ps += waited
        self.stats["poll_ps"] += waited
        tb.move(TbState.READY)
        tb.ready_at = now
        if tb.rows == 0:
            tb.move(TbState.RUNNING)
            tb.compute_start = now
            tb.duration = 0
            self._complete_tb(kernel, tb, computed=False)
            return
        self._begin_compute(kernel, tb, now)

    def _begin_compute(self, kernel: Kernel, tb: TbDescriptor, now: SimTime) -> None:
        if kernel.before_compute is not None:
            kernel.before_compute(kernel, tb)
        tb.move(TbState.RUNNING)
        tb.compute_start = now
        if self.timing.poll_interference and self._polling:
            slots = len(self.slot_busy)
            tb.duration = int(tb.duration * (1 + self.timing.poll_interference * self._polling / slots))
        if kernel.first_compute is None:
            kernel.first_compute = now
        self._activity_begin(kernel.kind.value, now)
        if kernel.on_tb_start is not None:
            kernel.on_tb_start(kernel, tb)
        self.engine.schedule(now + tb.duration, self.name, "tb_done", tb)

    def _complete_tb(self, kernel: Kernel, tb: TbDescriptor, *, computed: bool = True) -> None:
        now = self.engine.now
        if kernel.on_tb_done is not None:
            kernel.on_tb_done(kernel, tb)
        tb.move(TbState.DONE)
        tb.done_at = now
        if computed:
            self._activity_end(kernel.kind.value, now)
        busy = now - tb.dispatched_at  # type: ignore[operator]
        self.slot_busy[tb.slot] += busy
        kernel.busy_ps += busy
        self.stats["sm_busy_ps"] += busy
        self.stats["tb_duration_ps"] += tb.duration
        segment = kernel.spec.segments[tb.segment]
        flops = 2 * tb.rows * tb.cols * segment.k
        kernel.flops_done += flops
        self.stats["flops"] += flops
        heapq.heappush(self._free_slots, tb.slot)
        kernel.pending_tbs -= 1
        key = (tb.segment, tb.tile_i)
        kernel.tile_left[key] -= 1
        if kernel.tile_left[key] == 0:
            self._tile_finished(kernel, key, tb.rows or None)
        self._maybe_finish(kernel)
        self.dispatch_ready_tbs()

    def _maybe_finish(self, kernel: Kernel) -> None:
        if kernel.done or not kernel.started or kernel.pending_tbs or kernel.pending_stores:
            return
        now = self.engine.now
        kernel.done_at = now
        logger.debug("%s done %s at t=%d", self.name, kernel.spec.name, now)
        for callback in kernel.on_done:
            callback(kernel)
        for waiting in list(self._waiting):
            if kernel in waiting.deps:
                self._try_start(waiting)

    # -- store issue --------------------------------------------------------
    def reserve_stores(self, kernel: Kernel, n: int) -> None:
        """Hold ``kernel`` open for ``n`` stores that will be issued later."""
        if kernel.done:
            raise LogicError(f"{kernel.spec.name}: stores reserved after completion")
        kernel.pending_stores += n

    def issue_stores(
        self,
        requests: Sequence[StoreRequest],
        release_at: SimTime | Sequence[SimTime],
        kernel: Kernel | None = None,
        *,
        reserved: bool = False,
    ) -> None:
        """Queue stores for the local hub; released in order at the store issue rate."""
        if self.hub is None:
            raise SetupError(f"{self.name}: no hub attached")
        if kernel is not None and kernel.done:
            raise LogicError(f"{kernel.spec.name}: stores issued after completion")
        now = self.engine.now
        times = [release_at] * len(requests) if isinstance(release_at, int) else release_at
        for request, at in zip(requests, times, strict=True):
            if request.src_gpu != self.gpu_id:
                raise SetupError(f"{self.name}: store from gpu{request.src_gpu}")
            heapq.heappush(self._issue, (max(at, now), self._issue_seq, request, kernel))
            self._issue_seq += 1
        if kernel is not None and not reserved:
            kernel.pending_stores += len(requests)
        self._kick_issue(now)

    def _kick_issue(self, at: SimTime) -> None:
        if self._issue_pending or self._issue_stalled or not self._issue:
            return
        self._issue_pending = True
        self.engine.schedule(max(at, self._issue[0][0], self.engine.now), self.name, "issue")

    def on_store_space(self) -> None:
        """Hub callback: a buffer slot freed, stalled issue may resume."""
        if self._issue_stalled:
            self._issue_stalled = False
            self._kick_issue(self.engine.now)

    def _on_issue(self) -> None:
        self._issue_pending = False
        now = self.engine.now
        queue = self._issue
        issued = 0
        hub = self.hub
        assert hub is not None
        local = 0
        while queue and queue[0][0] <= now:
            _, _, request, kernel = queue[0]
            # same-GPU stores go straight to HBM and do not take fabric issue slots
            remote = request.dst_gpu != self.gpu_id
            if remote and issued >= self.timing.issue_batch:
                break
            if not hub.accept(request):
                self._issue_stalled = True
                self.stats["issue_stalls"] += 1
                break
            heapq.heappop(queue)
            if remote:
                issued += 1
            else:
                local += 1
            self.stats["stores_issued"] += 1
            if kernel is not None:
                kernel.pending_stores -= 1
                if kernel.pending_stores == 0:
                    self._maybe_finish(kernel)
        if issued or local:
            self.engine.annotate(issued=issued + local)
        if not self._issue_stalled:
            self._kick_issue(now + issued * self.timing.store_issue_ps)

    # -- engine -------------------------------------------------------------
    def handle(self, event: Event) -> None:
        kind = event.kind
        if kind == "tb_done":
            tb = event.payload
            self._complete_tb(self.kernels[tb.kernel_id], tb)
        elif kind == "issue":
            self._on_issue()
        elif kind == "tile_ready":
            self._on_tile_ready(*event.payload)
        elif kind == "poll_done":
            self._on_poll_done(event.payload)
        elif kind == "kernel_start":
            self._start_kernel(event.payload)
        else:
            raise ValueError(f"{self.name}: unknown event kind {kind}")

    def is_idle(self) -> bool:
        return not self._issue and all(k.done for k in self.kernels.values())


def issue_interval_ps(rate_per_s: float) -> SimTime:
    """Store issue interval for a request rate in requests per second."""
    return ps_per_unit(1, rate_per_s)


def kernel_summary(kernels: Iterable[Kernel]) -> list[dict[str, Any]]:
    return [
        {"name": k.spec.name, "kind": k.kind.value, "tbs": len(k.tbs), "start_ps": k.start_at, "done_ps": k.done_at,
         "busy_ps": k.busy_ps, "poll_ps": k.poll_ps, "flops": k.flops_done}
        for k in kernels
    ]
