"""Executable MoE layer pipelines on the simulated machine

* ``moehub`` and its ablations (``mh_pkt``, ``mh_dep``, ``mh_base``): logical
  ``st.rowsp`` dispatch streamed out of the routing kernel, on-arrival
  allocation, DAM-gated (or polling) consumers and address-centric combine.
* ``mediated_nonoverlap`` / ``mediated_pipelined``: index shuffle, count
  all-gather, two host round trips, then bulk address-centric all-to-all with
  polling consumers, optionally split into pipelined chunks.
* ``ideal``: routing, expert compute on locally present inputs, scaling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, NamedTuple

from moehub_sim.core.aau import MallocRegion
from moehub_sim.core.dam import DamMode, DependencyTable, GlobalCounter
from moehub_sim.core.engine import SimTime, TraceSink
from moehub_sim.core.gpu import Gating, Kernel, KernelKind, KernelSpec, Segment, TbDescriptor, kernel_summary
from moehub_sim.core.hub import EgressMode
from moehub_sim.core.packets import FLIT_BYTES, LINE_BYTES, LogicalDest, MallocId, Packet, Priority, StoreRequest
from moehub_sim.core.system import SimParams, System
from moehub_sim.services.attribution import attribute
from moehub_sim.services.workload import RoutingResult

logger = logging.getLogger(__name__)


class Pipeline(Enum):
    IDEAL = "ideal"
    MOEHUB = "moehub"
    MH_PKT = "mh_pkt"
    MH_DEP = "mh_dep"
    MH_BASE = "mh_base"
    MEDIATED_PIPELINED = "mediated_pipelined"
    MEDIATED_NONOVERLAP = "mediated_nonoverlap"


# (packet management, dependency tracking)
MH_KNOBS: dict[Pipeline, tuple[bool, bool]] = {
    Pipeline.MOEHUB: (True, True),
    Pipeline.MH_PKT: (True, False),
    Pipeline.MH_DEP: (False, True),
    Pipeline.MH_BASE: (False, False),
}

BASELINES = (Pipeline.MEDIATED_PIPELINED, Pipeline.MEDIATED_NONOVERLAP)


class RowMeta(NamedTuple):
    """Source information carried by the metadata column of an expert-input row."""

    token: int
    slot: int
    src_gpu: int


def fragments(offset: int, nbytes: int, size: int) -> list[tuple[int, int]]:
    """Split ``[offset, offset + nbytes)`` into stores of at most ``size`` bytes that never cross a 128 B line."""
    out = []
    end = offset + nbytes
    while offset < end:
        line_end = offset - offset % LINE_BYTES + LINE_BYTES
        step = min(size, end - offset, line_end - offset)
        out.append((offset, step))
        offset += step
    return out


class AddressSpace:
    """Bump allocator over one GPU's device memory."""

    ALIGN = 1 << 12

    def __init__(self, base: int = 1 << 32) -> None:
        self._next = base

    def take(self, nbytes: int) -> int:
        base = self._next
        self._next += -(-max(nbytes, 1) // self.ALIGN) * self.ALIGN
        return base


@dataclass
class LayerResult:
    pipeline: str
    span_ps: SimTime
    breakdown: dict[str, SimTime]
    link_report: dict[str, Any]
    stats: dict[str, Any]
    tokens_delivered: int
    combined_outputs: int
    expert_flops: int
    pairs_ok: bool | None
    events: dict[str, int]
    phases: dict[str, Any]
    kernels: list[dict[str, Any]]
    timeline: list[tuple[int, float, float]]
    critical_gpu: int
    dependency_tables: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        """Report form; dependency tables are written to their own file."""
        out = asdict(self)
        del out["dependency_tables"]
        return out


def _totals(reports: list[dict[str, dict[str, Any]]]) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for report in reports:
        for section, values in report.items():
            bucket = out.setdefault(section, {})
            for key, value in values.items():
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    continue
                if key.startswith("max_") or key.endswith("_peak"):
                    bucket[key] = max(bucket.get(key, 0), value)
                else:
                    bucket[key] = bucket.get(key, 0) + value
    return out


class _Layer:
    egress = EgressMode.RPM

    def __init__(self, pipeline: Pipeline, routing: RoutingResult, params: SimParams, *, trace: TraceSink | None = None) -> None:
        cfg = routing.cfg
        if params.topology.n_gpus != cfg.n_gpus:
            params = replace(params, topology=replace(params.topology, n_gpus=cfg.n_gpus))
        self.pipeline = pipeline
        self.routing = routing
        self.cfg = cfg
        self.params = params
        self.system = System(params, egress=self.egress, trace=trace)
        self.engine = self.system.engine
        self.spaces = [AddressSpace() for _ in range(cfg.n_gpus)]
        self.act = cfg.row_bytes
        self.experts_tokens = [int(n) for n in routing.tokens_per_expert]
        self.phases: dict[str, Any] = {}
        self.scaling: list[Kernel] = []
        self.expert_kernels: list[Kernel] = []
        self.expert_regions: list[MallocRegion] = []
        self.combine_regions: list[MallocRegion | None] = [None] * cfg.n_gpus

    # -- shared kernel shapes -------------------------------------------------
    def local_experts(self, gpu: int) -> range:
        per = self.cfg.experts_per_gpu
        return range(gpu * per, (gpu + 1) * per)

    def routing_spec(self) -> KernelSpec:
        cfg = self.cfg
        T = cfg.seq_len_per_gpu
        tm = max(1, -(-T // self.params.gpu.n_sms))
        segment = Segment(T, cfg.n_experts, cfg.hidden_size, "gate", extra_ps=self.params.topk_ps)
        return KernelSpec(KernelKind.ROUTING, "routing", (segment,), tm=tm, tn=max(1, cfg.n_experts))

    def gemm_specs(self, rows: list[int], suffix: str = "", *, traffic: list[int] | None = None) -> tuple[KernelSpec, KernelSpec]:
        cfg, p = self.cfg, self.params
        used = traffic if traffic is not None else [None] * len(rows)
        first = tuple(Segment(m, cfg.ffn_hidden_size, cfg.hidden_size, f"x{i}", traffic_rows=t) for i, (m, t) in enumerate(zip(rows, used)))
        second = tuple(Segment(m, cfg.hidden_size, cfg.ffn_hidden_size, f"x{i}", traffic_rows=t) for i, (m, t) in enumerate(zip(rows, used)))
        return (
            KernelSpec(KernelKind.GEMM1, "gemm1" + suffix, first, p.tile_m, p.tile_n),
            KernelSpec(KernelKind.GEMM2, "gemm2" + suffix, second, p.tile_m, p.tile_n),
        )

    def scaling_spec(self) -> KernelSpec:
        cfg, p = self.cfg, self.params
        segment = Segment(cfg.seq_len_per_gpu, cfg.hidden_size, cfg.top_k, "combine", row_bytes=(cfg.top_k + 1) * self.act)
        return KernelSpec(KernelKind.SCALING, "scaling", (segment,), p.tile_m, p.tile_n)

    def register_combine_region(self, gpu: int) -> MallocRegion:
        """Token-ordered output buffer: one ``act``-byte slice per top-k slot."""
        cfg = self.cfg
        row_size = cfg.top_k * self.act
        rows = max(1, cfg.seq_len_per_gpu)
        region = self.system.register_region(gpu, self.spaces[gpu].take(row_size * rows), row_size, rows)
        self.combine_regions[gpu] = region
        return region

    def combine_address(self, token: int, slot: int) -> tuple[int, int]:
        src = token // self.cfg.seq_len_per_gpu
        region = self.combine_regions[src]
        assert region is not None
        return src, region.base_addr + (token - src * self.cfg.seq_len_per_gpu) * region.row_size + slot * self.act

    def check_rows(self, region: MallocRegion, kernel: Kernel, tb: TbDescriptor, counted_bytes: int) -> None:
        shadow = self.system.shadow
        if shadow is not None and tb.tile_j == 0:
            shadow.check_rows(region, tb.tile_i * kernel.spec.tm, tb.rows, counted_bytes)

    def build(self) -> None:
        raise NotImplementedError

    # -- results --------------------------------------------------------------
    def delivery(self) -> tuple[int, int, bool | None]:
        """(rows delivered to experts, combined expert outputs, token/expert pairs intact)."""
        shadow = self.system.shadow
        expected = self.cfg.tokens * self.cfg.top_k
        if shadow is None or not self.expert_regions:
            return expected, expected, None
        need = (1 << (self.act // FLIT_BYTES)) - 1
        expert_ids = {r.malloc_id for r in self.expert_regions}
        combine_ids = {r.malloc_id for r in self.combine_regions if r is not None}
        delivered = 0
        combined_bits = 0
        for (mid, _), bits in shadow.coverage.items():
            if mid in expert_ids:
                delivered += (bits & need) == need
            elif mid in combine_ids:
                combined_bits += bits.bit_count()
        pairs = {tag for (mid, _), tag in shadow.tags.items() if mid in expert_ids}
        combined = combined_bits * FLIT_BYTES // self.act
        return delivered, combined, pairs == self.routing.pairs() and delivered == expected

    def finish(self) -> LayerResult:
        system = self.system
        end = system.run()
        done = [k.done_at or 0 for k in self.scaling]
        span = max(done, default=end)
        critical = max(range(len(done)), key=lambda g: (done[g], -g)) if done else 0
        delivered, combined, pairs_ok = self.delivery()
        hubs = [h.report() for h in system.hubs]
        fabric = system.fabric
        stats = {
            "totals": _totals(hubs),
            "gpus": _totals([{"gpu": g.stats} for g in system.gpus])["gpu"],
            "fabric": {"packets": fabric.injected_packets, "flits": fabric.injected_flits,
                       "loopback_packets": fabric.loopback_packets},
            "per_hub": hubs,
        }
        if system.shadow is not None:
            stats["shadow"] = {"writes": system.shadow.writes, "conflicts": system.shadow.conflicts}
        self.phases["layer_done"] = span
        kernels = []
        for gpu in system.gpus:
            for row in kernel_summary(gpu.kernels.values()):
                kernels.append({"gpu": gpu.gpu_id, **row})
        result = LayerResult(
            pipeline=self.pipeline.value,
            span_ps=span,
            breakdown=attribute(system.gpus[critical].activity, span),
            link_report=fabric.link_report(0, span),
            stats=stats,
            tokens_delivered=delivered,
            combined_outputs=combined,
            expert_flops=sum(k.flops_done for k in self.expert_kernels),
            pairs_ok=pairs_ok,
            events={"scheduled": self.engine.scheduled, "fired": self.engine.fired},
            phases=self.phases,
            kernels=kernels,
            timeline=fabric.utilization_timeline(0, span, self.params.utilization_bucket_ps),
            critical_gpu=critical,
            dependency_tables=[t for hub in system.hubs for t in hub.dam.dump()],
        )
        logger.debug("%s: span %d ps, critical gpu%d", self.pipeline.value, span, critical)
        return result


class IdealLayer(_Layer):
    """Only the essential operators, on locally present tokens."""

    def build(self) -> None:
        for gpu in self.system.gpus:
            routing = gpu.launch_kernel(self.routing_spec(), stream="compute")
            rows = [self.experts_tokens[e] for e in self.local_experts(gpu.gpu_id)]
            spec1, spec2 = self.gemm_specs(rows)
            gemm1 = gpu.launch_kernel(spec1, stream="expert")
            gemm2 = gpu.launch_kernel(spec2, Gating.CHAINED, stream="expert2", chain_from=gemm1)
            scaling = gpu.launch_kernel(self.scaling_spec(), stream="expert2", after=[routing])
            self.expert_kernels += [gemm1, gemm2]
            self.scaling.append(scaling)


class MoeHubLayer(_Layer):
    """Destination-agnostic dispatch with the hub's packet management and dependency tracking."""

    def __init__(self, pipeline: Pipeline, routing: RoutingResult, params: SimParams, *, trace: TraceSink | None = None) -> None:
        self.pkt, self.dep = MH_KNOBS[pipeline]
        self.egress = EgressMode.RPM if self.pkt else EgressMode.FIFO
        super().__init__(pipeline, routing, params, trace=trace)
        self.combine_dam = self.dep and params.combine_dam
        self.regions: dict[int, MallocRegion] = {}
        self.by_mid: dict[MallocId, MallocRegion] = {}
        self.tables: dict[int, DependencyTable] = {}
        self.metadata: dict[tuple[MallocId, int], RowMeta] = {}
        self.deferred: dict[tuple[MallocId, int], list[tuple[Kernel, list[tuple[int, int]]]]] = {}
        self.counts_seen: list[set[int]] = [set() for _ in range(self.cfg.n_gpus)]
        self.counters: dict[str, GlobalCounter] = {}
        self.meta_offset = self.cfg.padded_row_bytes
        self.act_pieces = fragments(0, self.act, params.store_bytes)

    def build(self) -> None:
        cfg, params, system = self.cfg, self.params, self.system
        capacity = max(1, math.ceil(cfg.tokens * params.capacity_factor))
        row_size = cfg.padded_row_bytes + LINE_BYTES
        target = cfg.tokens * cfg.top_k * (self.act // LINE_BYTES)
        latency = params.hub.signal_latency_ps
        if self.dep:
            self.counters["dispatch"] = GlobalCounter(self.engine, "dispatch", target, latency_ps=latency)
        if self.combine_dam:
            self.counters["combine"] = GlobalCounter(self.engine, "combine", target, latency_ps=latency)
        dispatch_mode = DamMode.SIGNAL if self.dep else DamMode.FLAG
        combine_mode = DamMode.SIGNAL if self.combine_dam else DamMode.FLAG

        for gpu, hub in zip(system.gpus, system.hubs):
            g = gpu.gpu_id
            hub.dam.attach_phase("dispatch", dispatch_mode, self.counters.get("dispatch"))
            hub.dam.attach_phase("combine", combine_mode, self.counters.get("combine"))
            hub.write_listeners.append(self._metadata_listener(g))
            hub.on_control = self._control_listener(g)
            for e in self.local_experts(g):
                region = system.register_region(g, self.spaces[g].take(row_size * capacity), row_size, capacity)
                self.regions[e] = region
                self.by_mid[region.malloc_id] = region
                self.expert_regions.append(region)
            combine = self.register_combine_region(g)

            routing = gpu.launch_kernel(self.routing_spec(), stream="compute")
            routing.on_tb_start = self._dispatch
            spec1, spec2 = self.gemm_specs(
                [capacity] * cfg.experts_per_gpu, traffic=[self.experts_tokens[e] for e in self.local_experts(g)]
            )
            gemm1 = gpu.launch_kernel(spec1, Gating.DAM if self.dep else Gating.POLL, stream="expert")
            gemm1.before_compute = self._check_expert_rows
            gemm2 = gpu.launch_kernel(spec2, Gating.CHAINED, stream="expert2", chain_from=gemm1)
            gemm2.on_tb_done = self._combine
            scaling = gpu.launch_kernel(self.scaling_spec(), Gating.DAM if self.combine_dam else Gating.POLL, stream="expert2")
            scaling.before_compute = self._check_combine_rows
            self.expert_kernels += [gemm1, gemm2]
            self.scaling.append(scaling)

            for s, e in enumerate(self.local_experts(g)):
                self.tables[e] = hub.dam.build_dependency_table(
                    self.regions[e], gemm1.kernel_id, s, params.tile_m, phase="dispatch", counted_bytes=self.act
                )
            if cfg.seq_len_per_gpu:
                hub.dam.build_dependency_table(combine, scaling.kernel_id, 0, params.tile_m, phase="combine")
            if not self.dep:
                routing.on_done.append(self._send_counts)

        for name, counter in self.counters.items():
            counter.subscribe(self._note_all_ready)
            counter.arm()

    def _note_all_ready(self, phase: str) -> None:
        self.phases.setdefault(f"all_ready_{phase}", self.engine.now)

    # -- producer side --------------------------------------------------------
    def _dispatch(self, kernel: Kernel, tb: TbDescriptor) -> None:
        """Stores of a routing tile become issuable as its tokens' decisions complete."""
        cfg = self.cfg
        g = kernel.gpu
        first = g * cfg.seq_len_per_gpu + tb.tile_i * kernel.spec.tm
        start = tb.compute_start or self.engine.now
        experts = self.routing.experts
        meta_bytes = self.params.metadata_bytes
        requests: list[StoreRequest] = []
        times: list[SimTime] = []
        for q in range(tb.rows):
            token = first + q
            at = start + (q + 1) * tb.duration // tb.rows
            for slot, expert in enumerate(experts[token].tolist()):
                dst = cfg.expert_gpu(expert)
                mid = self.regions[expert].malloc_id
                tag = (token, expert)
                for offset, size in self.act_pieces:
                    requests.append(StoreRequest(g, dst, size, Priority.HIGH, LogicalDest(mid, token, offset), tag=tag))
                requests.append(StoreRequest(g, dst, meta_bytes, Priority.NOP, LogicalDest(mid, token, self.meta_offset),
                                             tag=RowMeta(token, slot, g)))
                times.extend([at] * (len(self.act_pieces) + 1))
        if requests:
            self.system.gpus[g].issue_stores(requests, times, kernel)

    def _combine_requests(self, gpu: int, meta: RowMeta, pieces: list[tuple[int, int]]) -> list[StoreRequest]:
        src, row = self.combine_address(meta.token, meta.slot)
        return [StoreRequest(gpu, src, size, Priority.HIGH, phys_addr=row + offset, tag=meta.token) for offset, size in pieces]

    def _combine(self, kernel: Kernel, tb: TbDescriptor) -> None:
        """Write one GEMM2 output tile back to the tokens' home GPUs once each row's source is known."""
        g = kernel.gpu
        gpu = self.system.gpus[g]
        region = self.regions[self.local_experts(g)[tb.segment]]
        dtype = self.cfg.dtype_bytes
        pieces = fragments(tb.tile_j * kernel.spec.tn * dtype, tb.cols * dtype, self.params.store_bytes)
        requests: list[StoreRequest] = []
        for r in range(tb.rows):
            key = (region.malloc_id, tb.tile_i * kernel.spec.tm + r)
            meta = self.metadata.get(key)
            if meta is None:
                gpu.reserve_stores(kernel, len(pieces))
                self.deferred.setdefault(key, []).append((kernel, pieces))
                continue
            requests.extend(self._combine_requests(g, meta, pieces))
        if requests:
            gpu.issue_stores(requests, self.engine.now, kernel)

    # -- consumer side --------------------------------------------------------
    def _metadata_listener(self, g: int):
        def record(packet: Packet, address: int) -> None:
            meta = packet.tag
            if not isinstance(meta, RowMeta) or packet.logical_dest is None:
                return
            region = self.by_mid[packet.logical_dest.malloc_id]
            key = (region.malloc_id, (address - region.base_addr) // region.row_size)
            self.metadata[key] = meta
            for kernel, pieces in self.deferred.pop(key, ()):
                self.system.gpus[g].issue_stores(self._combine_requests(g, meta, pieces), self.engine.now, kernel, reserved=True)

        return record

    def _control_listener(self, g: int):
        def on_control(packet: Packet) -> None:
            kind, src = packet.tag
            if kind == "counts":
                self._count_received(g, src)

        return on_control

    def _send_counts(self, kernel: Kernel) -> None:
        g = kernel.gpu
        hub = self.system.hubs[g]
        for peer in range(self.cfg.n_gpus):
            if peer != g:
                hub.send_control(peer, ("counts", g))
        self._count_received(g, g)

    def _count_received(self, g: int, src: int) -> None:
        seen = self.counts_seen[g]
        seen.add(src)
        if len(seen) < self.cfg.n_gpus:
            return
        self.phases.setdefault("counts_known", []).append((g, self.engine.now))
        dam = self.system.hubs[g].dam
        for e in self.local_experts(g):
            dam.finalize_rows(self.tables[e], self.experts_tokens[e])

    def _check_expert_rows(self, kernel: Kernel, tb: TbDescriptor) -> None:
        self.check_rows(self.regions[self.local_experts(kernel.gpu)[tb.segment]], kernel, tb, self.act)

    def _check_combine_rows(self, kernel: Kernel, tb: TbDescriptor) -> None:
        region = self.combine_regions[kernel.gpu]
        assert region is not None
        self.check_rows(region, kernel, tb, region.row_size)


class MediatedLayer(_Layer):
    """Software-mediated dispatch: shuffle, count exchange, host round trips, bulk all-to-all."""

    egress = EgressMode.FIFO

    def __init__(self, pipeline: Pipeline, routing: RoutingResult, params: SimParams, *, trace: TraceSink | None = None) -> None:
        super().__init__(pipeline, routing, params, trace=trace)
        self.chunks = 1 if pipeline is Pipeline.MEDIATED_NONOVERLAP else max(1, params.pipeline_chunks)
        n = self.cfg.n_gpus
        self.rows: dict[tuple[int, int], list[tuple[int, int]]] = {}
        self.regions: dict[tuple[int, int], MallocRegion] = {}
        self.row_index: dict[tuple[int, int], dict[int, int]] = {}
        self.gemm1: list[list[Kernel]] = [[] for _ in range(n)]
        self.gemm2: list[list[Kernel]] = [[] for _ in range(n)]
        self.counts_seen: list[set[int]] = [set() for _ in range(n)]
        self.addrs_seen: list[set[int]] = [set() for _ in range(n)]
        self.mediation_from: list[SimTime] = [0] * n
        self.kernel_chunk: dict[tuple[int, int], int] = {}
        self.phases.update({"counts_known": [None] * n, "sync1": [None] * n, "sync2": [None] * n})
        self._plan_rows()

    def chunk_of(self, token: int) -> int:
        T = self.cfg.seq_len_per_gpu
        return (token % T) * self.chunks // T

    def _plan_rows(self) -> None:
        """Exact expert-input layout per (expert, chunk): rows ordered by (source gpu, token)."""
        cfg = self.cfg
        for e in range(cfg.n_experts):
            for c in range(self.chunks):
                self.rows[(e, c)] = []
        for src in range(cfg.n_gpus):
            for e in range(cfg.n_experts):
                for token, slot in self.routing.assignments.get((src, e), ()):
                    self.rows[(e, self.chunk_of(token))].append((token, slot))
        for key, rows in self.rows.items():
            self.row_index[key] = {token: i for i, (token, _) in enumerate(rows)}

    def shuffle_spec(self) -> KernelSpec:
        cfg = self.cfg
        m = cfg.seq_len_per_gpu * cfg.top_k
        tm = max(1, -(-m // self.params.gpu.n_sms))
        return KernelSpec(KernelKind.SHUFFLE, "shuffle", (Segment(m, 1, 0, "indices", row_bytes=16),), tm=tm, tn=1)

    def build(self) -> None:
        for gpu, hub in zip(self.system.gpus, self.system.hubs):
            g = gpu.gpu_id
            hub.dam.attach_phase("dispatch", DamMode.FLAG)
            hub.dam.attach_phase("combine", DamMode.FLAG)
            hub.on_control = self._control_listener(g)
            self.register_combine_region(g)
            gpu.launch_kernel(self.routing_spec(), stream="compute")
            shuffle = gpu.launch_kernel(self.shuffle_spec(), stream="compute")
            shuffle.on_done.append(self._send_counts)

    def _control_listener(self, g: int):
        def on_control(packet: Packet) -> None:
            kind, src = packet.tag
            if kind == "counts":
                self._count_received(g, src)
            elif kind == "addrs":
                self._addrs_received(g, src)

        return on_control

    # -- mediation ------------------------------------------------------------
    def _send_counts(self, kernel: Kernel) -> None:
        g = kernel.gpu
        self.mediation_from[g] = self.engine.now
        hub = self.system.hubs[g]
        for peer in range(self.cfg.n_gpus):
            if peer != g:
                hub.send_control(peer, ("counts", g))
        self._count_received(g, g)

    def _count_received(self, g: int, src: int) -> None:
        seen = self.counts_seen[g]
        seen.add(src)
        if len(seen) == self.cfg.n_gpus:
            self.phases["counts_known"][g] = self.engine.now
            self.engine.call_at(self.engine.now + self.params.host_roundtrip_ps, self._allocate, g)

    def _allocate(self, g: int) -> None:
        """Host: size buffers from the counts, launch consumer kernels, publish addresses."""
        now = self.engine.now
        self.phases["sync1"][g] = now
        cfg, params, system = self.cfg, self.params, self.system
        gpu, hub = system.gpus[g], system.hubs[g]
        row_size = cfg.padded_row_bytes
        launch = params.gpu.launch_latency_ps
        for c in range(self.chunks):
            rows = [len(self.rows[(e, c)]) for e in self.local_experts(g)]
            spec1, spec2 = self.gemm_specs(rows, f"_c{c}")
            at = now + c * launch
            gemm1 = gpu.launch_kernel(spec1, Gating.POLL, stream="compute", at=at)
            gemm1.before_compute = self._check_expert_rows
            gemm2 = gpu.launch_kernel(spec2, Gating.IMMEDIATE, stream="compute", at=at)
            self.kernel_chunk[(g, gemm1.kernel_id)] = c
            self.gemm1[g].append(gemm1)
            self.gemm2[g].append(gemm2)
            self.expert_kernels += [gemm1, gemm2]
            for s, e in enumerate(self.local_experts(g)):
                n_rows = rows[s]
                if not n_rows:
                    continue
                region = system.register_region(g, self.spaces[g].take(row_size * n_rows), row_size, n_rows)
                self.regions[(e, c)] = region
                self.expert_regions.append(region)
                hub.dam.build_dependency_table(region, gemm1.kernel_id, s, params.tile_m, phase="dispatch", counted_bytes=self.act)
        scaling = gpu.launch_kernel(self.scaling_spec(), Gating.POLL, stream="compute", at=now + (self.chunks - 1) * launch)
        scaling.before_compute = self._check_combine_rows
        self.scaling.append(scaling)
        combine = self.combine_regions[g]
        if cfg.seq_len_per_gpu and combine is not None:
            hub.dam.build_dependency_table(combine, scaling.kernel_id, 0, params.tile_m, phase="combine")
        for peer in range(cfg.n_gpus):
            if peer != g:
                hub.send_control(peer, ("addrs", g))
        self._addrs_received(g, g)

    def _addrs_received(self, g: int, src: int) -> None:
        seen = self.addrs_seen[g]
        seen.add(src)
        if len(seen) == self.cfg.n_gpus:
            self.engine.call_at(self.engine.now + self.params.host_roundtrip_ps, self._launch_transfers, g)

    def _launch_transfers(self, g: int) -> None:
        now = self.engine.now
        self.phases["sync2"][g] = now
        gpu = self.system.gpus[g]
        gpu.activity.append((self.mediation_from[g], now, "mediation"))
        launch = self.params.gpu.launch_latency_ps
        for c in range(self.chunks):
            at = now + c * launch
            spec = KernelSpec(KernelKind.COPY, f"dispatch_c{c}")
            dispatch = gpu.launch_kernel(spec, stream="dispatch", at=at)
            dispatch.on_start = self._bulk_dispatch
            self.kernel_chunk[(g, dispatch.kernel_id)] = c
            combine = gpu.launch_kernel(KernelSpec(KernelKind.COPY, f"combine_c{c}"), stream="combine",
                                        after=[self.gemm2[g][c]], at=at)
            combine.on_start = self._bulk_combine
            self.kernel_chunk[(g, combine.kernel_id)] = c

    # -- bulk transfers -------------------------------------------------------
    def _chunk_index(self, kernel: Kernel) -> int:
        return self.kernel_chunk[(kernel.gpu, kernel.kernel_id)]

    def _bulk_dispatch(self, kernel: Kernel) -> None:
        cfg = self.cfg
        g = kernel.gpu
        c = self._chunk_index(kernel)
        T = cfg.seq_len_per_gpu
        pieces = fragments(0, self.act, self.params.bulk_store_bytes)
        requests = []
        for token in range(g * T, (g + 1) * T):
            if self.chunk_of(token) != c:
                continue
            for expert in self.routing.experts[token].tolist():
                region = self.regions[(expert, c)]
                row = region.base_addr + self.row_index[(expert, c)][token] * region.row_size
                dst = cfg.expert_gpu(expert)
                tag = (token, expert)
                requests.extend(StoreRequest(g, dst, size, phys_addr=row + offset, tag=tag) for offset, size in pieces)
        if requests:
            self.system.gpus[g].issue_stores(requests, self.engine.now, kernel)

    def _bulk_combine(self, kernel: Kernel) -> None:
        g = kernel.gpu
        c = self._chunk_index(kernel)
        pieces = fragments(0, self.act, self.params.bulk_store_bytes)
        requests = []
        for e in self.local_experts(g):
            for token, slot in self.rows[(e, c)]:
                src, row = self.combine_address(token, slot)
                requests.extend(StoreRequest(g, src, size, phys_addr=row + offset, tag=token) for offset, size in pieces)
        if requests:
            self.system.gpus[g].issue_stores(requests, self.engine.now, kernel)

    def _check_expert_rows(self, kernel: Kernel, tb: TbDescriptor) -> None:
        e = self.local_experts(kernel.gpu)[tb.segment]
        self.check_rows(self.regions[(e, self._chunk_index(kernel))], kernel, tb, self.act)

    def _check_combine_rows(self, kernel: Kernel, tb: TbDescriptor) -> None:
        region = self.combine_regions[kernel.gpu]
        assert region is not None
        self.check_rows(region, kernel, tb, region.row_size)


def run_layer(pipeline: Pipeline | str, routing: RoutingResult, params: SimParams, *, trace: TraceSink | None = None) -> LayerResult:
    """Build and simulate one MoE layer under ``pipeline``."""
    pipeline = Pipeline(pipeline)
    layer: _Layer
    if pipeline is Pipeline.IDEAL:
        layer = IdealLayer(pipeline, routing, params, trace=trace)
    elif pipeline in MH_KNOBS:
        layer = MoeHubLayer(pipeline, routing, params, trace=trace)
    else:
        layer = MediatedLayer(pipeline, routing, params, trace=trace)
    layer.build()
    return layer.finish()


def run_moehub_layer(routing: RoutingResult, params: SimParams, *, pkt: bool = True, dep: bool = True,
                     trace: TraceSink | None = None) -> LayerResult:
    pipeline = next(p for p, knobs in MH_KNOBS.items() if knobs == (pkt, dep))
    return run_layer(pipeline, routing, params, trace=trace)


def run_baseline_layer(routing: RoutingResult, params: SimParams, flavor: Pipeline | str = Pipeline.MEDIATED_NONOVERLAP,
                       *, trace: TraceSink | None = None) -> LayerResult:
    flavor = Pipeline(flavor)
    if flavor not in BASELINES:
        raise ValueError(f"{flavor.value} is not a software-mediated flavor")
    return run_layer(flavor, routing, params, trace=trace)


def run_ideal_layer(routing: RoutingResult, params: SimParams, *, trace: TraceSink | None = None) -> LayerResult:
    return run_layer(Pipeline.IDEAL, routing, params, trace=trace)
