from __future__ import annotations

import pytest

from moehub_sim.core.engine import Engine
from moehub_sim.core.errors import LogicError, SetupError
from moehub_sim.core.gpu import (
    Gating,
    Gpu,
    GpuTiming,
    KernelKind,
    KernelSpec,
    Segment,
    TbDescriptor,
    TbState,
    issue_interval_ps,
)
from moehub_sim.core.packets import StoreRequest

TIMING = GpuTiming(n_sms=4, launch_latency_ps=1_000, poll_interval_ps=1_000, store_issue_ps=1_000, issue_batch=1)


class HubStub:
    def __init__(self, engine: Engine, accepting: bool = True) -> None:
        self.engine = engine
        self.accepting = accepting
        self.accepted: list[int] = []

    def accept(self, request: StoreRequest) -> bool:
        if self.accepting:
            self.accepted.append(self.engine.now)
        return self.accepting


def make_gpu(timing: GpuTiming = TIMING) -> tuple[Engine, Gpu]:
    engine = Engine()
    return engine, Gpu(engine, 0, timing)


def gemm(m: int, n: int, k: int = 64, name: str = "gemm") -> KernelSpec:
    return KernelSpec.gemm(KernelKind.GEMM1, name, m, n, k)


def tile_ps(m: int = 128, n: int = 128, k: int = 64, rows: int = 128, cols: int = 128) -> int:
    return TIMING.tb_duration(Segment(m, n, k), rows, cols)


def test_tile_counts():
    assert gemm(300, 200).tb_count == 6
    assert gemm(0, 200).tb_count == 0
    assert gemm(256, 384).tb_count == 6


def test_kernel_starts_after_launch_latency():
    engine, gpu = make_gpu()
    kernel = gpu.launch_kernel(gemm(128, 128))
    engine.run_until()
    assert kernel.start_at == 1_000
    assert kernel.done_at == 1_000 + tile_ps()


def test_two_waves_on_four_sms():
    engine, gpu = make_gpu()
    spec = gemm(512, 256)
    kernel = gpu.launch_kernel(spec)
    engine.run_until()
    d = tile_ps(512, 256)
    assert spec.tb_count == 8
    assert kernel.done_at == 1_000 + 2 * d
    # lower tb_id dispatched first
    first_wave = sorted(tb.tb_id for tb in kernel.tbs if tb.dispatched_at == 1_000)
    assert first_wave == [0, 1, 2, 3]


def test_flops_are_conserved():
    engine, gpu = make_gpu()
    kernel = gpu.launch_kernel(gemm(300, 200))
    engine.run_until()
    assert kernel.flops_done == kernel.spec.flops == 2 * 300 * 200 * 64
    assert gpu.stats["tbs_dispatched"] == 6


def test_stream_order_serializes_kernels():
    engine, gpu = make_gpu()
    first = gpu.launch_kernel(gemm(128, 128, name="a"))
    second = gpu.launch_kernel(gemm(128, 128, name="b"))
    other = gpu.launch_kernel(gemm(128, 128, name="c"), stream="side")
    engine.run_until()
    assert second.start_at == first.done_at
    assert other.start_at == 1_000


def test_empty_kernel_finishes_at_launch():
    engine, gpu = make_gpu()
    kernel = gpu.launch_kernel(gemm(0, 128), Gating.DAM)
    engine.run_until()
    assert kernel.done_at == kernel.start_at == 1_000


def test_dam_gated_tiles_wait_for_release():
    engine, gpu = make_gpu()
    kernel = gpu.launch_kernel(gemm(256, 128), Gating.DAM)
    gpu.release_tile(kernel.kernel_id, 0, 1, 128, 3_000)
    engine.call_at(5_000, gpu.deallocate_tile, kernel.kernel_id, 0, 0)
    engine.run_until()
    tile0, tile1 = kernel.tbs
    assert tile0.state is TbState.DEALLOCATED
    assert tile1.compute_start == 3_000
    assert kernel.done_at == max(3_000 + tile_ps(256), 5_000)
    assert gpu.stats["tbs_deallocated"] == 1


def test_early_release_runs_at_kernel_start():
    engine, gpu = make_gpu()
    kernel = gpu.launch_kernel(gemm(128, 128), Gating.DAM)
    gpu.release_tile(kernel.kernel_id, 0, 0, 128, 500)
    engine.run_until()
    assert kernel.tbs[0].ready_at == 500
    assert kernel.tbs[0].compute_start == 1_000


def test_partial_release_computes_fewer_rows():
    engine, gpu = make_gpu()
    kernel = gpu.launch_kernel(gemm(128, 128), Gating.DAM)
    gpu.release_tile(kernel.kernel_id, 0, 0, 32, 2_000)
    engine.run_until()
    assert kernel.flops_done == 2 * 32 * 128 * 64
    assert kernel.tbs[0].duration == TIMING.tb_duration(Segment(128, 128, 64), 32, 128)


def test_chained_kernel_follows_upstream_tiles():
    engine, gpu = make_gpu()
    up = gpu.launch_kernel(gemm(256, 128, name="up"))
    down = gpu.launch_kernel(gemm(256, 128, name="down"), Gating.CHAINED, stream="aux", chain_from=up)
    engine.run_until()
    d = tile_ps(256)
    assert up.done_at == 1_000 + d
    assert [tb.compute_start for tb in down.tbs] == [1_000 + d, 1_000 + d]
    assert down.done_at == 1_000 + 2 * d


def test_chained_gating_requires_upstream():
    _, gpu = make_gpu()
    with pytest.raises(SetupError):
        gpu.launch_kernel(gemm(128, 128), Gating.CHAINED)


def test_polling_starts_at_first_poll_after_flag():
    engine, gpu = make_gpu()
    kernel = gpu.launch_kernel(gemm(128, 128), Gating.POLL)
    engine.call_at(2_500, gpu.set_tile_flag, kernel.kernel_id, 0, 0, 128, 2_500)
    engine.run_until()
    (tb,) = kernel.tbs
    assert tb.dispatched_at == 1_000
    assert tb.compute_start == 4_000
    assert kernel.poll_ps == 3_000
    assert kernel.done_at == 4_000 + tile_ps()


def test_flag_for_empty_tile_skips_compute():
    engine, gpu = make_gpu()
    kernel = gpu.launch_kernel(gemm(128, 128), Gating.POLL)
    engine.call_at(1_200, gpu.set_tile_flag, kernel.kernel_id, 0, 0, 0, 1_200)
    engine.run_until()
    assert kernel.done_at == 3_000
    assert kernel.flops_done == 0


def test_flagging_a_tile_twice_is_a_logic_error():
    _, gpu = make_gpu()
    kernel = gpu.launch_kernel(gemm(128, 128), Gating.POLL)
    gpu.set_tile_flag(kernel.kernel_id, 0, 0, 128, 0)
    with pytest.raises(LogicError):
        gpu.set_tile_flag(kernel.kernel_id, 0, 0, 128, 0)


def test_illegal_tb_transition():
    tb = TbDescriptor(0, 0, 0, 0, 0, 128, 128)
    with pytest.raises(LogicError, match="illegal transition"):
        tb.move(TbState.RUNNING)
    tb.move(TbState.READY)
    tb.move(TbState.RUNNING)
    tb.move(TbState.DONE)


def test_stores_leave_at_the_issue_rate():
    engine, gpu = make_gpu()
    hub = HubStub(engine)
    gpu.hub = hub
    gpu.issue_stores([StoreRequest(0, 1, 64, phys_addr=64 * i) for i in range(64)], 0)
    engine.run_until()
    assert len(hub.accepted) == 64
    assert hub.accepted[-1] == 63_000


def test_local_stores_do_not_take_issue_slots():
    engine, gpu = make_gpu()
    hub = HubStub(engine)
    gpu.hub = hub
    gpu.issue_stores([StoreRequest(0, 0, 64, phys_addr=64 * i) for i in range(64)], 0)
    engine.run_until()
    assert hub.accepted == [0] * 64


def test_remote_stores_keep_their_pace_behind_local_ones():
    engine, gpu = make_gpu()
    hub = HubStub(engine)
    gpu.hub = hub
    dsts = [0, 0, 1, 0, 1, 0]
    gpu.issue_stores([StoreRequest(0, dst, 64, phys_addr=64 * i) for i, dst in enumerate(dsts)], 0)
    engine.run_until()
    assert hub.accepted == [0, 0, 0, 0, 1_000, 1_000]
    assert gpu.stats["stores_issued"] == 6


def test_issue_resumes_after_hub_frees_space():
    engine, gpu = make_gpu()
    hub = HubStub(engine, accepting=False)
    gpu.hub = hub

    def reopen() -> None:
        hub.accepting = True
        gpu.on_store_space()

    gpu.issue_stores([StoreRequest(0, 1, 64, phys_addr=0), StoreRequest(0, 1, 64, phys_addr=128)], 0)
    engine.call_at(5_000, reopen)
    engine.run_until()
    assert hub.accepted == [5_000, 6_000]
    assert gpu.stats["issue_stalls"] == 1


def test_kernel_held_open_by_pending_stores():
    engine, gpu = make_gpu()
    gpu.hub = HubStub(engine)
    kernel = gpu.launch_kernel(gemm(0, 128))
    gpu.reserve_stores(kernel, 3)
    requests = [StoreRequest(0, 1, 64, phys_addr=128 * i) for i in range(3)]
    engine.call_at(2_000, lambda: gpu.issue_stores(requests, 2_000, kernel, reserved=True))
    engine.run_until()
    assert kernel.done_at == 4_000


def test_stores_need_a_hub():
    _, gpu = make_gpu()
    with pytest.raises(SetupError):
        gpu.issue_stores([StoreRequest(0, 1, 64, phys_addr=0)], 0)


def test_issue_interval_for_eight_billion_requests_per_second():
    assert issue_interval_ps(8e9) == 125
