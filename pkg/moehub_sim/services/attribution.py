"""Critical-path breakdown of a layer from the critical GPU's activity intervals"""

from __future__ import annotations

from typing import Iterable

from moehub_sim.core.engine import SimTime

BUCKETS = ("routing", "exposed_dispatch", "expert_compute", "exposed_combine", "scaling", "mediation", "polling")

_KIND_BUCKET = {
    "routing": "routing",
    "gemm1": "expert_compute",
    "gemm2": "expert_compute",
    "scaling": "scaling",
    "shuffle": "mediation",
    "mediation": "mediation",
    "poll": "polling",
}

# highest first; an instant where several run is charged to the first
_PRIORITY = ("expert_compute", "scaling", "routing", "mediation", "polling")


def attribute(activity: Iterable[tuple[SimTime, SimTime, str]], span: SimTime) -> dict[str, SimTime]:
    """Charge every picosecond of ``[0, span)`` to exactly one bucket.

    Busy time goes to the highest-priority activity running at that instant.
    Idle time before the first activity is launch/sync overhead (``mediation``);
    idle time before the last expert-compute interval ends waits on dispatch,
    idle time after it waits on combine.
    """
    out = dict.fromkeys(BUCKETS, 0)
    if span <= 0:
        return out
    edges: list[tuple[SimTime, int, str]] = []
    compute_end = 0
    for start, end, kind in activity:
        bucket = _KIND_BUCKET.get(kind)
        start, end = max(0, start), min(span, end)
        if bucket is None or end <= start:
            continue
        edges.append((start, 1, bucket))
        edges.append((end, -1, bucket))
        if bucket == "expert_compute":
            compute_end = max(compute_end, end)
    edges.sort()
    first = edges[0][0] if edges else span

    def idle(lo: SimTime, hi: SimTime) -> None:
        for a, b, bucket in ((0, first, "mediation"), (first, compute_end, "exposed_dispatch"),
                             (max(first, compute_end), span, "exposed_combine")):
            overlap = min(hi, b) - max(lo, a)
            if overlap > 0:
                out[bucket] += overlap

    running = dict.fromkeys(_PRIORITY, 0)
    cursor = 0
    i = 0
    while cursor < span:
        nxt = edges[i][0] if i < len(edges) else span
        if nxt > cursor:
            top = next((b for b in _PRIORITY if running[b]), None)
            if top is None:
                idle(cursor, nxt)
            else:
                out[top] += nxt - cursor
            cursor = nxt
        while i < len(edges) and edges[i][0] == cursor:
            _, delta, bucket = edges[i]
            running[bucket] += delta
            i += 1
    return out
