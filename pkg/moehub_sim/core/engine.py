"""Deterministic discrete-event kernel: integer-picosecond clock, ordered queue, RNG streams"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Protocol, TextIO

import numpy as np

from moehub_sim.core.errors import DeadlockError, EventBudgetExceeded, PastEventError

logger = logging.getLogger(__name__)

PS_PER_NS = 1_000
PS_PER_US = 1_000_000
PS_PER_S = 1_000_000_000_000

DEFAULT_EVENT_BUDGET = 10**9

SimTime = int


def ns_to_ps(value_ns: float) -> SimTime:
    """Convert nanoseconds to integer picoseconds (rounded half-up)."""
    return int(value_ns * PS_PER_NS + 0.5)


def us_to_ps(value_us: float) -> SimTime:
    return int(value_us * PS_PER_US + 0.5)


def ps_per_unit(units: float, rate_per_s: float) -> SimTime:
    """Time in ps to move ``units`` at ``rate_per_s`` units/second, at least 1 ps."""
    if rate_per_s <= 0:
        raise ValueError("rate must be positive")
    return max(1, int(units * PS_PER_S / rate_per_s + 0.5))


@dataclass(slots=True)
class Event:
    fire_at: SimTime
    sequence: int
    target: str
    kind: str
    payload: Any = None


class Component(Protocol):
    name: str

    def handle(self, event: Event) -> None: ...

    def is_idle(self) -> bool: ...


@dataclass(frozen=True, slots=True)
class Rng:
    """A named random stream; identical (seed, stream) pairs draw identical values."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=(self.stream,))
        return np.random.Generator(np.random.PCG64(seq))


def fork_stream(parent: Rng, label: str) -> Rng:
    """Derive an independent child stream from ``parent`` and a label."""
    digest = hashlib.blake2b(f"{parent.stream}/{label}".encode("utf-8"), digest_size=8).digest()
    return Rng(seed=parent.seed, stream=int.from_bytes(digest, "little") >> 1)


class TraceSink:
    """Collects one NDJSON line per fired event."""

    def __init__(self, stream: TextIO | None = None) -> None:
        self._stream = stream
        self.lines: list[str] = []
        self.count = 0

    def write(self, record: dict[str, Any]) -> None:
        line = json.dumps(record, sort_keys=True, separators=(",", ":"), default=_trace_default)
        self.count += 1
        if self._stream is not None:
            self._stream.write(line)
            self._stream.write("\n")
        else:
            self.lines.append(line)


def _trace_default(value: Any) -> Any:
    if isinstance(value, (set, frozenset, tuple)):
        return list(value)
    if hasattr(value, "item"):
        return value.item()
    return str(value)


class _Callbacks:
    """Built-in component for plain ``call_at`` callbacks."""

    name = "callbacks"

    def handle(self, event: Event) -> None:
        fn, args = event.payload
        fn(*args)

    def is_idle(self) -> bool:
        return True


class Engine:
    """Single-threaded event loop ordered by (fire_at, sequence)."""

    def __init__(self, *, event_budget: int = DEFAULT_EVENT_BUDGET, trace: TraceSink | None = None) -> None:
        self.now: SimTime = 0
        self.event_budget = event_budget
        self.trace = trace
        self.scheduled = 0
        self.fired = 0
        self._queue: list[tuple[int, int, Event]] = []
        self._sequence = 0
        self._components: dict[str, Component] = {}
        self._record: dict[str, Any] | None = None
        self.register(_Callbacks())

    # -- components -------------------------------------------------------
    def register(self, component: Component) -> None:
        if component.name in self._components:
            raise ValueError(f"duplicate component name: {component.name}")
        self._components[component.name] = component

    def components(self) -> Iterable[Component]:
        return self._components.values()

    # -- scheduling -------------------------------------------------------
    def schedule(self, fire_at: SimTime, target: str, kind: str, payload: Any = None) -> Event:
        if fire_at < self.now:
            raise PastEventError(f"past event: {target}/{kind} at t={fire_at} scheduled at t={self.now}")
        event = Event(fire_at, self._sequence, target, kind, payload)
        self._sequence += 1
        self.scheduled += 1
        heapq.heappush(self._queue, (fire_at, event.sequence, event))
        return event

    def schedule_in(self, delay: SimTime, target: str, kind: str, payload: Any = None) -> Event:
        return self.schedule(self.now + delay, target, kind, payload)

    def call_at(self, fire_at: SimTime, fn: Callable[..., None], *args: Any) -> Event:
        return self.schedule(fire_at, "callbacks", getattr(fn, "__name__", "call"), (fn, args))

    def pending(self) -> int:
        return len(self._queue)

    def annotate(self, **fields: Any) -> None:
        """Attach fields to the trace record of the event currently firing."""
        if self._record is not None:
            self._record.update(fields)

    @property
    def tracing(self) -> bool:
        return self._record is not None

    # -- running ----------------------------------------------------------
    def run_until(self, deadline: SimTime | None = None) -> SimTime:
        """Fire events up to ``deadline`` (inclusive) or until quiescence."""
        queue = self._queue
        components = self._components
        trace = self.trace
        while queue:
            if deadline is not None and queue[0][0] > deadline:
                return self.now
            if self.fired >= self.event_budget:
                head = queue[0][2]
                raise EventBudgetExceeded(
                    f"event budget {self.event_budget} exhausted at t={self.now} ps; "
                    f"{len(queue)} pending, next {head.target}/{head.kind} at t={head.fire_at}"
                )
            fire_at, _, event = heapq.heappop(queue)
            self.now = fire_at
            self.fired += 1
            if trace is not None:
                self._record = {"t_ps": fire_at, "component": event.target, "kind": event.kind, "seq": event.sequence}
                components[event.target].handle(event)
                trace.write(self._record)
                self._record = None
            else:
                components[event.target].handle(event)
        if deadline is None:
            busy = sorted(c.name for c in components.values() if not c.is_idle())
            if busy:
                raise DeadlockError(f"event queue drained at t={self.now} ps with busy components: {', '.join(busy)}")
        return self.now
