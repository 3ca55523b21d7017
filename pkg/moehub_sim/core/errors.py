"""Exception hierarchy for simulator failures"""

from __future__ import annotations


class SimulationError(Exception):
    """A fatal condition inside one simulation instance."""


class PastEventError(SimulationError):
    """An event was scheduled before the current simulated time."""


class EventBudgetExceeded(SimulationError):
    """The hard event budget ran out (deadlock / livelock guard)."""


class DeadlockError(SimulationError):
    """The event queue drained while some component still had work."""


class LogicError(SimulationError):
    """An internal protocol rule was broken (e.g. AllReady fired twice)."""


class SafetyViolation(SimulationError):
    """A thread block was released before its input bytes were written."""


class SetupError(SimulationError):
    """Layer setup failed: overlapping regions, zero capacity, unknown handles."""


class RegionOverflowError(SimulationError):
    """On-arrival allocation ran past a region's conservative capacity."""


class ConfigError(Exception):
    """Configuration could not be loaded; ``problems`` lists ``path: message`` lines."""

    def __init__(self, problems: list[str] | str) -> None:
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
