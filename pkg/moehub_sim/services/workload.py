"""MoE layer instances: model presets and token routing with controlled expert-load imbalance"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from moehub_sim.core.engine import Rng, fork_stream
from moehub_sim.core.errors import ConfigError
from moehub_sim.core.packets import LINE_BYTES

logger = logging.getLogger(__name__)

MAX_TARGET_STD = 0.05
STD_TOLERANCE = 0.10


@dataclass(frozen=True)
class MoeConfig:
    name: str
    hidden_size: int
    ffn_hidden_size: int
    n_experts: int
    top_k: int
    n_layers: int
    dtype_bytes: int = 2
    n_gpus: int = 8
    seq_len_per_gpu: int = 1024

    @property
    def tokens(self) -> int:
        return self.seq_len_per_gpu * self.n_gpus

    @property
    def experts_per_gpu(self) -> int:
        return self.n_experts // self.n_gpus

    def expert_gpu(self, expert: int) -> int:
        return expert // self.experts_per_gpu

    @property
    def row_bytes(self) -> int:
        """Activation bytes of one token row."""
        return self.hidden_size * self.dtype_bytes

    @property
    def padded_row_bytes(self) -> int:
        return -(-self.row_bytes // LINE_BYTES) * LINE_BYTES

    def problems(self) -> list[str]:
        out = []
        for field_name in ("hidden_size", "ffn_hidden_size", "n_experts", "top_k", "dtype_bytes", "n_gpus"):
            if getattr(self, field_name) <= 0:
                out.append(f"model.{field_name}: must be positive")
        if self.seq_len_per_gpu < 0:
            out.append("seq_len_per_gpu: must not be negative")
        if out:
            return out
        if self.top_k > self.n_experts:
            out.append("model.top_k: exceeds n_experts")
        if self.n_experts % self.n_gpus:
            out.append(f"n_gpus: n_experts not divisible ({self.n_experts} experts over {self.n_gpus} GPUs)")
        if self.row_bytes % LINE_BYTES:
            out.append(f"model.hidden_size: row of {self.row_bytes} B is not a multiple of {LINE_BYTES} B")
        return out

    def with_grid(self, *, n_gpus: int | None = None, seq_len_per_gpu: int | None = None) -> MoeConfig:
        changes = {}
        if n_gpus is not None:
            changes["n_gpus"] = n_gpus
        if seq_len_per_gpu is not None:
            changes["seq_len_per_gpu"] = seq_len_per_gpu
        return replace(self, **changes)


# name: (hidden, ffn hidden, experts, top-k, layers)
PRESETS: dict[str, tuple[int, int, int, int, int]] = {
    "mixtral-8x7b": (4096, 14336, 8, 2, 32),
    "qwen2-moe-2.7b": (2048, 1408, 64, 4, 24),
    "phi-3.5-moe": (4096, 6400, 16, 2, 32),
}


def preset(name: str, **overrides: int) -> MoeConfig:
    try:
        hidden, ffn, experts, top_k, layers = PRESETS[name]
    except KeyError:
        raise ConfigError(f"model: unknown preset {name!r} (known: {', '.join(sorted(PRESETS))})") from None
    return replace(MoeConfig(name, hidden, ffn, experts, top_k, layers), **overrides)


@dataclass(frozen=True, eq=False)
class RoutingResult:
    cfg: MoeConfig
    experts: np.ndarray  # (tokens, top_k) expert ids
    scores: np.ndarray  # (tokens, top_k) gate weights, rows sum to 1
    target_std: float
    realized_std: float
    concentration: float | None = None
    reached: bool = True
    attempts: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def tokens(self) -> int:
        return int(self.experts.shape[0])

    def source_gpu(self, token: int) -> int:
        return token // self.cfg.seq_len_per_gpu

    @cached_property
    def tokens_per_expert(self) -> np.ndarray:
        return np.bincount(self.experts.ravel(), minlength=self.cfg.n_experts)

    @cached_property
    def counts(self) -> np.ndarray:
        """(producer gpu, expert) token counts."""
        cfg = self.cfg
        out = np.zeros((cfg.n_gpus, cfg.n_experts), dtype=np.int64)
        if self.tokens:
            src = np.repeat(np.arange(self.tokens) // cfg.seq_len_per_gpu, cfg.top_k)
            np.add.at(out, (src, self.experts.ravel()), 1)
        return out

    @cached_property
    def assignments(self) -> dict[tuple[int, int], list[tuple[int, int]]]:
        """(producer gpu, expert) -> [(token id, top-k slot)] in token order."""
        out: dict[tuple[int, int], list[tuple[int, int]]] = {}
        T = self.cfg.seq_len_per_gpu
        for token in range(self.tokens):
            for slot, expert in enumerate(self.experts[token].tolist()):
                out.setdefault((token // T, expert), []).append((token, slot))
        return out

    def pairs(self) -> set[tuple[int, int]]:
        return {(t, int(e)) for t in range(self.tokens) for e in self.experts[t]}

    def summary(self) -> dict:
        return {
            "target_std": self.target_std,
            "realized_std": self.realized_std,
            "reached": self.reached,
            "concentration": self.concentration,
            "attempts": self.attempts,
            "tokens_per_expert": self.tokens_per_expert.tolist(),
        }


def expert_load_std(experts: np.ndarray, n_experts: int) -> float:
    """Population std of per-expert token fractions (fractions sum to 1)."""
    total = experts.size
    if total == 0:
        return 0.0
    fractions = np.bincount(experts.ravel(), minlength=n_experts) / total
    return float(np.std(fractions))


def _round_robin(cfg: MoeConfig) -> np.ndarray:
    tokens = np.arange(cfg.tokens)[:, None] * cfg.top_k + np.arange(cfg.top_k)[None, :]
    return tokens % cfg.n_experts


def _sample(cfg: MoeConfig, alpha: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Top-k without replacement from Dirichlet(alpha) expert probabilities (Gumbel top-k)."""
    gen = rng.generator()
    probs = gen.dirichlet(np.full(cfg.n_experts, alpha))
    logp = np.log(np.maximum(probs, 1e-300))
    keys = logp[None, :] + gen.gumbel(size=(cfg.tokens, cfg.n_experts))
    top = np.argsort(-keys, axis=1, kind="stable")[:, : cfg.top_k]
    weights = probs[top]
    weights = np.maximum(weights, 1e-12)
    return top.astype(np.int64), weights / weights.sum(axis=1, keepdims=True)


def generate_routing(cfg: MoeConfig, target_std: float, rng: Rng, *, max_attempts: int = 64) -> RoutingResult:
    """Routing whose per-expert load std lands within 10% of ``target_std``.

    The concentration of a symmetric Dirichlet over experts is bisected (log
    scale) until the realized std matches; draws are then repeated on fresh
    child streams until one lands inside the tolerance band. An exactly
    balanced layer (std 0) uses round-robin assignment.
    """
    if not 0.0 <= target_std <= MAX_TARGET_STD:
        raise ConfigError(f"target_std: {target_std} outside [0, {MAX_TARGET_STD}]")
    problems = cfg.problems()
    if problems:
        raise ConfigError(problems)

    if target_std == 0.0 or cfg.tokens == 0:
        experts = _round_robin(cfg)
        scores = np.full(experts.shape, 1.0 / cfg.top_k)
        realized = expert_load_std(experts, cfg.n_experts)
        return RoutingResult(cfg, experts, scores, target_std, realized, None, realized <= 1e-12 or cfg.tokens == 0)

    calibration = fork_stream(rng, "routing/calibration")
    lo, hi = np.log(1e-3), np.log(1e4)
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        std = expert_load_std(_sample(cfg, float(np.exp(mid)), calibration)[0], cfg.n_experts)
        if std > target_std:
            lo = mid
        else:
            hi = mid
    alpha = float(np.exp(0.5 * (lo + hi)))

    best: tuple[float, np.ndarray, np.ndarray] | None = None
    attempts = 0
    for attempt in range(max_attempts):
        attempts = attempt + 1
        experts, scores = _sample(cfg, alpha, fork_stream(rng, f"routing/draw/{attempt}"))
        std = expert_load_std(experts, cfg.n_experts)
        error = abs(std - target_std)
        if best is None or error < abs(best[0] - target_std):
            best = (std, experts, scores)
        if error <= STD_TOLERANCE * target_std:
            break
    assert best is not None
    std, experts, scores = best
    reached = abs(std - target_std) <= STD_TOLERANCE * target_std
    if not reached:
        logger.warning("routing std %.4f not reachable for %s (closest %.4f)", target_std, cfg.name, std)
    return RoutingResult(cfg, experts, scores, target_std, std, alpha, reached, attempts)
