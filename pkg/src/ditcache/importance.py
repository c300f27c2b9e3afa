"""Per-token importance scoring and compute-set selection.

Three multiplicative signals per token: historical (attention received in the
previous iteration), future (attention from a short lookahead run at the
nearest timestep), and starvation (e^cf, where cf counts consecutive cached
steps). The top max(1, ceil((1-CR)*n)) scorers form the compute set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TraceFormatError
from .model import AttentionTrace


@dataclass(frozen=True)
class PolicyConfig:
    """Knobs shared by the score-driven caching policies."""

    cached_ratio: float = 0.0      # CR; fraction of tokens NOT recomputed (0 = dense)
    speculation_steps: int = 2     # S; lookahead run length
    c2_mass: float = 0.10          # score-mass budget for the direct-reuse class
    warmup_steps: int = 1          # leading dense steps
    starvation_enabled: bool = True
    history_window: int = 3        # ring capacity used by weighted approximation

    def __post_init__(self):
        if not (0.0 <= self.cached_ratio < 1.0):
            raise ConfigError(f"cached_ratio must be in [0, 1), got {self.cached_ratio}")
        if not (0.0 < self.c2_mass < 1.0):
            raise ConfigError(f"c2_mass must be in (0, 1), got {self.c2_mass}")
        if self.speculation_steps < 1:
            raise ConfigError("speculation_steps must be >= 1")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if not (1 <= self.history_window <= 3):
            raise ConfigError("history_window must be in [1, 3]")


@dataclass(frozen=True)
class ImportanceRecords:
    """Per-token score components; score = his * fut * star elementwise."""

    his: np.ndarray
    fut: np.ndarray
    star: np.ndarray
    score: np.ndarray


def attention_received(trace) -> np.ndarray:
    """Sum a trace's received scores over layers; float64 of length n_tokens.

    Accepts an AttentionTrace or a list of per-layer vectors (ragged lists
    raise TraceFormatError).
    """
    if isinstance(trace, AttentionTrace):
        received = trace.received
    else:
        received = AttentionTrace.from_layers(trace, query_ids=[]).received
    out = received.sum(axis=0, dtype=np.float64)
    if np.any(out < 0):
        raise TraceFormatError("received scores must be non-negative")
    return out


def historical_score(prev_step_trace) -> np.ndarray:
    """Attention received in the immediately previous iteration.

    Undefined before any step has run (warmup computes all tokens).
    """
    if prev_step_trace is None:
        raise ValueError("historical score is undefined at step 0; run a warmup step first")
    return attention_received(prev_step_trace)


def future_score(spec_table, current_timestep: float) -> np.ndarray:
    """Score vector of the lookahead entry nearest to current_timestep.

    Equidistant ties resolve toward the larger (noisier) timestep. The table
    only needs `.timesteps` (strictly decreasing) and `.scores` (rows aligned
    with timesteps).
    """
    timesteps = np.asarray(spec_table.timesteps, dtype=np.float64)
    if timesteps.size == 0:
        raise ValueError("speculative score table is empty")
    dist = np.abs(timesteps - float(current_timestep))
    # timesteps are sorted descending, so argmin takes the earliest (largest) on ties
    idx = int(np.argmin(dist))
    return np.asarray(spec_table.scores[idx], dtype=np.float64).copy()


def starvation_score(cf, enabled: bool = True) -> np.ndarray:
    """star_i = e^{cf_i}; all ones when the signal is disabled."""
    counters = np.asarray(cf, dtype=np.int64)
    if np.any(counters < 0):
        raise ValueError("cache counters must be non-negative")
    if not enabled:
        return np.ones(counters.shape, dtype=np.float64)
    return np.exp(counters.astype(np.float64))


def combined_score(his, fut, star) -> ImportanceRecords:
    """Multiply the three signals into the per-token score."""
    his = np.asarray(his, dtype=np.float64)
    fut = np.asarray(fut, dtype=np.float64)
    star = np.asarray(star, dtype=np.float64)
    if not (his.shape == fut.shape == star.shape) or his.ndim != 1:
        raise ValueError(
            f"score vectors must share one length, got {his.shape}, {fut.shape}, {star.shape}"
        )
    for name, vec in (("his", his), ("fut", fut), ("star", star)):
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"{name} contains non-finite entries")
        if np.any(vec < 0):
            raise ValueError(f"{name} must be non-negative")
    return ImportanceRecords(his=his, fut=fut, star=star, score=his * fut * star)


def compute_set_size(cached_ratio: float, n_tokens: int) -> int:
    """|C1| = max(1, ceil((1 - CR) * n))."""
    return max(1, math.ceil((1.0 - cached_ratio) * n_tokens))


def select_compute_set(scores, cached_ratio: float, n_tokens: int) -> np.ndarray:
    """Highest-score token ids, ties to the lower id, sorted ascending.

    With all-zero scores this degenerates to the first |C1| ids, which keeps
    selection total and deterministic.
    """
    if not (0.0 <= cached_ratio < 1.0):
        raise ConfigError(f"cached_ratio must be in [0, 1), got {cached_ratio}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (n_tokens,):
        raise ValueError(f"expected {n_tokens} scores, got shape {scores.shape}")
    k = compute_set_size(cached_ratio, n_tokens)
    order = np.argsort(-scores, kind="stable")  # stable: equal scores keep id order
    return np.sort(order[:k]).astype(np.int64)
