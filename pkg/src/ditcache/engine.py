"""Cached sampling: scoring, three-class token partition, partial forward,
weighted approximation and cache bookkeeping.

Per step after warmup: score every token (historical x future x starvation),
compute the top scorers (C1), split the rest into direct-reuse (C2, the
low-score tail holding at most c2_mass of the total score) and weighted
approximation (C3). Every token's latent advances by Euler each step with
whatever velocity it got: fresh, reused or approximated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CacheIntegrityError, ConfigError, DivergenceError, ScheduleError
from .importance import (
    combined_score,
    future_score,
    historical_score,
    select_compute_set,
    starvation_score,
)
from .metrics import FlopLedger, RunReport, step_cost
from .model import (
    KVSnapshots,
    LatentState,
    TimestepSchedule,
    ToyDiTModel,
    forward,
)
from .policies import Policy, PolicyKind, taylor_extrapolate
from .trace import StepRecord, TraceArchive

HISTORY_CAP = 3  # ring length backing the weighted approximation


@dataclass(frozen=True)
class TokenPartition:
    """Disjoint covering split: computed / direct-reuse / approximated."""

    c1: np.ndarray
    c2: np.ndarray
    c3: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "c1", np.asarray(self.c1, dtype=np.int64))
        object.__setattr__(self, "c2", np.asarray(self.c2, dtype=np.int64))
        object.__setattr__(self, "c3", np.asarray(self.c3, dtype=np.int64))

    def validate(self, n_tokens: int) -> None:
        merged = np.concatenate([self.c1, self.c2, self.c3])
        if len(merged) != n_tokens or len(np.unique(merged)) != n_tokens:
            raise ValueError("partition classes must be disjoint and cover all tokens")
        if merged.min(initial=0) < 0 or merged.max(initial=-1) >= n_tokens:
            raise ValueError("partition contains out-of-range token ids")


@dataclass
class CacheState:
    """Mutable per-run cache bookkeeping; single-writer, one per run."""

    cf: np.ndarray                 # consecutive cached-step counters, int64
    feature_history: list[list[tuple[np.ndarray, float]]]  # newest first, len <= 3
    kv_snapshots: KVSnapshots
    selection_counts: np.ndarray   # lifetime computed counts, int64

    @classmethod
    def empty(cls, model: ToyDiTModel) -> "CacheState":
        n = model.config.n_tokens
        return cls(
            cf=np.zeros(n, dtype=np.int64),
            feature_history=[[] for _ in range(n)],
            kv_snapshots=KVSnapshots.empty(model.config),
            selection_counts=np.zeros(n, dtype=np.int64),
        )


def classify(scores, c1, c2_mass: float) -> TokenPartition:
    """Split non-computed tokens into reuse (C2) and approximation (C3).

    Among non-C1 tokens in ascending score order (ties to the lower id), C2
    is the longest prefix whose cumulative score stays within
    c2_mass * (total score of ALL tokens); the rest become C3.
    """
    if not (0.0 < c2_mass < 1.0):
        raise ConfigError(f"c2_mass must be in (0, 1), got {c2_mass}")
    scores = np.asarray(scores, dtype=np.float64)
    c1 = np.asarray(c1, dtype=np.int64)
    n = len(scores)
    rest = np.setdiff1d(np.arange(n, dtype=np.int64), c1, assume_unique=False)
    if rest.size == 0:
        return TokenPartition(c1=np.sort(c1), c2=rest, c3=rest.copy())
    budget = c2_mass * float(scores.sum())
    order = rest[np.argsort(scores[rest], kind="stable")]  # ascending score, then id
    running = np.cumsum(scores[order])
    n_c2 = int(np.searchsorted(running, budget, side="right"))
    return TokenPartition(
        c1=np.sort(c1),
        c2=np.sort(order[:n_c2]),
        c3=np.sort(order[n_c2:]),
    )


def approx_weights(schedule, current_iter: int, available_history: int) -> np.ndarray:
    """Normalized weights e^{-i} * (T_{k-i} - T_k) for i = 1..h, float64.

    Older entries are exponentially discounted and scaled by their timestep
    gap from the current iteration. Weights are positive and sum to 1.
    """
    ts = np.asarray(getattr(schedule, "timesteps", schedule), dtype=np.float64)
    h, k = int(available_history), int(current_iter)
    if h < 1:
        raise ValueError("available_history must be >= 1")
    if h > HISTORY_CAP:
        raise ValueError(f"available_history must be <= {HISTORY_CAP}")
    if k < h:
        raise ValueError(f"current_iter {k} has fewer than {h} predecessors")
    if k >= len(ts):
        raise ValueError(f"current_iter {k} outside schedule of length {len(ts)}")
    window = ts[k - h: k + 1]
    if np.any(np.diff(window) >= 0):
        raise ScheduleError("schedule window must be strictly decreasing")
    i = np.arange(1, h + 1, dtype=np.float64)
    raw = np.exp(-i) * (ts[k - np.arange(1, h + 1)] - ts[k])
    return raw / raw.sum()


def reuse_features(history: list[tuple[np.ndarray, float]]) -> np.ndarray:
    """Most recent stored output, unchanged."""
    if not history:
        raise CacheIntegrityError("cannot reuse from an empty feature history")
    return history[0][0]


def approximate_features(history: list[tuple[np.ndarray, float]], weights) -> np.ndarray:
    """Weighted sum of stored outputs, newest first, cast back to float32."""
    if not history:
        raise CacheIntegrityError("cannot approximate from an empty feature history")
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != len(history):
        raise ValueError(
            f"got {len(weights)} weights for {len(history)} history entries"
        )
    acc = np.zeros_like(history[0][0], dtype=np.float64)
    for w, (vec, _t) in zip(weights, history):
        acc += w * vec.astype(np.float64)
    return acc.astype(np.float32)


def update_cache_state(state: CacheState, partition: TokenPartition,
                       fresh_outputs: np.ndarray, timestep: float) -> CacheState:
    """Reset/advance counters and push freshly computed outputs.

    fresh_outputs rows align with partition.c1 (sorted). Only genuinely
    computed outputs enter the ring; reused/approximated values never do.
    """
    c1 = partition.c1
    if fresh_outputs.shape[0] != len(c1):
        raise CacheIntegrityError(
            f"fresh outputs cover {fresh_outputs.shape[0]} tokens, C1 has {len(c1)}"
        )
    cached = np.concatenate([partition.c2, partition.c3])
    state.cf[cached] += 1
    state.cf[c1] = 0
    state.selection_counts[c1] += 1
    for row, token in enumerate(c1):
        ring = state.feature_history[token]
        ring.insert(0, (fresh_outputs[row].copy(), float(timestep)))
        del ring[HISTORY_CAP:]
    return state


def _scores_for_step(policy: Policy, prev_trace, spec_table, timestep: float,
                     state: CacheState, rng: np.random.Generator | None) -> np.ndarray:
    kind = policy.kind
    if kind == PolicyKind.RANDOM:
        return rng.random(len(state.cf))
    his = historical_score(prev_trace)
    if kind == PolicyKind.SPECDIFF:
        fut = future_score(spec_table, timestep)
    else:
        fut = np.ones_like(his)
    star = starvation_score(state.cf, enabled=policy.config.starvation_enabled)
    return combined_score(his, fut, star).score


def cached_sample(
    model: ToyDiTModel,
    init_latent: LatentState,
    schedule: TimestepSchedule,
    policy: Policy,
    spec_table=None,
    seeds: dict | None = None,
) -> tuple[np.ndarray, TraceArchive, RunReport]:
    """Run one cached sampling trajectory under a policy.

    Warmup steps compute every token densely. With cached_ratio 0 (or policy
    none) the trajectory is bit-identical to sample_full. The ledger includes
    the lookahead cost when a table is supplied.
    """
    cfg = model.config
    pcfg = policy.config
    if policy.needs_spec_table and spec_table is None:
        raise ConfigError("specdiff policy requires a speculative score table")

    n = cfg.n_tokens
    all_ids = np.arange(n, dtype=np.int64)
    x = np.array(init_latent.x, dtype=np.float32, copy=True)
    state = CacheState.empty(model)
    ledger = FlopLedger()
    if spec_table is not None:
        ledger.speculation_macs = int(spec_table.flop_cost)
    archive = TraceArchive(
        n_layers=cfg.n_layers, n_tokens=n, d_model=cfg.d_model,
        schedule=schedule.timesteps.copy(),
    )
    rng = np.random.default_rng(policy.seed) if policy.kind == PolicyKind.RANDOM else None
    zero_received = np.zeros((cfg.n_layers, n), dtype=np.float32)
    prev_trace = None
    ts = schedule.timesteps

    for k in range(schedule.n_steps):
        t = float(ts[k])
        dense_step = (
            k < pcfg.warmup_steps
            or policy.kind == PolicyKind.NONE
            or pcfg.cached_ratio == 0.0
            or (policy.kind == PolicyKind.INTERVAL_REUSE and k % policy.period == 0)
        )

        if dense_step:
            partition = TokenPartition(c1=all_ids, c2=all_ids[:0], c3=all_ids[:0])
        elif policy.kind == PolicyKind.INTERVAL_REUSE:
            partition = TokenPartition(c1=all_ids[:0], c2=all_ids, c3=all_ids[:0])
        else:
            scores = _scores_for_step(policy, prev_trace, spec_table, t, state, rng)
            c1 = select_compute_set(scores, pcfg.cached_ratio, n)
            partition = classify(scores, c1, pcfg.c2_mass)
        partition.validate(n)

        velocities = np.empty((n, cfg.d_model), dtype=np.float32)
        if len(partition.c1) > 0:
            res = forward(model, x, t, partition.c1, state.kv_snapshots)
            if not np.all(np.isfinite(res.velocities)):
                raise DivergenceError(k, f"non-finite velocities at step {k}")
            velocities[res.query_ids] = res.velocities
            trace = res.trace
            fresh = res.velocities
        else:
            trace = None
            fresh = velocities[:0]

        for token in partition.c2:
            velocities[token] = reuse_features(state.feature_history[token])
        for token in partition.c3:
            ring = state.feature_history[token]
            if policy.kind == PolicyKind.TAYLOR_EXTRAPOLATE:
                velocities[token] = taylor_extrapolate(ring, t)
            else:
                h = min(len(ring), pcfg.history_window, k)
                if h < 1:
                    raise CacheIntegrityError(f"token {token} has no cached features")
                weights = approx_weights(schedule, k, h)
                velocities[token] = approximate_features(ring[:h], weights)

        ledger.add_step(step_cost(cfg.n_layers, n, cfg.d_model, cfg.d_ff,
                                  len(partition.c1)))
        archive.append(StepRecord(
            timestep=t,
            query_ids=partition.c1.copy(),
            received=trace.received if trace is not None else zero_received.copy(),
            outputs=velocities.copy(),
        ))

        dt = ts[k + 1] - ts[k]
        x = x + dt * velocities
        if not np.all(np.isfinite(x)):
            raise DivergenceError(k, f"latent diverged at step {k}")

        update_cache_state(state, partition, fresh, t)
        if trace is not None:
            prev_trace = trace

    archive.final_latent = x
    report = RunReport.from_run(
        policy_kind=policy.kind.value,
        policy_params=policy.params(),
        cached_ratio=pcfg.cached_ratio,
        warmup_steps=pcfg.warmup_steps,
        d_ff=cfg.d_ff,
        archive=archive,
        ledger=ledger,
        seeds=seeds,
    )
    return x, archive, report
