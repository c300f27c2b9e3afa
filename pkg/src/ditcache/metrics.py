"""Analysis quantities: FLOP ledger, recall vs oracle, selection skew,
relative-error profile, similarity decay, latent fidelity, speedup.

All functions are pure over archives/arrays, so every number is replayable
offline. Ledger entries are exact integer multiply-add (MAC) counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArchiveMismatchError
from .importance import compute_set_size, select_compute_set
from .trace import TraceArchive

PSNR_CAP = 99.0


# ---------------------------------------------------------------------------
# FLOP ledger
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepCost:
    """MAC counts for one sampler step, split by operator category.

    With c computed (query) tokens, n total tokens, d model width, f FFN
    width and L layers:

        qkv_proj     = L * 3*c*d*d
        attn_scores  = L * c*n*d      (keys stay full-width)
        attn_values  = L * c*n*d
        out_proj     = L * c*d*d
        ffn          = L * 2*c*d*f

    A dense step (c = n) totals L * (4*n*d^2 + 2*n^2*d + 2*n*d*f).
    Layer norms, softmax and embeddings are excluded by convention.
    """

    n_queries: int
    qkv_proj: int
    attn_scores: int
    attn_values: int
    out_proj: int
    ffn: int

    @property
    def total(self) -> int:
        return self.qkv_proj + self.attn_scores + self.attn_values + self.out_proj + self.ffn


def step_cost(n_layers: int, n_tokens: int, d_model: int, d_ff: int,
              n_queries: int) -> StepCost:
    """Exact MAC count of a (possibly partial) step."""
    if not (0 <= n_queries <= n_tokens):
        raise ValueError(f"n_queries must be in [0, {n_tokens}], got {n_queries}")
    L, n, d, f, c = n_layers, n_tokens, d_model, d_ff, n_queries
    return StepCost(
        n_queries=c,
        qkv_proj=L * 3 * c * d * d,
        attn_scores=L * c * n * d,
        attn_values=L * c * n * d,
        out_proj=L * c * d * d,
        ffn=L * 2 * c * d * f,
    )


def dense_step_macs(n_layers: int, n_tokens: int, d_model: int, d_ff: int) -> int:
    return step_cost(n_layers, n_tokens, d_model, d_ff, n_tokens).total


@dataclass
class FlopLedger:
    """Per-step MAC accounting plus the lookahead run's cost."""

    steps: list[StepCost] = field(default_factory=list)
    speculation_macs: int = 0

    def add_step(self, cost: StepCost) -> None:
        self.steps.append(cost)

    @property
    def compute_macs(self) -> int:
        return sum(s.total for s in self.steps)

    @property
    def total_macs(self) -> int:
        return self.compute_macs + self.speculation_macs

    def category_totals(self) -> dict[str, int]:
        names = ("qkv_proj", "attn_scores", "attn_values", "out_proj", "ffn")
        return {name: sum(getattr(s, name) for s in self.steps) for name in names}

    def per_step_totals(self) -> list[int]:
        return [s.total for s in self.steps]


def speedup_estimate(ledger_cached: FlopLedger, ledger_dense: FlopLedger) -> float:
    """dense / (cached + speculation), a hardware-independent proxy."""
    denom = ledger_cached.compute_macs + ledger_cached.speculation_macs
    if denom <= 0:
        raise ValueError("cached ledger has no recorded work")
    return ledger_dense.compute_macs / denom


def gemm_intensity_kn(m: int, n: int, k: int) -> float:
    """M*N*K over (M*K + N*K): workload per output+weight element moved."""
    return (m * n * k) / (m * k + n * k)


def gemm_intensity(m: int, n: int, k: int) -> float:
    """M*N*K over (M*N + N*K + M*K): all three operand matrices counted."""
    return (m * n * k) / (m * n + n * k + m * k)


# ---------------------------------------------------------------------------
# Selection quality
# ---------------------------------------------------------------------------

def _check_compatible(a: TraceArchive, b: TraceArchive) -> None:
    if (a.n_layers, a.n_tokens, a.d_model) != (b.n_layers, b.n_tokens, b.d_model):
        raise ArchiveMismatchError("archives disagree on model dimensions")
    if len(a.schedule) != len(b.schedule) or not np.array_equal(a.schedule, b.schedule):
        raise ArchiveMismatchError("archives disagree on the timestep schedule")


def oracle_set(oracle_archive: TraceArchive, step: int, cached_ratio: float) -> np.ndarray:
    """Truly important tokens at a step: top scorers of the reference run's
    own same-step attention."""
    scores = oracle_archive.records[step].received_per_token()
    return select_compute_set(scores, cached_ratio, oracle_archive.n_tokens)


def recall_vs_oracle(run_archive: TraceArchive, oracle_archive: TraceArchive,
                     cached_ratio: float) -> np.ndarray:
    """Per-step fraction of oracle-important tokens the run computed, steps >= 1."""
    _check_compatible(run_archive, oracle_archive)
    n_steps = run_archive.n_steps
    out = np.zeros(n_steps - 1, dtype=np.float64) if n_steps > 1 else np.zeros(0)
    for k in range(1, n_steps):
        oracle = oracle_set(oracle_archive, k, cached_ratio)
        selected = run_archive.records[k].query_ids
        hits = np.intersect1d(selected, oracle, assume_unique=True).size
        out[k - 1] = hits / len(oracle)
    return out


@dataclass(frozen=True)
class SkewStats:
    top25_share: float
    never_selected_frac: float
    histogram: np.ndarray  # histogram[c] = number of tokens selected exactly c times


def selection_skew(selection_counts) -> SkewStats:
    """Concentration of computed-token selections across tokens.

    top25_share is the share of all selections held by the top quarter of
    tokens (floor(n/4), at least 1) ranked by count.
    """
    counts = np.asarray(selection_counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("selection_counts must be a non-empty vector")
    if np.any(counts < 0):
        raise ValueError("selection counts must be non-negative")
    n = counts.size
    k = max(1, n // 4)
    total = int(counts.sum())
    top = int(np.sort(counts)[::-1][:k].sum())
    return SkewStats(
        top25_share=(top / total) if total > 0 else 0.0,
        never_selected_frac=float((counts == 0).sum()) / n,
        histogram=np.bincount(counts),
    )


# ---------------------------------------------------------------------------
# Output-change analyses over dense archives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorProfile:
    """Relative output change bucketed by same-step importance decile.

    ERROR for token i at step k is ||F_k - F_{k-1}||_2 / ||F_{k-1}||_2 over
    the token's output vector. Deciles are assigned per step from the summed
    attention received (decile 9 = highest scores). cv = std/mean.
    """

    mean: np.ndarray       # (10,)
    std: np.ndarray        # (10,)
    cv: np.ndarray         # (10,)
    n_samples: np.ndarray  # (10,) int64
    n_skipped: int         # zero-norm previous outputs


def relative_error_profile(dense_archive: TraceArchive, n_buckets: int = 10) -> ErrorProfile:
    n = dense_archive.n_tokens
    buckets: list[list[float]] = [[] for _ in range(n_buckets)]
    skipped = 0
    for k in range(1, dense_archive.n_steps):
        prev = dense_archive.records[k - 1].outputs.astype(np.float64)
        curr = dense_archive.records[k].outputs.astype(np.float64)
        prev_norm = np.linalg.norm(prev, axis=1)
        err = np.linalg.norm(curr - prev, axis=1)
        scores = dense_archive.records[k].received_per_token()
        rank = np.empty(n, dtype=np.int64)
        rank[np.argsort(scores, kind="stable")] = np.arange(n)
        decile = rank * n_buckets // n
        for i in range(n):
            if prev_norm[i] == 0.0:
                skipped += 1
                continue
            buckets[decile[i]].append(err[i] / prev_norm[i])
    mean = np.zeros(n_buckets)
    std = np.zeros(n_buckets)
    cv = np.zeros(n_buckets)
    counts = np.zeros(n_buckets, dtype=np.int64)
    for b, vals in enumerate(buckets):
        counts[b] = len(vals)
        if vals:
            arr = np.asarray(vals)
            mean[b] = arr.mean()
            std[b] = arr.std()
            cv[b] = std[b] / mean[b] if mean[b] > 0 else 0.0
    return ErrorProfile(mean=mean, std=std, cv=cv, n_samples=counts, n_skipped=skipped)


def similarity_decay(dense_archive: TraceArchive, max_lag: int = 5) -> np.ndarray:
    """Mean per-token cosine similarity between outputs `lag` steps apart."""
    if max_lag < 1:
        raise ValueError("max_lag must be >= 1")
    out = np.full(max_lag, np.nan)
    for lag in range(1, max_lag + 1):
        sims: list[float] = []
        for k in range(lag, dense_archive.n_steps):
            a = dense_archive.records[k].outputs.astype(np.float64)
            b = dense_archive.records[k - lag].outputs.astype(np.float64)
            na = np.linalg.norm(a, axis=1)
            nb = np.linalg.norm(b, axis=1)
            ok = (na > 0) & (nb > 0)
            if ok.any():
                sims.extend(((a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])).tolist())
        if sims:
            out[lag - 1] = float(np.mean(sims))
    return out


# ---------------------------------------------------------------------------
# Latent fidelity
# ---------------------------------------------------------------------------

def fidelity(reference, candidate) -> tuple[float, float]:
    """(mse, psnr) between two latents; the first argument is the reference.

    PSNR peak is the reference's max absolute entry (latents are not 8-bit
    images). Values are capped to +-99.0; identical inputs report the cap.
    """
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(candidate, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"latent shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 0.0, PSNR_CAP
    peak = float(np.max(np.abs(a)))
    if peak == 0.0:
        return mse, -PSNR_CAP
    psnr = 10.0 * math.log10(peak * peak / mse)
    return mse, float(np.clip(psnr, -PSNR_CAP, PSNR_CAP))


# ---------------------------------------------------------------------------
# Run report
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    """Everything one run reports: policy, per-step compute, ledger, metrics."""

    policy_kind: str
    policy_params: dict
    cached_ratio: float
    n_steps: int
    warmup_steps: int
    per_step_c1: list[int]
    per_step_timesteps: list[float]
    ledger: FlopLedger
    dense_equivalent_macs: int
    speedup: float
    skew: SkewStats
    intensity_kn: float
    intensity_full: float
    seeds: dict = field(default_factory=dict)
    fidelity_mse: float | None = None
    fidelity_psnr: float | None = None
    mean_recall: float | None = None

    @classmethod
    def from_run(cls, *, policy_kind: str, policy_params: dict, cached_ratio: float,
                 warmup_steps: int, d_ff: int, archive: TraceArchive,
                 ledger: FlopLedger, seeds: dict | None = None) -> "RunReport":
        n_layers, n_tokens, d_model = archive.n_layers, archive.n_tokens, archive.d_model
        dense = FlopLedger(
            steps=[step_cost(n_layers, n_tokens, d_model, d_ff, n_tokens)
                   for _ in range(archive.n_steps)]
        )
        return cls(
            policy_kind=policy_kind,
            policy_params=policy_params,
            cached_ratio=cached_ratio,
            n_steps=archive.n_steps,
            warmup_steps=warmup_steps,
            per_step_c1=[len(r.query_ids) for r in archive.records],
            per_step_timesteps=[r.timestep for r in archive.records],
            ledger=ledger,
            dense_equivalent_macs=dense.compute_macs,
            speedup=speedup_estimate(ledger, dense),
            skew=selection_skew(archive.selection_counts(start_step=warmup_steps)),
            intensity_kn=gemm_intensity_kn(n_tokens, d_model, d_model),
            intensity_full=gemm_intensity(n_tokens, d_model, d_model),
            seeds=seeds or {},
        )
