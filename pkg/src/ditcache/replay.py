"""Selection-only replay over recorded trace archives.

Re-derives per-step compute sets by applying a policy's scoring to the
recorded attention, with the same warmup and starvation-counter dynamics as a
live run, but without any forward passes. On the archive a run itself
produced, the re-derived selections match the recorded bitmaps exactly, so
replayed metrics equal live metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArchiveMismatchError, ConfigError
from .importance import (
    combined_score,
    future_score,
    select_compute_set,
    starvation_score,
)
from .metrics import SkewStats, oracle_set, selection_skew
from .policies import Policy, PolicyKind
from .trace import TraceArchive


@dataclass
class ReplayResult:
    per_step_recall: np.ndarray      # steps >= 1
    per_step_c1: list[int]
    skew: SkewStats                  # over post-warmup selections
    bitmap_match_fraction: float     # steps whose selection equals the recorded one
    selections: list[np.ndarray]


def replay_selection(
    archive: TraceArchive,
    policy: Policy,
    spec_table=None,
    oracle_archive: TraceArchive | None = None,
) -> ReplayResult:
    """Apply a policy's scoring to recorded traces.

    Recall is measured against `oracle_archive` when given (it must share the
    schedule), otherwise against the replayed archive's own attention.
    """
    if policy.needs_spec_table and spec_table is None:
        raise ConfigError("specdiff replay requires a speculative score table")
    if policy.kind == PolicyKind.INTERVAL_REUSE:
        raise ConfigError("interval_reuse has no score-based selection to replay")
    oracle = oracle_archive if oracle_archive is not None else archive
    if oracle is not archive:
        if (oracle.n_layers, oracle.n_tokens) != (archive.n_layers, archive.n_tokens):
            raise ArchiveMismatchError("oracle archive disagrees on dimensions")
        if not np.array_equal(oracle.schedule, archive.schedule):
            raise ArchiveMismatchError("oracle archive disagrees on the schedule")

    n = archive.n_tokens
    pcfg = policy.config
    cr = pcfg.cached_ratio
    all_ids = np.arange(n, dtype=np.int64)
    cf = np.zeros(n, dtype=np.int64)
    rng = np.random.default_rng(policy.seed) if policy.kind == PolicyKind.RANDOM else None

    selections: list[np.ndarray] = []
    recalls: list[float] = []
    matches = 0
    for k in range(archive.n_steps):
        if k < pcfg.warmup_steps or cr == 0.0 or policy.kind == PolicyKind.NONE:
            c1 = all_ids
        else:
            if policy.kind == PolicyKind.RANDOM:
                scores = rng.random(n)
            else:
                his = archive.records[k - 1].received_per_token()
                if policy.kind == PolicyKind.SPECDIFF:
                    fut = future_score(spec_table, archive.records[k].timestep)
                else:
                    fut = np.ones_like(his)
                star = starvation_score(cf, enabled=pcfg.starvation_enabled)
                scores = combined_score(his, fut, star).score
            c1 = select_compute_set(scores, cr, n)
        selections.append(c1)
        cf += 1
        cf[c1] = 0
        if np.array_equal(c1, archive.records[k].query_ids):
            matches += 1
        if k >= 1:
            target = oracle_set(oracle, k, cr)
            hits = np.intersect1d(c1, target, assume_unique=True).size
            recalls.append(hits / len(target))

    counts = np.zeros(n, dtype=np.int64)
    for c1 in selections[pcfg.warmup_steps:]:
        counts[c1] += 1
    return ReplayResult(
        per_step_recall=np.asarray(recalls),
        per_step_c1=[len(s) for s in selections],
        skew=selection_skew(counts),
        bitmap_match_fraction=matches / archive.n_steps,
        selections=selections,
    )
