"""Short lookahead run that harvests future attention scores.

The lookahead is a plain dense S-step sample on the same initial noise as the
main run; only per-step attention-received vectors are kept (latents and
outputs are discarded), plus the run's MAC cost. The table is what the
importance module's future signal reads from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .metrics import dense_step_macs
from .model import LatentState, ToyDiTModel, make_schedule, sample_full
from .trace import TraceArchive


@dataclass(frozen=True)
class SpeculativeScoreTable:
    """Per-timestep token scores from the lookahead run.

    timesteps are the S iteration inputs of an S-step schedule (strictly
    decreasing; the terminal 0.0 is never an iteration input). scores[i] is
    the layer-summed attention received at timesteps[i].
    """

    timesteps: np.ndarray  # (S,) float32
    scores: np.ndarray     # (S, n_tokens) float64
    flop_cost: int

    def __post_init__(self):
        ts = np.asarray(self.timesteps, dtype=np.float32)
        sc = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "timesteps", ts)
        object.__setattr__(self, "scores", sc)
        if ts.ndim != 1 or ts.size == 0:
            raise ConfigError("table needs at least one timestep")
        if np.any(np.diff(ts) >= 0):
            raise ConfigError("table timesteps must be strictly decreasing")
        if sc.shape[0] != ts.size:
            raise ConfigError("one score row per timestep required")
        if np.any(sc < 0):
            raise ConfigError("table scores must be non-negative")

    @property
    def n_entries(self) -> int:
        return len(self.timesteps)


def speculative_prerun(model: ToyDiTModel, init_latent: LatentState,
                       speculation_steps: int) -> SpeculativeScoreTable:
    """Dense S-step lookahead on the main run's initial noise.

    Pure in (model, noise, S): independent of the caching ratio and of any
    main-run state. Cost is exactly S dense steps.
    """
    if speculation_steps < 1:
        raise ConfigError(f"speculation_steps must be >= 1, got {speculation_steps}")
    schedule = make_schedule(speculation_steps)
    _, archive = sample_full(model, init_latent, schedule)
    cfg = model.config
    return table_from_archive(archive, d_ff=cfg.d_ff)


def table_from_archive(archive: TraceArchive, d_ff: int | None = None) -> SpeculativeScoreTable:
    """Rebuild a score table from a recorded dense run.

    Archives do not store d_ff; without it the cost field is 0, which is fine
    for selection-only replay where no FLOP accounting happens.
    """
    timesteps = archive.schedule[:-1].copy()
    scores = np.stack([rec.received_per_token() for rec in archive.records])
    cost = 0
    if d_ff is not None:
        cost = archive.n_steps * dense_step_macs(
            archive.n_layers, archive.n_tokens, archive.d_model, d_ff
        )
    return SpeculativeScoreTable(timesteps=timesteps, scores=scores, flop_cost=cost)
