"""Caching policies the engine can run.

Every policy is a parameterization of the same engine loop; they differ only
in how per-step scores are produced and how non-computed tokens are
approximated. The named baselines are toy-scale reinterpretations of common
caching strategies, not reimplementations of any published system.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .importance import PolicyConfig


class PolicyKind(str, enum.Enum):
    NONE = "none"
    INTERVAL_REUSE = "interval_reuse"
    HISTORICAL_ONLY = "historical_only"
    RANDOM = "random"
    TAYLOR_EXTRAPOLATE = "taylor_extrapolate"
    SPECDIFF = "specdiff"

    @classmethod
    def from_string(cls, name: str) -> "PolicyKind":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ConfigError(f"unknown policy {name!r}; expected one of: {valid}") from None


# kinds whose selection comes from importance scores
SCORED_KINDS = frozenset(
    {PolicyKind.HISTORICAL_ONLY, PolicyKind.RANDOM, PolicyKind.TAYLOR_EXTRAPOLATE,
     PolicyKind.SPECDIFF}
)


@dataclass(frozen=True)
class Policy:
    kind: PolicyKind
    config: PolicyConfig
    period: int | None = None   # interval_reuse only
    seed: int | None = None     # random only

    def __post_init__(self):
        if self.kind == PolicyKind.INTERVAL_REUSE:
            if self.period is None or self.period < 1:
                raise ConfigError(f"interval_reuse needs period >= 1, got {self.period}")
        if self.kind == PolicyKind.RANDOM and self.seed is None:
            raise ConfigError("random policy needs a seed")
        if self.kind == PolicyKind.NONE and self.config.cached_ratio != 0.0:
            raise ConfigError("policy none means cached_ratio 0")

    @property
    def uses_scoring(self) -> bool:
        return self.kind in SCORED_KINDS

    @property
    def needs_spec_table(self) -> bool:
        return self.kind == PolicyKind.SPECDIFF

    def params(self) -> dict:
        out = {
            "cached_ratio": self.config.cached_ratio,
            "c2_mass": self.config.c2_mass,
            "warmup_steps": self.config.warmup_steps,
            "starvation": self.config.starvation_enabled,
            "history_window": self.config.history_window,
        }
        if self.kind == PolicyKind.SPECDIFF:
            out["speculation_steps"] = self.config.speculation_steps
        if self.kind == PolicyKind.INTERVAL_REUSE:
            out["period"] = self.period
        if self.kind == PolicyKind.RANDOM:
            out["policy_seed"] = self.seed
        return out


def policy_none() -> Policy:
    """Dense sampling; every token computed every step."""
    return Policy(kind=PolicyKind.NONE, config=PolicyConfig(cached_ratio=0.0))


def policy_interval_reuse(period: int, config: PolicyConfig | None = None) -> Policy:
    """All tokens on steps with k mod period == 0, full reuse otherwise."""
    if period < 1:
        raise ConfigError(f"period must be >= 1, got {period}")
    cfg = config or PolicyConfig(cached_ratio=0.0)
    cfg = replace(cfg, cached_ratio=0.0)  # sizing rule does not apply
    return Policy(kind=PolicyKind.INTERVAL_REUSE, config=cfg, period=period)


def policy_historical_only(config: PolicyConfig) -> Policy:
    """Previous-iteration attention only (future signal pinned to 1)."""
    return Policy(kind=PolicyKind.HISTORICAL_ONLY, config=config)


def policy_random(seed: int, config: PolicyConfig) -> Policy:
    """Uniformly random compute set of the policy-mandated size each step."""
    return Policy(kind=PolicyKind.RANDOM, config=config, seed=seed)


def policy_taylor_extrapolate(config: PolicyConfig) -> Policy:
    """Historical selection with first-order extrapolation for approximated tokens."""
    return Policy(kind=PolicyKind.TAYLOR_EXTRAPOLATE, config=config)


def policy_specdiff(config: PolicyConfig) -> Policy:
    """Historical x future x starvation scoring with three-class treatment."""
    return Policy(kind=PolicyKind.SPECDIFF, config=config)


def taylor_extrapolate(history: list[tuple[np.ndarray, float]], current_timestep: float) -> np.ndarray:
    """First-order continuation from the two most recent ring entries.

    F(T) ~ F1 + (F1 - F2) * (T - T1) / (T1 - T2) with (F1, T1) the newest
    entry. Falls back to plain reuse with fewer than two entries or a
    degenerate timestep gap.
    """
    if not history:
        raise ValueError("cannot extrapolate from an empty history")
    if len(history) < 2:
        return history[0][0].copy()
    (f1, t1), (f2, t2) = history[0], history[1]
    if t1 == t2:
        return f1.copy()
    ratio = np.float32((current_timestep - t1) / (t1 - t2))
    return (f1 + (f1 - f2) * ratio).astype(np.float32)
