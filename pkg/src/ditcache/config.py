"""Experiment configuration: defaults, validation, flat key/value files.

A config file is plain text, one `key = value` per line, `#` comments.
Unknown keys are rejected outright so typos cannot silently change a run.
CLI flags override file values.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .importance import PolicyConfig
from .model import ModelConfig
from .policies import (
    Policy,
    PolicyKind,
    policy_historical_only,
    policy_interval_reuse,
    policy_none,
    policy_random,
    policy_specdiff,
    policy_taylor_extrapolate,
)

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


@dataclass
class ExperimentConfig:
    # model
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    n_tokens: int = 64
    # run
    steps: int = 28
    policy: str = "none"
    cr: float = 0.0
    spec_steps: int = 2
    period: int = 2
    c2_mass: float = 0.10
    warmup_steps: int = 1
    starvation: bool = True
    # seeds
    seed: int = 0          # model weights
    noise_seed: int = 0
    policy_seed: int = 0   # random policy draws
    # outputs
    out: str | None = None
    trace_out: str | None = None
    report_per_step: bool = True
    report_histogram: bool = True

    def validate(self) -> "ExperimentConfig":
        PolicyKind.from_string(self.policy)
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not (0.0 <= self.cr < 1.0):
            raise ConfigError(f"cr must be in [0, 1), got {self.cr}")
        if self.policy == "none" and self.cr != 0.0:
            raise ConfigError("policy none requires cr = 0")
        self.to_model_config()  # raises on bad dims
        self.to_policy()
        return self

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(n_layers=self.n_layers, n_heads=self.n_heads,
                           d_model=self.d_model, d_ff=self.d_ff,
                           n_tokens=self.n_tokens, seed=self.seed)

    def to_policy(self) -> Policy:
        kind = PolicyKind.from_string(self.policy)
        if kind == PolicyKind.NONE:
            return policy_none()
        pcfg = PolicyConfig(
            cached_ratio=self.cr,
            speculation_steps=self.spec_steps,
            c2_mass=self.c2_mass,
            warmup_steps=self.warmup_steps,
            starvation_enabled=self.starvation,
        )
        if kind == PolicyKind.INTERVAL_REUSE:
            return policy_interval_reuse(self.period, pcfg)
        if kind == PolicyKind.HISTORICAL_ONLY:
            return policy_historical_only(pcfg)
        if kind == PolicyKind.RANDOM:
            return policy_random(self.policy_seed, pcfg)
        if kind == PolicyKind.TAYLOR_EXTRAPOLATE:
            return policy_taylor_extrapolate(pcfg)
        return policy_specdiff(pcfg)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    if ftype == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"key {key!r} expects an integer, got {raw!r}") from None
    if ftype == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"key {key!r} expects a number, got {raw!r}") from None
    if ftype == "bool":
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"key {key!r} expects a boolean, got {raw!r}")
    return raw  # strings (paths, policy name)


def parse_config_file(path) -> dict:
    """Read a flat key/value file into a dict of typed values."""
    text = Path(path).read_text()
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown configuration key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then config-file values, then CLI overrides; validated."""
    cfg = ExperimentConfig()
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown configuration key {key!r}")
            if value is not None:
                setattr(cfg, key, value)
    return cfg.validate()
