"""Minimal deterministic diffusion-transformer backbone and rectified-flow sampler.

The latent is a (n_tokens, d_model) matrix; rows are tokens. Each denoising
step runs the transformer once and the per-token output is a velocity of the
same shape, integrated with explicit Euler steps from T=1 (noise) to T=0.

Partial computation: a forward pass may compute only a query subset of
tokens. Queries are re-projected and re-run through the FFN; every query
still attends over all n_tokens keys, taking fresh key/value rows for the
query set and stale per-layer snapshots for everything else. All arithmetic
is float32; trace accumulation is float64.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    CacheIntegrityError,
    ConfigError,
    DivergenceError,
    ScheduleError,
    TraceFormatError,
)
from .trace import StepRecord, TraceArchive

LN_EPS = 1e-5
_TIME_SCALE = 1000.0  # timestep in [0,1] stretched before the sinusoid


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    n_tokens: int
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "n_tokens"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.n_tokens < 4:
            raise ConfigError(f"n_tokens must be >= 4, got {self.n_tokens}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def toy(cls, seed: int = 0) -> "ModelConfig":
        """The desk-scale default: 4 layers, 4 heads, 64 tokens of width 64."""
        return cls(n_layers=4, n_heads=4, d_model=64, d_ff=256, n_tokens=64, seed=seed)


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray


@dataclass(frozen=True)
class ToyDiTModel:
    """Immutable weight bundle; safe to share across runs."""

    config: ModelConfig
    layers: tuple[LayerWeights, ...]
    w_time: np.ndarray  # (d_model, d_model) projection of the sinusoidal features

    def weight_checksum(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            for arr in (layer.wq, layer.wk, layer.wv, layer.wo, layer.ln1_gain,
                        layer.ln1_bias, layer.ln2_gain, layer.ln2_bias,
                        layer.w_in, layer.w_out):
                h.update(arr.tobytes())
        h.update(self.w_time.tobytes())
        return h.hexdigest()


def init_model(config: ModelConfig) -> ToyDiTModel:
    """Build deterministic weights from (config, seed).

    Projections are uniform(-1/sqrt(d_model), +1/sqrt(d_model)); layer-norm
    gains start at 1 and biases at 0. Small-magnitude init keeps a 28-step
    trajectory finite.
    """
    rng = np.random.default_rng(config.seed)
    d, dff = config.d_model, config.d_ff
    scale = 1.0 / np.sqrt(d)

    def draw(rows: int, cols: int) -> np.ndarray:
        return rng.uniform(-scale, scale, size=(rows, cols)).astype(np.float32)

    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                wq=draw(d, d),
                wk=draw(d, d),
                wv=draw(d, d),
                wo=draw(d, d),
                ln1_gain=np.ones(d, dtype=np.float32),
                ln1_bias=np.zeros(d, dtype=np.float32),
                ln2_gain=np.ones(d, dtype=np.float32),
                ln2_bias=np.zeros(d, dtype=np.float32),
                w_in=draw(d, dff),
                w_out=draw(dff, d),
            )
        )
    w_time = draw(d, d)
    return ToyDiTModel(config=config, layers=tuple(layers), w_time=w_time)


@dataclass(frozen=True)
class TimestepSchedule:
    """Strictly decreasing timesteps T_0=1.0 ... T_N=0.0, stored float32.

    Float32 is deliberate: the same values are written to trace archives, so
    offline replays make bit-identical nearest-timestep decisions.
    """

    timesteps: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timesteps, dtype=np.float32)
        object.__setattr__(self, "timesteps", ts)
        if ts.ndim != 1 or len(ts) < 2:
            raise ScheduleError("schedule needs at least two timesteps")
        if ts[0] != np.float32(1.0) or ts[-1] != np.float32(0.0):
            raise ScheduleError("schedule must start at 1.0 and end at 0.0")
        if np.any(np.diff(ts) >= 0):
            raise ScheduleError("schedule must be strictly decreasing")
        if np.any(ts < 0) or np.any(ts > 1):
            raise ScheduleError("timesteps must lie in [0, 1]")

    @property
    def n_steps(self) -> int:
        return len(self.timesteps) - 1


def make_schedule(n_steps: int) -> TimestepSchedule:
    """Uniform rectified-flow schedule: T_k = 1 - k/N."""
    if not isinstance(n_steps, (int, np.integer)) or n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps!r}")
    values = np.linspace(1.0, 0.0, int(n_steps) + 1).astype(np.float32)
    return TimestepSchedule(values)


@dataclass
class LatentState:
    x: np.ndarray       # (n_tokens, d_model) float32
    iteration: int = 0
    timestep: float = 1.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        if self.x.ndim != 2:
            raise ConfigError("latent must be a (n_tokens, d_model) matrix")
        if not np.all(np.isfinite(self.x)):
            raise DivergenceError(self.iteration, "latent contains non-finite entries")


def init_noise(config: ModelConfig, noise_seed: int) -> LatentState:
    """Standard-normal initial latent, deterministic in noise_seed."""
    rng = np.random.default_rng(noise_seed)
    x = rng.standard_normal((config.n_tokens, config.d_model)).astype(np.float32)
    return LatentState(x=x, iteration=0, timestep=1.0)


@dataclass
class AttentionTrace:
    """Attention mass received per token per layer for one forward pass.

    received[l, j] = mean over heads of the total softmax probability token j
    got as a key from all active queries in layer l. Summing a layer over
    tokens therefore gives |query set|.
    """

    received: np.ndarray   # (n_layers, n_tokens) float32
    query_ids: np.ndarray  # sorted int64

    def __post_init__(self):
        self.received = np.asarray(self.received, dtype=np.float32)
        if self.received.ndim != 2:
            raise TraceFormatError(f"received must be 2-D, got shape {self.received.shape}")
        if np.any(self.received < 0):
            raise TraceFormatError("received scores must be non-negative")
        self.query_ids = np.asarray(self.query_ids, dtype=np.int64)

    @classmethod
    def from_layers(cls, layer_scores, query_ids) -> "AttentionTrace":
        """Build from per-layer vectors; ragged lengths are a format error."""
        vectors = [np.asarray(v, dtype=np.float32) for v in layer_scores]
        lengths = {v.shape for v in vectors}
        if len(lengths) != 1 or vectors[0].ndim != 1:
            raise TraceFormatError(
                f"layer score vectors of unequal length: {sorted(lengths)}"
            )
        return cls(received=np.stack(vectors), query_ids=query_ids)


class KVSnapshots:
    """Per-layer per-token key/value rows, fresh or stale.

    `filled[l, j]` says token j has a usable row at layer l. A dense pass
    fills everything; partial passes overwrite only their query rows and
    require the rest to be covered already.
    """

    def __init__(self, keys: np.ndarray, values: np.ndarray, filled: np.ndarray):
        self.keys = keys
        self.values = values
        self.filled = filled

    @classmethod
    def empty(cls, config: ModelConfig) -> "KVSnapshots":
        shape = (config.n_layers, config.n_tokens, config.d_model)
        return cls(
            keys=np.zeros(shape, dtype=np.float32),
            values=np.zeros(shape, dtype=np.float32),
            filled=np.zeros((config.n_layers, config.n_tokens), dtype=bool),
        )

    def copy(self) -> "KVSnapshots":
        return KVSnapshots(self.keys.copy(), self.values.copy(), self.filled.copy())


class ForwardResult(NamedTuple):
    query_ids: np.ndarray   # sorted, int64
    velocities: np.ndarray  # (len(query_ids), d_model) float32, row i is token query_ids[i]
    trace: AttentionTrace
    kv_snapshots: KVSnapshots


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + np.float32(LN_EPS)) * gain + bias


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation, float32 throughout
    c = np.float32(0.7978845608028654)
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))


def timestep_embedding(model: ToyDiTModel, timestep: float) -> np.ndarray:
    """Projected sinusoidal features of the (scaled) timestep, (d_model,) float32."""
    d = model.config.d_model
    half = (d + 1) // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = float(timestep) * _TIME_SCALE * freqs
    feats = np.concatenate([np.cos(angles), np.sin(angles)])[:d].astype(np.float32)
    return feats @ model.w_time


def _normalize_query_set(query_set, n_tokens: int) -> np.ndarray:
    if isinstance(query_set, (set, frozenset)):
        query_set = sorted(query_set)
    ids = np.unique(np.asarray(query_set, dtype=np.int64))
    if ids.size == 0:
        raise ValueError("query_set must be non-empty")
    if ids[0] < 0 or ids[-1] >= n_tokens:
        raise ValueError(f"query ids out of range [0, {n_tokens})")
    return ids


def forward(
    model: ToyDiTModel,
    latent,
    timestep: float,
    query_set,
    kv_snapshots: KVSnapshots,
) -> ForwardResult:
    """Run the backbone for the query tokens only.

    Query rows are projected, their key/value snapshot entries overwritten,
    and each query attends over all n_tokens keys. Mutates kv_snapshots in
    place and returns it. Raises CacheIntegrityError when a non-query token
    has no snapshot entry at some layer.
    """
    cfg = model.config
    x = latent.x if isinstance(latent, LatentState) else np.asarray(latent, dtype=np.float32)
    if x.shape != (cfg.n_tokens, cfg.d_model):
        raise ValueError(f"latent shape {x.shape} does not match config")
    ids = _normalize_query_set(query_set, cfg.n_tokens)
    nq, d, nh, dh = len(ids), cfg.d_model, cfg.n_heads, cfg.d_head

    x_q = x[ids]
    h = x_q + timestep_embedding(model, timestep)
    received = np.zeros((cfg.n_layers, cfg.n_tokens), dtype=np.float64)

    for li, layer in enumerate(model.layers):
        z = _layer_norm(h, layer.ln1_gain, layer.ln1_bias)
        q = z @ layer.wq
        kv_snapshots.keys[li, ids] = z @ layer.wk
        kv_snapshots.values[li, ids] = z @ layer.wv
        kv_snapshots.filled[li, ids] = True
        if not kv_snapshots.filled[li].all():
            missing = int((~kv_snapshots.filled[li]).sum())
            raise CacheIntegrityError(
                f"layer {li}: {missing} token(s) lack key/value snapshots; "
                "run a dense warmup pass first"
            )

        # (heads, rows, d_head) views
        q3 = q.reshape(nq, nh, dh).transpose(1, 0, 2)
        k3 = kv_snapshots.keys[li].reshape(cfg.n_tokens, nh, dh).transpose(1, 0, 2)
        v3 = kv_snapshots.values[li].reshape(cfg.n_tokens, nh, dh).transpose(1, 0, 2)

        logits = (q3 @ k3.transpose(0, 2, 1)) / np.float32(np.sqrt(dh))
        logits -= logits.max(axis=-1, keepdims=True)
        attn = np.exp(logits)
        attn /= attn.sum(axis=-1, keepdims=True)

        received[li] += attn.sum(axis=(0, 1), dtype=np.float64) / nh

        ctx = (attn @ v3).transpose(1, 0, 2).reshape(nq, d)
        h = h + ctx @ layer.wo

        z2 = _layer_norm(h, layer.ln2_gain, layer.ln2_bias)
        h = h + _gelu(z2 @ layer.w_in) @ layer.w_out

    velocities = h - x_q
    trace = AttentionTrace(received=received.astype(np.float32), query_ids=ids)
    return ForwardResult(query_ids=ids, velocities=velocities, trace=trace,
                         kv_snapshots=kv_snapshots)


def sample_full(
    model: ToyDiTModel,
    init_latent: LatentState,
    schedule: TimestepSchedule,
) -> tuple[np.ndarray, TraceArchive]:
    """Dense rectified-flow sampling; records a full archive.

    Euler update x <- x + (T_{k+1} - T_k) * v(x, T_k); the step factor is
    negative, moving from noise toward data.
    """
    cfg = model.config
    x = np.array(init_latent.x, dtype=np.float32, copy=True)
    snaps = KVSnapshots.empty(cfg)
    all_ids = np.arange(cfg.n_tokens, dtype=np.int64)
    archive = TraceArchive(
        n_layers=cfg.n_layers, n_tokens=cfg.n_tokens, d_model=cfg.d_model,
        schedule=schedule.timesteps.copy(),
    )
    ts = schedule.timesteps
    for k in range(schedule.n_steps):
        res = forward(model, x, float(ts[k]), all_ids, snaps)
        if not np.all(np.isfinite(res.velocities)):
            raise DivergenceError(k, f"non-finite velocities at step {k}")
        archive.append(StepRecord(
            timestep=float(ts[k]),
            query_ids=all_ids.copy(),
            received=res.trace.received,
            outputs=res.velocities.copy(),
        ))
        dt = ts[k + 1] - ts[k]
        x = x + dt * res.velocities
        if not np.all(np.isfinite(x)):
            raise DivergenceError(k, f"latent diverged at step {k}")
    archive.final_latent = x
    return x, archive
