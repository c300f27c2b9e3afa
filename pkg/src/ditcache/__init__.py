"""ditcache: a desk-scale diffusion-transformer feature-caching laboratory.

A small deterministic transformer backbone with a rectified-flow Euler
sampler, token-level cache policies (including speculative-lookahead
selection with three-class token treatment), an exact FLOP ledger, and
metrics for selection quality, skew, output drift and latent fidelity.
"""

__version__ = "0.1.0"

from .engine import (
    CacheState,
    TokenPartition,
    approx_weights,
    approximate_features,
    cached_sample,
    classify,
    reuse_features,
    update_cache_state,
)
from .errors import (
    ArchiveFormatError,
    ArchiveMismatchError,
    CacheIntegrityError,
    ConfigError,
    DivergenceError,
    ScheduleError,
    TraceFormatError,
    UnsupportedVersionError,
)
from .importance import (
    ImportanceRecords,
    PolicyConfig,
    attention_received,
    combined_score,
    compute_set_size,
    future_score,
    historical_score,
    select_compute_set,
    starvation_score,
)
from .metrics import (
    ErrorProfile,
    FlopLedger,
    RunReport,
    SkewStats,
    StepCost,
    dense_step_macs,
    fidelity,
    recall_vs_oracle,
    relative_error_profile,
    selection_skew,
    similarity_decay,
    speedup_estimate,
    step_cost,
)
from .model import (
    AttentionTrace,
    KVSnapshots,
    LatentState,
    ModelConfig,
    TimestepSchedule,
    ToyDiTModel,
    forward,
    init_model,
    init_noise,
    make_schedule,
    sample_full,
)
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
from .speculation import SpeculativeScoreTable, speculative_prerun, table_from_archive
from .trace import StepRecord, TraceArchive
from .archive import archive_read, archive_write
from .replay import ReplayResult, replay_selection

__all__ = [name for name in dir() if not name.startswith("_")]
