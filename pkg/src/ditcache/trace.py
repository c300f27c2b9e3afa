"""In-memory per-step trace records and the run archive container.

One StepRecord per sampler iteration: which tokens were computed, the
attention mass each token received per layer, and the per-token output
(velocity) actually used to advance the latent. The binary on-disk form
lives in archive.py.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TraceFormatError


@dataclass
class StepRecord:
    timestep: float
    query_ids: np.ndarray  # sorted token ids computed this step, int64
    received: np.ndarray   # (n_layers, n_tokens) float32, attention received per token
    outputs: np.ndarray    # (n_tokens, d_model) float32, velocity used per token

    def received_per_token(self) -> np.ndarray:
        """Attention received summed over layers, float64."""
        return self.received.sum(axis=0, dtype=np.float64)


@dataclass
class TraceArchive:
    """All step records of one run plus the header needed to interpret them."""

    n_layers: int
    n_tokens: int
    d_model: int
    schedule: np.ndarray                 # (n_steps + 1,) float32
    records: list[StepRecord] = field(default_factory=list)
    final_latent: np.ndarray | None = None  # (n_tokens, d_model) float32

    @property
    def n_steps(self) -> int:
        return len(self.schedule) - 1

    def append(self, record: StepRecord) -> None:
        if record.received.shape != (self.n_layers, self.n_tokens):
            raise TraceFormatError(
                f"step record received shape {record.received.shape} does not match "
                f"header ({self.n_layers}, {self.n_tokens})"
            )
        if record.outputs.shape != (self.n_tokens, self.d_model):
            raise TraceFormatError(
                f"step record outputs shape {record.outputs.shape} does not match "
                f"header ({self.n_tokens}, {self.d_model})"
            )
        self.records.append(record)

    def validate(self) -> None:
        """Check record count and dimensions against the header."""
        if len(self.records) != self.n_steps:
            raise TraceFormatError(
                f"archive holds {len(self.records)} records for {self.n_steps} steps"
            )
        for k, rec in enumerate(self.records):
            if rec.received.shape != (self.n_layers, self.n_tokens):
                raise TraceFormatError(f"record {k}: received shape mismatch")
            if rec.outputs.shape != (self.n_tokens, self.d_model):
                raise TraceFormatError(f"record {k}: outputs shape mismatch")
        if self.final_latent is not None and self.final_latent.shape != (
            self.n_tokens,
            self.d_model,
        ):
            raise TraceFormatError("final latent shape mismatch")

    def query_bitmap(self, step: int) -> np.ndarray:
        """Boolean computed-mask of length n_tokens for one step."""
        mask = np.zeros(self.n_tokens, dtype=bool)
        mask[self.records[step].query_ids] = True
        return mask

    def selection_counts(self, start_step: int = 0) -> np.ndarray:
        """Per-token computed counts over records[start_step:], int64."""
        counts = np.zeros(self.n_tokens, dtype=np.int64)
        for rec in self.records[start_step:]:
            counts[rec.query_ids] += 1
        return counts
