"""Exception types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class TraceFormatError(ValueError):
    """Malformed attention trace (ragged layer vectors, bad shapes)."""


class ScheduleError(ValueError):
    """Timestep schedule violates the strictly-decreasing contract."""


class CacheIntegrityError(RuntimeError):
    """Cache state is missing entries the current step depends on."""


class DivergenceError(ArithmeticError):
    """Non-finite values appeared during sampling."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite values encountered at step {step}")


class ArchiveFormatError(ValueError):
    """Trace-archive bytes do not parse."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        self.offset = offset
        super().__init__(message)


class UnsupportedVersionError(ArchiveFormatError):
    """Archive version field is not supported by this reader."""


class ArchiveMismatchError(ValueError):
    """Two archives disagree on dimensions or schedule."""
