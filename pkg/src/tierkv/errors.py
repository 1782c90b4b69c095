"""Exception types shared across the package."""


class TierKVError(Exception):
    """Base class for all library errors."""


class ConfigError(TierKVError):
    """Invalid configuration value, unknown key, or malformed config file."""


class TraceFormatError(TierKVError):
    """Malformed selection-trace file; the message names the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegeneratePoolError(TierKVError):
    """Chance-corrected overlap is undefined because K >= candidate pool size."""


class PoolExhausted(TierKVError):
    """No free block in the physical pool; the caller decides how to react."""


class ConsistencyError(TierKVError):
    """A cross-module state invariant was violated (double eviction,
    promotion without a slow-tier copy, write-once ledger breach, ...)."""


class AdmissionError(TierKVError):
    """Workload cannot be admitted under the configured tier capacities."""
