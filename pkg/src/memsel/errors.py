"""Shared exception types. CLI maps them to exit codes."""


class MemselError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MemselError, ValueError):
    """Invalid configuration or input file (CLI exit 2)."""


class MismatchError(MemselError, ValueError):
    """Dimension or artifact mismatch between components (CLI exit 3)."""


class InvariantViolation(MemselError, RuntimeError):
    """A runtime invariant check failed (CLI exit 4)."""


class PartitionError(MemselError, RuntimeError):
    """A dataset split could not satisfy its coverage requirements."""


class DegenerateRegionError(MemselError, ValueError):
    """A class region is too small for the requested superpixel count."""


class StateError(MemselError, RuntimeError):
    """A candidate sample has no usable class for state computation."""
