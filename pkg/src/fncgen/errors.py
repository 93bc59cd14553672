"""Shared exception types with the package's error-contract semantics."""


class FncgenError(Exception):
    """Base class for all package errors."""


class ShapeError(FncgenError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(FncgenError):
    """Invalid configuration value, flag, or schema key."""


class ContractError(FncgenError):
    """A documented precondition of an operation was violated."""


class FormatError(FncgenError):
    """On-disk artifact is malformed: bad magic, version, or truncation."""


class TrainingDiverged(FncgenError):
    """A loss term became non-finite during training."""
