"""Exception hierarchy shared across the package."""

from __future__ import annotations


class DualMAEError(Exception):
    """Base class for all package errors."""


class ShapeError(DualMAEError, ValueError):
    pass


class ContractError(DualMAEError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(DualMAEError, ValueError):
    pass


class DegenerateConfigError(ConfigError):
    """The configuration leaves nothing to supervise or compute."""


class NonFiniteError(DualMAEError, FloatingPointError):
    pass


class SamplingError(DualMAEError, ValueError):
    pass


class ManifestError(DualMAEError, ValueError):
    pass


class CheckpointError(DualMAEError, ValueError):
    pass


class TrainingError(DualMAEError, RuntimeError):
    pass
