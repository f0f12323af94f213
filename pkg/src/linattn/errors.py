"""Exception types shared across the package."""


class LinAttnError(Exception):
    """Base class for all package errors."""


class ShapeError(LinAttnError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(LinAttnError):
    """A public operation produced NaN or Inf."""


class DegenerateRowError(LinAttnError):
    """A softmax row had every entry masked."""


class ContractError(LinAttnError):
    """A caller violated an operation precondition."""


class DomainError(LinAttnError):
    """An input value lies outside the mathematical domain of the operation."""


class PrecisionError(LinAttnError):
    """The requested algorithm would underflow; caller should switch to the
    chunkwise path."""


class ConfigError(LinAttnError):
    """An invalid configuration value."""


class CheckpointError(LinAttnError):
    """Base class for checkpoint container problems."""


class CorruptCheckpointError(CheckpointError):
    """The checkpoint file is truncated or structurally invalid."""


class ConfigMismatchError(CheckpointError):
    """The checkpoint's embedded config disagrees with the model being loaded."""
