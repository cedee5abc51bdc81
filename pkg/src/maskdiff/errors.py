"""Exception types shared across the package."""


class MaskdiffError(Exception):
    """Base class for all package errors."""


class DimensionError(MaskdiffError, ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(MaskdiffError, ArithmeticError):
    """An operation produced NaN or Inf."""


class DomainError(MaskdiffError, ValueError):
    """An argument lies outside the documented domain."""


class TokenIndexError(MaskdiffError, IndexError):
    """A token id or step index is out of range."""


class ConfigError(MaskdiffError, ValueError):
    """Invalid model, sampler, training or run configuration."""


class CheckpointError(MaskdiffError):
    """Base class for checkpoint format problems."""


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class TrainingDivergedError(MaskdiffError, ArithmeticError):
    """Loss or gradients became non-finite during training."""
