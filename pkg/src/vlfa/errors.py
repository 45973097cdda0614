"""Exception types shared across the package."""


class VlfaError(Exception):
    pass


class DimensionError(VlfaError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(VlfaError, ValueError):
    """Input outside the mathematical domain of an operation (e.g. log of 0)."""


class ContractError(VlfaError, ValueError):
    """Caller violated a precondition."""


class NonFiniteError(VlfaError, FloatingPointError):
    """A NaN or Inf appeared in a tensor value."""


class DegeneracyError(VlfaError, ValueError):
    """A 6D rotation block cannot be orthogonalized."""


class BehindCameraError(VlfaError, ValueError):
    """A point has depth too small to be projected."""


class VocabularyError(VlfaError, KeyError):
    pass


class CheckpointFormatError(VlfaError):
    pass


class CheckpointIntegrityError(VlfaError):
    pass


class ConfigError(VlfaError, ValueError):
    pass


class TrainingError(VlfaError, RuntimeError):
    """Training produced a non-finite loss or otherwise diverged."""
