"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform to the operation."""


class DomainError(ValueError):
    """Input values fall outside the mathematical domain of an operation."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class StaleGraphError(RuntimeError):
    """Backward was requested on a graph that has already been consumed."""


class ConfigError(ValueError):
    """An experiment or model configuration is internally inconsistent."""


class FormatError(ValueError):
    """A file does not match its declared binary format."""


class DegenerateInputError(ValueError):
    """An input is degenerate for the requested computation (e.g. zero-norm row)."""


class DegenerateBatchError(ValueError):
    """A batch cannot supply the samples an operation needs (e.g. no negative pairs)."""


class TrainingDivergenceError(RuntimeError):
    """A loss component or gradient became non-finite during training."""
