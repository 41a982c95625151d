"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ConfigError(ValueError):
    """A configuration violates its invariants."""


class InputError(ValueError):
    """User-supplied data is malformed or violates a precondition."""


class ContractError(RuntimeError):
    """An API was called outside its contract (e.g. backward on a used tape)."""


class TrainingError(RuntimeError):
    """Training cannot start or has to be aborted."""


class FormatVersionError(ValueError):
    """A file or checkpoint has an unsupported version or a mismatched config."""
