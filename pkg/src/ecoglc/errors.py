"""Exception types shared across the package."""


class EcoglcError(Exception):
    """Base class for all package errors."""


class ContractError(EcoglcError, ValueError):
    """Arguments violate an operation's preconditions (shapes, ranges)."""


class DegenerateInputError(EcoglcError, ValueError):
    """Input is valid in shape but numerically degenerate (zero matrix, duplicates)."""


class ConfigurationError(EcoglcError, ValueError):
    pass


class DataError(EcoglcError, ValueError):
    """Non-finite or otherwise unusable data values."""


class InsufficientDataError(EcoglcError, ValueError):
    pass


class IdentifiabilityError(EcoglcError, ValueError):
    pass


class StateError(EcoglcError, RuntimeError):
    """Object used before it was ready (e.g. predicting with an untrained model)."""


class SchemaError(EcoglcError, ValueError):
    """File written by an incompatible schema version."""
