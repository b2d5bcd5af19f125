class MealError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(MealError, ValueError):
    """A precondition on arguments or configuration was violated."""


class ShapeError(ContractError):
    """Tensor or feature dimensions do not agree."""


class DataError(MealError, ValueError):
    """Input data is malformed or out of range."""


class IntegrityError(DataError):
    """A persisted file is truncated or does not match its header."""
