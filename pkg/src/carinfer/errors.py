"""Exception hierarchy; the CLI maps each family to a stable exit code."""


class CarInferError(Exception):
    """Base class for library errors."""


class InputError(CarInferError, ValueError):
    """Malformed user input (files, flags, configs)."""


class NumericalError(CarInferError, ArithmeticError):
    """A computation is undefined for the given data."""


class SingularDesignError(NumericalError):
    pass


class SingularCovarianceError(NumericalError):
    pass


class DegenerateTestError(NumericalError):
    pass


class InvalidContrastError(NumericalError, ValueError):
    pass


class BudgetError(CarInferError, RuntimeError):
    """A rejection sampler ran out of its attempt budget."""


class RerandomizationBudgetError(BudgetError):
    def __init__(self, max_attempts: int, threshold: float):
        super().__init__(
            f"rerandomization found no assignment with M < {threshold:g} "
            f"within the budget of {max_attempts} attempts")
        self.max_attempts = max_attempts
        self.threshold = threshold


class TruncationBudgetError(BudgetError):
    pass


class ReplicationError(CarInferError):
    """Wraps a failure inside a Monte Carlo replication."""

    def __init__(self, index: int, procedure: str, cause: Exception):
        super().__init__(f"replication {index} ({procedure}) failed: {cause}")
        self.index = index
        self.procedure = procedure
        self.cause = cause
