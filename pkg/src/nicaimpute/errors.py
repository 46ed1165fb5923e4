"""Exception hierarchy. CLI exit codes are keyed off these classes."""


class NicaError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(NicaError, ValueError):
    pass


class ContractError(NicaError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class ConfigError(NicaError, ValueError):
    pass


class ParseError(NicaError, ValueError):
    pass


class AmputationError(NicaError, ValueError):
    pass


class DivergenceError(NicaError, ArithmeticError):
    """Non-finite values appeared while growing or training."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class TrainingError(NicaError, ArithmeticError):
    pass


class ImputationError(NicaError, ValueError):
    """The input cannot be imputed as asked (e.g. a column with no observed cell)."""


class EvaluationError(NicaError, ValueError):
    """A metric or downstream fit is undefined for the given inputs."""
