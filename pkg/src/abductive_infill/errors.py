class AbductiveError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(AbductiveError, ValueError):
    pass


class LengthError(AbductiveError, ValueError):
    pass


class InputError(AbductiveError, ValueError):
    pass


class ParseError(AbductiveError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DivergenceError(AbductiveError, RuntimeError):
    """Non-finite loss, energy or gradient during an iterative procedure."""

    def __init__(self, message: str, iteration: int | None = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)


class BudgetError(AbductiveError, ValueError):
    pass
