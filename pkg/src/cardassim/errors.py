"""Exception hierarchy shared by the models, filters and CLI."""


class CardAssimError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(CardAssimError, ValueError):
    """Invalid or inconsistent configuration (layouts, scenario keys, ranks)."""

    exit_code = 2

    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class DomainError(CardAssimError, ValueError):
    """Argument outside the mathematical domain of an operation."""

    exit_code = 2


class UsageError(CardAssimError):
    """Incompatible inputs to a comparison or CLI command."""

    exit_code = 2


class NumericalError(CardAssimError, ArithmeticError):
    """A linear-algebra step failed; ``diagnostics`` carries the evidence."""

    exit_code = 3

    def __init__(self, message, step=None, **diagnostics):
        self.step = step
        self.diagnostics = diagnostics
        parts = [message]
        if step is not None:
            parts.append(f"step={step}")
        parts.extend(f"{k}={v}" for k, v in diagnostics.items())
        super().__init__("; ".join(parts))
