"""Exception types shared across the package."""


class InputError(ValueError):
    """Caller supplied malformed or out-of-contract data."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values; carries diagnostics."""

    def __init__(self, message: str, **diagnostics):
        self.diagnostics = dict(diagnostics)
        if diagnostics:
            detail = ", ".join(f"{k}={v}" for k, v in sorted(diagnostics.items()))
            message = f"{message} ({detail})"
        super().__init__(message)


class ConfigError(ValueError):
    """Run configuration is invalid or inconsistent."""
