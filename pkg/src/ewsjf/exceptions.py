"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid configuration values."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class EmptyInputError(ValueError):
    """An operation that needs data received none."""


class TraceParseError(ValueError):
    """A trace file line could not be turned into a valid request."""

    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno
