"""Error taxonomy shared across modules; the CLI maps each class to an exit code."""


class ConfigError(ValueError):
    """Invalid parameter/configuration value (CLI exit 2)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required (CLI exit 4)."""
