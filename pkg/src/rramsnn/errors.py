"""Exception types shared across the package.

The CLI maps these onto process exit codes.
"""


class ConfigError(ValueError):
    """Invalid configuration or arguments (exit code 2)."""

    exit_code = 2


class NumericalFault(ArithmeticError):
    """NaN/Inf in simulator state, gradients or a diverging loss (exit code 3)."""

    exit_code = 3


class ContractViolation(ValueError):
    """A caller broke an operation precondition (e.g. negative read time)."""

    exit_code = 2


class OutOfRangeError(ConfigError):
    """Interpolation or lookup requested outside the tabulated range."""
