"""Exception types shared across the package.

Validation problems (bad shapes, bad configs, unknown ids) and numeric
failures (NaN/Inf, divergence) are kept distinct so the CLI can map them
to exit codes 2 and 3 respectively.
"""


class ValidationError(ValueError):
    """Invalid argument, config value, or file content."""


class DimensionError(ValidationError):
    """Array shapes are inconsistent with the operation's contract."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or diverged."""
