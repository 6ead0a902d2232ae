"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so library code should raise
them instead of bare ValueError/RuntimeError wherever the failure class is
known.
"""


class ValidationError(ValueError):
    """Bad configuration, malformed input, or a shape/contract violation."""


class NumericalError(RuntimeError):
    """Non-finite values encountered during integration or training."""
