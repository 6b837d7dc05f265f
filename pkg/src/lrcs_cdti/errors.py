"""Exception types shared across the package.

The CLI maps ValidationError to exit code 1 and NumericalError to exit
code 2; everything else is a bug.
"""


class ValidationError(ValueError):
    """Malformed inputs, broken invariants, bad configuration."""


class NumericalError(RuntimeError):
    """Solver divergence, NaN contamination, or other numerical failure."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
