"""Exception types shared across the package.

The CLI maps ValidationError (and plain ValueError / OSError) to exit code 2
and DependencyError to exit code 3.
"""


class ValidationError(ValueError):
    """Invalid input data, configuration, or argument combination."""


class DependencyError(RuntimeError):
    """A required upstream artifact (checkpoint, sidecar, output) is missing."""
