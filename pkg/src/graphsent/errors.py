"""Exception hierarchy shared across the package.

InputError maps to CLI exit code 2, ComputationError (and subclasses) to
exit code 1.
"""


class GraphsentError(Exception):
    pass


class InputError(GraphsentError):
    """Malformed or inconsistent input data, files, or configuration."""


class ComputationError(GraphsentError):
    """A numerical procedure failed (divergence, singularity, ...)."""


class SeparationError(ComputationError):
    """Logistic likelihood has no finite maximizer (complete separation)."""
