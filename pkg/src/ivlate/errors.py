"""Exception hierarchy for ivlate.

Errors are split by where the problem lives: the input surface
(:class:`SchemaError`, :class:`DataError`), the linear algebra
(:class:`SingularError`), or the statistics themselves
(:class:`EstimandError`, :class:`BootstrapError`).  The CLI maps the
first group to exit code 2 and the rest to exit code 1.
"""


class IVLateError(Exception):
    """Base class for all ivlate errors."""


class SchemaError(IVLateError):
    """A file, column map, or configuration is malformed or missing."""


class DataError(IVLateError):
    """Data values violate a contract (non-binary instrument, non-finite
    outcome, empty instrument arm, all cells discarded, ...)."""


class SingularError(IVLateError):
    """A design or moment matrix is rank deficient beyond the drop policy,
    or an instrument is too weak to invert the moment conditions."""


class EstimandError(IVLateError):
    """A requested estimand is undefined on the given data (degenerate
    weights, unidentified cells, violated preconditions)."""


class BootstrapError(IVLateError):
    """The bootstrap produced too few usable replicates."""
