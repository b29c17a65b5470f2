"""Exception and warning types raised across the package."""


class BayesPimError(Exception):
    """Base class for package errors."""


class InvalidParameterError(BayesPimError, ValueError):
    """A model parameter is outside its support or produced a non-finite value."""


class DegenerateIntervalError(BayesPimError, ValueError):
    """A truncation interval carries (numerically) zero probability mass."""


class ZeroMassError(BayesPimError, ValueError):
    """All interval weights of a record underflowed to zero."""


class RecordValidationError(BayesPimError, ValueError):
    """A screening record violates the data model."""


class RecodingError(BayesPimError, ValueError):
    """The baseline recoding for the non-parametric estimator is undefined."""


class PoolConstructionError(BayesPimError, ValueError):
    """A donor pool cannot be built from the reference dataset."""


class ConsistencyError(BayesPimError, RuntimeError):
    """Internal sampler state became inconsistent (a bug, not a data problem)."""


class NumericalDegeneracyWarning(RuntimeWarning):
    """A numerical fallback was used inside the sampler."""
