"""Exception hierarchy shared across the package."""


class EventFlowError(Exception):
    """Base class for all package-specific errors."""


class DataError(EventFlowError):
    """Invalid, corrupt, or inconsistent data artifacts (datasets, checkpoints, forecasts)."""


class NumericalError(EventFlowError):
    """Non-finite values or numerically impossible intermediate results."""
