"""Exception types shared across the toolkit."""


class KsqiError(Exception):
    """Base class for all toolkit errors."""


class ParseError(KsqiError):
    """A document could not be decoded; carries a human-readable location."""

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(message if location is None else f"{location}: {message}")


class ValidationError(KsqiError):
    """Input violates a documented invariant or precondition."""


class FeasibilityError(KsqiError):
    """A grid violates its constraint system beyond tolerance."""

    def __init__(self, message: str, violations=None):
        self.violations = violations or []
        super().__init__(message)


class SolverFailure(KsqiError):
    """An iterative solve ended without reaching its target tolerances."""

    def __init__(self, message: str, report=None):
        self.report = report
        super().__init__(message)


class MissingFeatureError(KsqiError):
    """A baseline needs a per-chunk feature the session does not carry."""


class RankDeficientError(KsqiError):
    """A least-squares design matrix is rank deficient."""

    def __init__(self, message: str, columns=None):
        self.columns = list(columns or [])
        super().__init__(message)


class UndefinedCorrelationError(KsqiError):
    """A correlation coefficient is undefined for the given input."""


class TraceExhaustedError(KsqiError):
    """A network trace ended before the simulated session completed."""
