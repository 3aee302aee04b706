"""Exception and warning types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid parameters supplied at construction time."""


class DomainError(ValueError):
    """An operation was applied outside the domain it is defined on."""


class DegeneratePdfError(ValueError):
    """A density integrates to (numerically) zero over its support."""


class NonConvergenceError(RuntimeError):
    """A quadrature did not settle as its integration window was widened."""


class MomentDivergenceError(RuntimeError):
    """A required moment of a distribution is infinite."""


class NumericError(FloatingPointError):
    """Non-finite values encountered in the network dynamics."""


class TrainingError(RuntimeError):
    """Training diverged; carries the last finite weights."""

    def __init__(self, message, last_good_weights=None, update=None):
        super().__init__(message)
        self.last_good_weights = last_good_weights
        self.update = update


class EventParseError(ValueError):
    """Malformed line in an event CSV file."""

    def __init__(self, message, line_number):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class SchemaError(ValueError):
    """Event CSV content violates its declared header."""


class ThresholdDivergenceWarning(RuntimeWarning):
    """Expected threshold changes materially when the support is widened."""
