"""Exception hierarchy shared by all modules."""


class GeoLearnError(Exception):
    """Base class for every error raised by the package."""


class NonConvergence(GeoLearnError):
    pass


class DomainError(GeoLearnError, ValueError):
    pass


class DimensionMismatch(GeoLearnError, ValueError):
    pass


class NotPositiveDefinite(GeoLearnError, ValueError):
    pass


class NonFiniteState(GeoLearnError, FloatingPointError):
    """A trajectory produced a non-finite coordinate.

    ``step`` and ``members`` identify where it happened.
    """

    def __init__(self, message, step=None, members=None):
        super().__init__(message)
        self.step = step
        self.members = members


class EmptyEnsemble(GeoLearnError, ValueError):
    pass


class StabilityViolation(GeoLearnError, ValueError):
    pass


class NegativeDensity(GeoLearnError):
    pass


class OverflowGuard(GeoLearnError, OverflowError):
    pass


class MismatchedTrajectory(GeoLearnError, ValueError):
    pass


class GridMismatch(GeoLearnError, ValueError):
    pass


class DegenerateRatio(GeoLearnError, ZeroDivisionError):
    pass


class PhaseUndefined(GeoLearnError):
    pass


class ConfigError(GeoLearnError):
    """Base class for configuration problems (CLI exit status 1)."""


class ParseError(ConfigError):
    pass


class UnknownKey(ConfigError, KeyError):
    """A config key that the schema does not know; ``key`` holds its dotted path."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key

    def __str__(self):
        return Exception.__str__(self)


class InvariantViolation(ConfigError):
    pass


class MissingColumn(GeoLearnError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ExpansionRegimeViolated(UserWarning):
    """The small-selection expansion behind the mean-trait ODE is not justified."""


class StabilityWarning(UserWarning):
    pass


class DegenerateDensity(UserWarning):
    """A density had non-positive cells that were clamped before taking sqrt or log."""
