"""Exception types shared across the pipeline."""


class CrowdMlatError(Exception):
    """Base class for all errors raised by this package."""


class InvalidCoordinateError(CrowdMlatError, ValueError):
    """Latitude/longitude outside the valid WGS84 ranges."""


class SingularityError(CrowdMlatError, ArithmeticError):
    """Geometric degeneracy: Earth-center input, or a point coincident with a sensor."""


class ParseError(CrowdMlatError, ValueError):
    """Malformed input file. Carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class IntegrityError(CrowdMlatError, ValueError):
    """Well-formed input that violates a dataset invariant (duplicate ids, short records, ...)."""


class UnwrapAmbiguityError(CrowdMlatError, ValueError):
    """Counter overflow count cannot be determined for a sample."""


class OrderingError(CrowdMlatError, ValueError):
    """Samples fed to a tracker out of event-time order."""


class NoEstimateError(CrowdMlatError, LookupError):
    """Offset prediction requested from a pair that is not being tracked."""


class NoGuessError(CrowdMlatError, ValueError):
    """No initial position guess can be formed (no sensor positions known)."""


class ScoringError(CrowdMlatError, ValueError):
    """Predictions reference unknown record ids or contain duplicates."""


class UnknownScenarioError(CrowdMlatError, KeyError):
    """Requested synthetic scenario name is not in the library."""
