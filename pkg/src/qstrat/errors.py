"""Exception hierarchy shared by every qstrat module."""


class QStratError(Exception):
    """Base class for all library errors."""


class DimensionMismatchError(QStratError, ValueError):
    pass


class UnsupportedDimensionError(QStratError, ValueError):
    pass


class OutOfDomainError(QStratError, ValueError):
    """A ball or sample point leaves the grid box."""


class FieldFormatError(QStratError, ValueError):
    """Malformed field file (bad magic, header, or non-finite payload)."""


class SizeMismatchError(FieldFormatError):
    pass


class NumericFailureError(QStratError, ArithmeticError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class DegenerateFrequencyError(QStratError, ArithmeticError):
    """H vanishes, so the frequency is undefined (u is Q[[0]] near the sphere)."""


class DegenerateBlowupError(QStratError, ArithmeticError):
    pass


class DomainTooSmallError(QStratError, ValueError):
    pass


class ResolutionError(QStratError, ValueError):
    pass


class ConfigurationError(QStratError, ValueError):
    pass


class AxiomViolationError(QStratError):
    """An instance breaks the monotonicity axiom on the density family."""


class InstanceError(QStratError):
    """An instance breaks a contract that the axioms would guarantee."""
