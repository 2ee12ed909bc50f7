"""Exception hierarchy shared across the package."""


class OcdraError(Exception):
    """Base class for every error raised by ocdra."""


# valuation expressions
class ExprError(OcdraError, ValueError):
    pass


class NegativeWeight(ExprError):
    pass


class ArityMismatch(ExprError):
    pass


class UnknownCoord(ExprError):
    pass


class UnboundedGradient(ExprError):
    pass


class NegativeInput(OcdraError, ValueError):
    pass


class PropertyViolation(OcdraError, AssertionError):
    """A sampled point where a CDR property fails.

    ``witness`` holds the offending point(s) and ``kind`` names the property.
    """

    def __init__(self, kind, message, witness=None):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.witness = witness


# polymatroid
class OutOfRange(OcdraError, IndexError):
    pass


class GroundSetTooLarge(OcdraError, ValueError):
    pass


# engine / certificates
class InvalidStepSize(OcdraError, ValueError):
    pass


class MalformedInstance(OcdraError, ValueError):
    pass


class InfeasibleDual(OcdraError):
    pass


class RatioShortfall(OcdraError):
    pass


# offline
class DimensionTooLarge(OcdraError, ValueError):
    pass


# instances
class BadParams(OcdraError, ValueError):
    pass


class ParseError(OcdraError, ValueError):
    pass


class ValidationError(OcdraError, ValueError):
    """Instance file failed validation; ``arrival`` is the offending index if known."""

    def __init__(self, message, arrival=None):
        if arrival is not None:
            message = f"arrival {arrival}: {message}"
        super().__init__(message)
        self.arrival = arrival
