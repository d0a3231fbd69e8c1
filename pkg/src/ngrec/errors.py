"""Exception hierarchy.

Errors split into three families that the command line maps onto exit codes:
input validation (2), property failures (1) and numeric divergence (3).
"""


class NGRecError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(NGRecError):
    """Bad input data. ``location`` names the expression id or byte offset."""

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)


class MalformedDocument(ValidationError):
    pass


class SchemaViolation(ValidationError):
    pass


class InvariantViolation(ValidationError):
    pass


class DuplicatePrediction(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class TooManyObjects(ValidationError):
    pass


class IoFailure(NGRecError):
    pass


class EmptyDataset(NGRecError):
    pass


class EmptyTally(NGRecError):
    pass


class NoNegativeSamples(NGRecError):
    pass


class LengthMismatch(NGRecError):
    pass


class InstanceLimitExceeded(NGRecError):
    pass


class ShapeMismatch(NGRecError):
    def __init__(self, op, *shapes):
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class BinOutOfRange(NGRecError):
    pass


class DivergenceDetected(NGRecError):
    pass
