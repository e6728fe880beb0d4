"""Exception types raised across the package."""


class NumgameError(Exception):
    """Base class for all package errors."""


class InvalidNumerosity(NumgameError, ValueError):
    pass


class InfeasibleConstraint(NumgameError):
    """Dot placement could not satisfy the area / radius / spacing constraints."""

    def __init__(self, message, numerosity=None):
        super().__init__(message)
        self.numerosity = numerosity


class NonScalarRoot(NumgameError, ValueError):
    pass


class NonFiniteValue(NumgameError, FloatingPointError):
    def __init__(self, message, op=None):
        super().__init__(message)
        self.op = op


class ShapeMismatch(NumgameError, ValueError):
    pass


class EmptyCandidates(NumgameError, ValueError):
    pass


class InsufficientClasses(NumgameError, ValueError):
    pass


class InsufficientInstances(NumgameError, ValueError):
    pass


class DivergenceDetected(NumgameError):
    """Training loss became non-finite. ``checkpoint`` holds the last good state."""

    def __init__(self, message, checkpoint=None, epoch=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch


class EmptySelection(NumgameError, ValueError):
    pass


class EmptyTable(NumgameError, ValueError):
    pass


class TooFewSketches(NumgameError, ValueError):
    pass


class MissingClass(NumgameError, KeyError):
    pass


class WrongChannel(NumgameError, ValueError):
    pass


class MissingTranscript(NumgameError, KeyError):
    pass


class UnknownPreset(NumgameError, KeyError):
    pass


class MissingMetrics(NumgameError, FileNotFoundError):
    pass
