"""Exception hierarchy.

``ValidationError`` subclasses signal bad inputs (CLI exit code 2),
``NumericalError`` subclasses signal numerical breakdown (exit code 3).
"""


class PFAError(Exception):
    pass


class ValidationError(PFAError):
    pass


class NumericalError(PFAError):
    pass


class IoError(PFAError):
    pass


class MissingFile(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class UnsupportedDtype(ValidationError):
    pass


class DuplicateLayerId(ValidationError):
    pass


class NonFiniteTensor(ValidationError):
    pass


class FormatError(ValidationError):
    pass


class InvalidShape(ValidationError):
    pass


class InvalidInput(ValidationError):
    pass


class DegenerateSpectrum(ValidationError):
    pass


class GammaOutOfRange(ValidationError):
    pass


class TauOutOfRange(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class InfeasibleBudget(ValidationError):
    pass


class LayerMismatch(ValidationError):
    pass


class InvalidCount(ValidationError):
    pass


class TooFewSamples(ValidationError):
    pass


class MissingIndices(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class InvalidParams(ValidationError):
    pass


class NumericalFailure(NumericalError):
    pass


class DivergedLoss(NumericalError):
    pass
