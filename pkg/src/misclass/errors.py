"""Exception and warning types raised across the package."""


class MisclassError(Exception):
    """Base class for all errors raised by misclass."""


class RowNotStochastic(MisclassError):
    pass


class OutOfRange(MisclassError):
    pass


class NotSupported(MisclassError):
    pass


class DimensionMismatch(MisclassError):
    pass


class MissingStratum(MisclassError):
    pass


class EmptyCell(MisclassError):
    pass


class InvalidDataset(MisclassError):
    pass


class NonFiniteInput(MisclassError):
    pass


class SingularSystem(MisclassError):
    pass


class NotConverged(MisclassError):
    pass


class HessianNotPD(MisclassError):
    pass


class SeparationSuspected(MisclassError):
    pass


class ZeroDenominator(MisclassError):
    """The observed covariate value has zero probability under the model."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class AllWeightsDegenerate(MisclassError):
    pass


class TooManyFailedFits(MisclassError):
    pass


class InvalidSensSpec(MisclassError):
    """Sensitivity + specificity <= 1: the adjusted link is not identifiable."""


class TooLarge(MisclassError):
    pass


class SpecMismatch(MisclassError):
    pass


class ConfigError(MisclassError):
    pass


class ParseError(MisclassError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class MissingColumn(MisclassError):
    def __init__(self, column):
        super().__init__(f"missing column {column!r}")
        self.column = column


class LowESSWarning(UserWarning):
    pass


class InstabilityWarning(UserWarning):
    """Ridge fallback engaged while fitting an adjusted-link model."""


class GridPointDroppedWarning(UserWarning):
    pass
