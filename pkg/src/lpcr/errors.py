"""Exception hierarchy shared by the whole package."""


class LpcrError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(LpcrError, ValueError):
    """A parameter is outside its admissible range (e.g. non-positive tau)."""


class DimensionMismatchError(LpcrError, ValueError):
    pass


class DegenerateLoadingsError(LpcrError):
    """Loadings are rank deficient where full column rank is required."""


class DegenerateLikelihoodError(LpcrError):
    """The residual Gram matrix Y^T Q Y is singular, so the likelihood is unbounded."""


class ExistenceViolationError(LpcrError):
    """Sufficient conditions for a maximizer of the likelihood do not hold.

    Raised when S_X has rank at most k (for k < p) or when Y^T Q_X Y is
    singular.
    """


class DivergenceError(LpcrError):
    """The optimizer ran off to infinity, i.e. no finite minimizer was found."""


class UnsupportedConfigurationError(LpcrError, ValueError):
    pass


class ConstantColumnError(LpcrError, ValueError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"predictor column {column!r} has zero standard deviation in the training rows")


class CsvFormatError(LpcrError, ValueError):
    pass
