"""Likelihood-based principal components regression."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    DegenerateLikelihoodError,
    DegenerateLoadingsError,
    DivergenceError,
    ExistenceViolationError,
    InvalidParameterError,
    LpcrError,
)
from .model import Dataset, EchelonLoadings, PcrParams, SpikedCovariance  # noqa: E402
from .optimizer import OptimConfig, minimize_profile  # noqa: E402
from .estimators import (  # noqa: E402
    PcrFit,
    fit_classical_pcr,
    fit_lpcr,
    fit_ols,
    fit_pls_krylov,
    param_count,
    predict,
    select_k_ic,
    select_k_loocv,
)
