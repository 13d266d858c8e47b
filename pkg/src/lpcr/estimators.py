"""User-facing estimators, model-order selection and prediction."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DegenerateLikelihoodError,
    DimensionMismatchError,
    DivergenceError,
    ExistenceViolationError,
    InvalidParameterError,
    LpcrError,
    UnsupportedConfigurationError,
)
from .likelihood import neg_loglik_params, profile_params
from .model import Dataset, PcrParams, Preprocessing, SpikedCovariance, echelon_canonicalize
from .optimizer import FitResult, OptimConfig, minimize_profile, tipping_bishop

log = logging.getLogger(__name__)

METHODS = ("lpcr", "classical_pcr", "ols", "pls")


@dataclass(eq=False)
class PcrFit:
    params: PcrParams
    k: int
    neg_loglik: float
    param_count: int
    ic_aic: float
    ic_bic: float
    method_tag: str
    n: int
    fit_result: Optional[FitResult] = None
    preprocessing: Optional[Preprocessing] = None

    @property
    def beta(self) -> np.ndarray:
        return self.params.beta

    def ic(self, criterion: str) -> float:
        return {"aic": self.ic_aic, "bic": self.ic_bic}[criterion]


@dataclass(eq=False)
class SelectionReport:
    criterion: str
    table: list
    chosen_k: int
    failed: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)

    @property
    def chosen_fit(self):
        return self.fits.get(self.chosen_k)


def param_count(p: int, r: int, k: int) -> int:
    """Number of free parameters of the model with k components.

    ``r(r+1)/2 + k[r + 1 + p - (k+1)/2] + 1`` for ``k < p`` and
    ``r(r+1)/2 + rk + p(p+1)/2`` for ``k == p``; integer arithmetic throughout.
    """
    if p < 1 or r < 1 or not 0 <= k <= p:
        raise InvalidParameterError(f"need p >= 1, r >= 1 and 0 <= k <= p; got p={p}, r={r}, k={k}")
    base = r * (r + 1) // 2
    if k < p:
        return base + k * (r + 1 + p) - k * (k + 1) // 2 + 1
    return base + r * k + p * (p + 1) // 2


def _finish(params: PcrParams, k: int, data: Dataset, tag: str, fit_result=None) -> PcrFit:
    n = data.n
    d = param_count(data.p, data.r, k)
    if params.SigmaX is None:
        nll = math.inf
    else:
        try:
            nll = n * neg_loglik_params(params, data)
        except LpcrError:
            nll = math.inf
    return PcrFit(
        params=params,
        k=k,
        neg_loglik=nll,
        param_count=d,
        ic_aic=nll + 2 * d,
        ic_bic=nll + math.log(n) * d,
        method_tag=tag,
        n=n,
        fit_result=fit_result,
        preprocessing=data.preprocessing,
    )


def _residual_cov(data: Dataset, beta: np.ndarray) -> np.ndarray:
    R = data.Y - data.X @ beta
    S = R.T @ R / data.n
    return 0.5 * (S + S.T)


def _spiked_stage(data: Dataset, k: int) -> Optional[SpikedCovariance]:
    """Predictor-only spiked MLE, or None when S_X is too rank deficient."""
    try:
        tau0, d, V = tipping_bishop(data, k)
    except ExistenceViolationError:
        return None
    if k == 0:
        return SpikedCovariance(tau0, echelon_canonicalize(np.zeros((data.p, 0))))
    return SpikedCovariance(tau0, echelon_canonicalize(V * np.sqrt(d), strict=False))


def fit_lpcr(data: Dataset, k: int, config: OptimConfig = None) -> PcrFit:
    """Joint-likelihood PCR with k components."""
    config = config or OptimConfig()
    res = minimize_profile(data, k, config)
    params = profile_params(res.loadings, data, res.eval)
    return _finish(params, k, data, "lpcr", res)


def fit_classical_pcr(data: Dataset, k: int) -> PcrFit:
    """Least squares of Y on the first k principal components of X."""
    if not 0 <= k <= data.p:
        raise InvalidParameterError(f"k must lie in [0, {data.p}]")
    if data.x_rank < k:
        raise ExistenceViolationError(f"rank(S_X) = {data.x_rank} < k = {k}")
    _, V = data.sx_eigen
    U = V[:, :k]
    Z = data.X @ U
    gamma, *_ = np.linalg.lstsq(Z, data.Y, rcond=None)
    beta = U @ gamma
    params = PcrParams(beta=beta, Sigma=_residual_cov(data, beta), SigmaX=_spiked_stage(data, k), alpha=gamma)
    return _finish(params, k, data, "classical_pcr")


def fit_ols(data: Dataset) -> PcrFit:
    """``beta = S_X^+ S_XY``; reported with ``k = p``."""
    beta = np.linalg.pinv(data.S_X) @ data.S_XY
    SigmaX = _spiked_stage(data, data.p) if data.x_rank == data.p else None
    params = PcrParams(beta=beta, Sigma=_residual_cov(data, beta), SigmaX=SigmaX, alpha=None)
    return _finish(params, data.p, data, "ols")


def krylov_basis(S: np.ndarray, s: np.ndarray, k: int, rtol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of span{s, S s, ..., S^{k-1} s} built by Arnoldi iteration.

    Stops early (with fewer columns) once the space stops growing numerically.
    """
    s = np.asarray(s, dtype=float).ravel()
    p = s.shape[0]
    scale = max(np.linalg.norm(S, 2), 1e-300)
    cols = []
    v = s
    norm0 = np.linalg.norm(v)
    if norm0 == 0:
        return np.zeros((p, 0))
    w = v / norm0
    for j in range(k):
        if j > 0:
            w = S @ cols[-1]
            for _ in range(2):
                Q = np.column_stack(cols)
                w = w - Q @ (Q.T @ w)
            nw = np.linalg.norm(w)
            if nw <= rtol * scale:
                break
            w = w / nw
        cols.append(w)
    return np.column_stack(cols)


def _pls_beta(S: np.ndarray, s: np.ndarray, Q: np.ndarray) -> np.ndarray:
    if Q.shape[1] == 0:
        return np.zeros((S.shape[0], 1))
    A = Q.T @ S @ Q
    return Q @ (np.linalg.pinv(0.5 * (A + A.T)) @ (Q.T @ s.reshape(-1, 1)))


def fit_pls_krylov(data: Dataset, k: int) -> PcrFit:
    """PLS with a univariate response via the sample Krylov space."""
    if data.r != 1:
        raise UnsupportedConfigurationError("Krylov PLS is only available for r = 1")
    if not 1 <= k <= data.p:
        raise InvalidParameterError(f"k must lie in [1, {data.p}]")
    Q = krylov_basis(data.S_X, data.S_XY, k)
    if Q.shape[1] < k:
        warnings.warn(f"Krylov matrix has numerical rank {Q.shape[1]} < k = {k}; using the reduced space")
    beta = _pls_beta(data.S_X, data.S_XY, Q)
    params = PcrParams(beta=beta, Sigma=_residual_cov(data, beta), SigmaX=_spiked_stage(data, k), alpha=None)
    return _finish(params, k, data, "pls")


def max_ic_k(data: Dataset) -> int:
    """Largest k for which a likelihood maximizer is guaranteed to exist."""
    return data.p if data.x_rank == data.p else max(data.x_rank - 1, 0)


def ic_scan(data: Dataset, k_max: int = None, config: OptimConfig = None):
    """Fit lpcr for k = 0..k_max. Returns ``(fits, failed)``; a failed k maps to None."""
    config = config or OptimConfig()
    if k_max is None:
        k_max = max_ic_k(data)
    if k_max < 0 or k_max > max_ic_k(data):
        raise InvalidParameterError(
            f"k_max = {k_max} exceeds rank(S_X) - 1 = {data.x_rank - 1} (k = p needs full rank)"
        )
    fits, failed = {}, []
    for k in range(k_max + 1):
        try:
            fits[k] = fit_lpcr(data, k, config)
        except (ExistenceViolationError, DivergenceError, DegenerateLikelihoodError) as exc:
            log.info("lpcr fit failed for k=%d: %s", k, exc)
            fits[k] = None
            failed.append(k)
    return fits, failed


def _argmin_smallest(table):
    best_k, best = None, math.inf
    for k, score in table:
        if score < best:
            best_k, best = k, score
    if best_k is None:
        raise LpcrError("every candidate k failed")
    return best_k


def report_from_scan(fits: dict, failed: list, criterion: str) -> SelectionReport:
    if criterion not in ("aic", "bic"):
        raise InvalidParameterError(f"unknown criterion {criterion!r}")
    table = [(k, fit.ic(criterion) if fit is not None else math.inf) for k, fit in sorted(fits.items())]
    return SelectionReport(criterion, table, _argmin_smallest(table), list(failed), dict(fits))


def select_k_ic(data: Dataset, criterion: str = "bic", k_max: int = None, config: OptimConfig = None) -> SelectionReport:
    """Pick k minimizing ``n g_n + rho d(k)`` (rho = 2 for AIC, log n for BIC)."""
    if criterion not in ("aic", "bic"):
        raise InvalidParameterError(f"unknown criterion {criterion!r}")
    fits, failed = ic_scan(data, k_max, config)
    return report_from_scan(fits, failed, criterion)


def _loo_betas_pcr(X: np.ndarray, Y: np.ndarray, k_max: int):
    """Coefficients of classical PCR for k = 0..k_max on already-centered data."""
    n = X.shape[0]
    w, V = np.linalg.eigh(X.T @ X / n)
    w, V = w[::-1], V[:, ::-1]
    tol = max(X.shape) * np.finfo(float).eps * max(w[0], 0.0)
    proj = V.T @ (X.T @ Y / n)
    acc = np.zeros((X.shape[1], Y.shape[1]))
    betas = [acc]
    for j in range(k_max):
        # a component with zero variance cannot be regressed on; neither can any later one
        if betas[-1] is None or w[j] <= tol:
            betas.append(None)
            continue
        acc = acc + np.outer(V[:, j], proj[j] / w[j])
        betas.append(acc)
    return betas


def _loo_betas_pls(X: np.ndarray, Y: np.ndarray, k_max: int):
    n = X.shape[0]
    S = X.T @ X / n
    s = X.T @ Y[:, 0] / n
    Q = krylov_basis(S, s, k_max)
    betas = [np.zeros((X.shape[1], 1))]
    for k in range(1, k_max + 1):
        betas.append(_pls_beta(S, s, Q[:, :k]) if k <= Q.shape[1] else None)
    return betas


def select_k_loocv(data: Dataset, method: str = "classical_pcr", k_max: int = None) -> SelectionReport:
    """Leave-one-out cross-validation over k = 0..k_max.

    Each fold re-centers its n - 1 training rows, refits, and predicts the
    held-out row. The score is the mean squared error over held-out rows and
    response columns. k = 0 predicts the training response mean.
    """
    if method not in ("classical_pcr", "pls"):
        raise InvalidParameterError(f"LOOCV supports classical_pcr and pls, not {method!r}")
    if method == "pls" and data.r != 1:
        raise UnsupportedConfigurationError("Krylov PLS is only available for r = 1")
    n, p = data.n, data.p
    if n < 3:
        raise InvalidParameterError("LOOCV needs at least 3 rows")
    if k_max is None:
        k_max = min(p, n - 2)
    if not 0 <= k_max <= min(p, n - 2):
        raise InvalidParameterError(f"k_max must lie in [0, min(p, n - 2)] = [0, {min(p, n - 2)}]")
    sse = np.zeros(k_max + 1)
    bad = np.zeros(k_max + 1, dtype=bool)
    fold_betas = _loo_betas_pcr if method == "classical_pcr" else _loo_betas_pls
    idx = np.arange(n)
    for i in range(n):
        tr = idx != i
        Xt, Yt = data.X[tr], data.Y[tr]
        xm, ym = Xt.mean(axis=0), Yt.mean(axis=0)
        betas = fold_betas(Xt - xm, Yt - ym, k_max)
        x_out = data.X[i] - xm
        y_out = data.Y[i] - ym
        for k, b in enumerate(betas):
            if b is None:
                bad[k] = True
                continue
            err = y_out - x_out @ b
            sse[k] += float(err @ err)
    scores = sse / (n * data.r)
    scores[bad] = math.inf
    table = [(k, float(scores[k])) for k in range(k_max + 1)]
    failed = [k for k in range(k_max + 1) if bad[k]]
    return SelectionReport("loocv", table, _argmin_smallest(table), failed)


def predict(fit: PcrFit, X_new, preprocessing: Preprocessing = None) -> np.ndarray:
    """Predict responses for raw predictor rows.

    Training centering and scaling are applied to ``X_new`` and the training
    response means are added back. Without preprocessing metadata the rows are
    used as given.
    """
    pre = preprocessing if preprocessing is not None else fit.preprocessing
    X_new = np.asarray(X_new, dtype=float)
    if X_new.ndim == 1:
        X_new = X_new[None, :]
    beta = fit.params.beta
    if pre is not None:
        return pre.transform_x(X_new) @ beta + pre.y_mean
    if X_new.shape[1] != beta.shape[0]:
        raise DimensionMismatchError(f"expected {beta.shape[0]} predictor columns, got {X_new.shape[1]}")
    return X_new @ beta
