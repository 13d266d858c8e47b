"""Objective functions: the joint negative log-likelihood and its profile in L.

Two variants of the profile objective are available:

``"full-profile"``
    ``log|Y^T Q_{XL} Y| + p log tr[X^T X (I + LL^T)^{-1}] + log|I + LL^T|``,
    i.e. the reparameterized negative log-likelihood with ``Sigma``, ``alpha``
    and ``tau`` minimized out (up to additive constants). This is what the
    fitter minimizes by default.

``"as-displayed"``
    The same without the ``log|I + LL^T|`` term. Without that term the
    objective keeps decreasing as ``||L||`` grows, so it has no finite
    minimizer in general; it is kept for comparison only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import DegenerateLikelihoodError, DimensionMismatchError, InvalidParameterError
from .model import Dataset, EchelonLoadings, PcrParams, SpikedCovariance, free_mask

ObjectiveVariant = Literal["full-profile", "as-displayed"]
VARIANTS = ("full-profile", "as-displayed")

PINV_RTOL = 1e-12
# Cholesky pivots of Y^T Q_XL Y below this fraction of tr(Y^T Y) count as singular
SINGULAR_RTOL = 1e-13


def _logdet_pd(A, err=InvalidParameterError, what="matrix"):
    try:
        c = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise err(f"{what} is not positive definite") from None
    return 2.0 * float(np.sum(np.log(np.diagonal(c))))


def _as_matrix(L) -> np.ndarray:
    return L.L if isinstance(L, EchelonLoadings) else np.asarray(L, dtype=float)


def neg_loglik_g(beta, Omega, OmegaX, data: Dataset) -> float:
    """Scaled negative log-likelihood in precision form.

    ``-log|Omega| + tr[(Y - X beta)^T (Y - X beta) Omega] / n
    - log|Omega_X| + tr(S_X Omega_X)``
    """
    beta = np.asarray(beta, dtype=float)
    if beta.ndim == 1:
        beta = beta[:, None]
    Omega = np.atleast_2d(np.asarray(Omega, dtype=float))
    OmegaX = np.atleast_2d(np.asarray(OmegaX, dtype=float))
    n, p, r = data.n, data.p, data.r
    if beta.shape != (p, r) or Omega.shape != (r, r) or OmegaX.shape != (p, p):
        raise DimensionMismatchError("parameter shapes do not match the data")
    R = data.Y - data.X @ beta
    val = -_logdet_pd(Omega, what="Omega")
    val += float(np.sum((R.T @ R) * Omega)) / n
    val -= _logdet_pd(OmegaX, what="Omega_X")
    val += float(np.sum(data.S_X * OmegaX))
    return val


def neg_loglik_params(params: PcrParams, data: Dataset) -> float:
    """``g_n`` evaluated at covariance-form parameters."""
    try:
        Omega = np.linalg.inv(params.Sigma)
        OmegaX = np.linalg.inv(params.SigmaX.matrix)
    except np.linalg.LinAlgError:
        raise InvalidParameterError("covariance parameter is singular") from None
    return neg_loglik_g(params.beta, Omega, OmegaX, data)


@dataclass(frozen=True, eq=False)
class ProfileEval:
    value: float
    alpha_bar: np.ndarray
    Sigma_bar: np.ndarray
    tau_bar: float
    residual_logdet: float
    trace_term: float
    spike_logdet: float
    variant: str


@dataclass(eq=False)
class _Core:
    """Intermediate quantities shared by the objective and its gradient."""

    L: np.ndarray
    resid: np.ndarray
    S: np.ndarray
    S_chol: np.ndarray
    alpha_bar: np.ndarray
    CL: np.ndarray
    Kinv: np.ndarray
    LtCL: np.ndarray
    residual_logdet: float
    trace_term: float
    spike_logdet: float


def _core(Lm: np.ndarray, data: Dataset) -> _Core:
    p, k = Lm.shape
    if p != data.p:
        raise DimensionMismatchError(f"loadings have {p} rows, data has p={data.p}")
    Y = data.Y
    if k == 0:
        resid = Y
        alpha_bar = np.zeros((0, data.r))
    else:
        XL = data.X @ Lm
        Us, s, Vt = np.linalg.svd(XL, full_matrices=False)
        keep = s > PINV_RTOL * s[0] if s[0] > 0 else np.zeros_like(s, dtype=bool)
        Us, s, Vt = Us[:, keep], s[keep], Vt[keep]
        P = Us.T @ Y
        resid = Y - Us @ P
        # Moore-Penrose solution (L^T X^T X L)^+ L^T X^T Y
        alpha_bar = Vt.T @ (P / s[:, None])
    S = resid.T @ resid
    S = 0.5 * (S + S.T)
    try:
        S_chol = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise DegenerateLikelihoodError("Y^T Q_XL Y is singular") from None
    if np.min(np.diagonal(S_chol)) ** 2 <= SINGULAR_RTOL * float(np.trace(data.YtY)):
        raise DegenerateLikelihoodError("Y^T Q_XL Y is numerically singular")
    residual_logdet = 2.0 * float(np.sum(np.log(np.diagonal(S_chol))))

    C = data.XtX
    K = np.eye(k) + Lm.T @ Lm
    K_chol = np.linalg.cholesky(K)
    spike_logdet = 2.0 * float(np.sum(np.log(np.diagonal(K_chol))))
    Kinv = np.linalg.inv(K)
    Kinv = 0.5 * (Kinv + Kinv.T)
    CL = C @ Lm
    LtCL = Lm.T @ CL
    # Woodbury: (I + LL^T)^{-1} = I - L K^{-1} L^T
    trace_term = float(np.trace(C) - np.sum(Kinv * LtCL))
    if not trace_term > 0:
        raise DegenerateLikelihoodError("tr[X^T X (I + LL^T)^{-1}] is not positive")
    return _Core(
        L=Lm, resid=resid, S=S, S_chol=S_chol, alpha_bar=alpha_bar, CL=CL, Kinv=Kinv,
        LtCL=LtCL, residual_logdet=residual_logdet, trace_term=trace_term,
        spike_logdet=spike_logdet,
    )


def _check_variant(variant):
    if variant not in VARIANTS:
        raise InvalidParameterError(f"unknown objective variant {variant!r}; expected one of {VARIANTS}")


def _value(c: _Core, p: int, variant) -> float:
    v = c.residual_logdet + p * np.log(c.trace_term)
    if variant == "full-profile":
        v += c.spike_logdet
    return float(v)


def partial_minimizers(L, data: Dataset):
    """Closed-form minimizers ``(alpha_bar, Sigma_bar, tau_bar)`` at fixed L."""
    c = _core(_as_matrix(L), data)
    return c.alpha_bar, c.S / data.n, c.trace_term / (data.n * data.p)


def profile_objective(L, data: Dataset, variant: ObjectiveVariant = "full-profile") -> ProfileEval:
    _check_variant(variant)
    c = _core(_as_matrix(L), data)
    return ProfileEval(
        value=_value(c, data.p, variant),
        alpha_bar=c.alpha_bar,
        Sigma_bar=c.S / data.n,
        tau_bar=c.trace_term / (data.n * data.p),
        residual_logdet=c.residual_logdet,
        trace_term=c.trace_term,
        spike_logdet=c.spike_logdet,
        variant=variant,
    )


def _grad_blocks(c: _Core, data: Dataset):
    L = c.L
    p = data.p
    # d log|S| = -2 X^T Q_XL Y S^{-1} alpha_bar^T
    XtR = data.X.T @ c.resid
    SinvA = np.linalg.solve(c.S, c.alpha_bar.T)
    g_res = -2.0 * XtR @ SinvA
    # (I + LL^T)^{-1} C (I + LL^T)^{-1} L = C L K^{-1} - L K^{-1} L^T C L K^{-1}
    CLK = c.CL @ c.Kinv
    MCML = CLK - L @ (c.Kinv @ (c.LtCL @ c.Kinv))
    g_logtrace = -2.0 / c.trace_term * MCML
    g_spike = 2.0 * L @ c.Kinv
    return g_res, p * g_logtrace, g_spike


def profile_gradient_blocks(L, data: Dataset):
    """Unmasked gradient blocks of ``log|Y^T Q_XL Y|``, ``p log tr[...]`` and ``log|I + LL^T|``."""
    return _grad_blocks(_core(_as_matrix(L), data), data)


def _masked_sum(blocks, variant, shape):
    g_res, g_tr, g_spike = blocks
    g = g_res + g_tr
    if variant == "full-profile":
        g = g + g_spike
    return np.where(free_mask(*shape), g, 0.0)


def profile_gradient(L, data: Dataset, variant: ObjectiveVariant = "full-profile") -> np.ndarray:
    """Gradient of the profile objective, zeroed above the diagonal."""
    _check_variant(variant)
    Lm = _as_matrix(L)
    c = _core(Lm, data)
    return _masked_sum(_grad_blocks(c, data), variant, Lm.shape)


def profile_value_and_gradient(Lm: np.ndarray, data: Dataset, variant: ObjectiveVariant = "full-profile"):
    c = _core(Lm, data)
    return _value(c, data.p, variant), _masked_sum(_grad_blocks(c, data), variant, Lm.shape)


def profile_params(loadings: EchelonLoadings, data: Dataset, ev: ProfileEval = None) -> PcrParams:
    """Assemble ``(beta, Sigma, Sigma_X)`` from L and its partial minimizers."""
    if ev is None:
        ev = profile_objective(loadings, data)
    beta = loadings.L @ ev.alpha_bar if loadings.k else np.zeros((data.p, data.r))
    return PcrParams(
        beta=beta,
        Sigma=ev.Sigma_bar,
        SigmaX=SpikedCovariance(ev.tau_bar, loadings),
        alpha=ev.alpha_bar,
    )
