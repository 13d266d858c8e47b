"""Domain types for the spiked-covariance PCR model.

The predictor covariance is ``tau * (I_p + L L^T)`` where ``L`` is a p x k
lower-echelon matrix (entry ``(i, j)`` is zero whenever ``j > i``). The
regression coefficient is ``beta = L @ alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import (
    DegenerateLoadingsError,
    DimensionMismatchError,
    InvalidParameterError,
)


@dataclass(frozen=True, eq=False)
class Preprocessing:
    """Training-set statistics used to center responses and center/scale predictors."""

    y_mean: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray

    def transform_x(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.x_mean.shape[0]:
            raise DimensionMismatchError(
                f"expected {self.x_mean.shape[0]} predictor columns, got array of shape {X.shape}"
            )
        return (X - self.x_mean) / self.x_std

    def transform_y(self, Y):
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        return Y - self.y_mean

    def to_dict(self):
        return {
            "y_mean": self.y_mean.tolist(),
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            y_mean=np.asarray(d["y_mean"], dtype=float),
            x_mean=np.asarray(d["x_mean"], dtype=float),
            x_std=np.asarray(d["x_std"], dtype=float),
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Response matrix ``Y`` (n x r) and predictor matrix ``X`` (n x p).

    Sufficient statistics (``X^T X`` etc.) are computed lazily and cached.
    """

    Y: np.ndarray
    X: np.ndarray
    preprocessing: Optional[Preprocessing] = None

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.ndim == 1:
            X = X[:, None]
        if Y.ndim != 2 or X.ndim != 2:
            raise DimensionMismatchError("Y and X must be 2-dimensional")
        if Y.shape[0] != X.shape[0]:
            raise DimensionMismatchError(f"Y has {Y.shape[0]} rows but X has {X.shape[0]}")
        if Y.shape[0] < 1 or Y.shape[1] < 1 or X.shape[1] < 1:
            raise DimensionMismatchError("n, p and r must all be positive")
        Y.setflags(write=False)
        X.setflags(write=False)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def r(self) -> int:
        return self.Y.shape[1]

    @cached_property
    def XtX(self) -> np.ndarray:
        C = self.X.T @ self.X
        return 0.5 * (C + C.T)

    @cached_property
    def XtY(self) -> np.ndarray:
        return self.X.T @ self.Y

    @cached_property
    def YtY(self) -> np.ndarray:
        G = self.Y.T @ self.Y
        return 0.5 * (G + G.T)

    @property
    def S_X(self) -> np.ndarray:
        return self.XtX / self.n

    @property
    def S_XY(self) -> np.ndarray:
        return self.XtY / self.n

    @cached_property
    def sx_eigen(self):
        """Eigenpairs of ``S_X`` in descending order."""
        w, V = np.linalg.eigh(self.S_X)
        return w[::-1].copy(), V[:, ::-1].copy()

    @cached_property
    def x_rank(self) -> int:
        return int(np.linalg.matrix_rank(self.X))

    def subset(self, rows) -> "Dataset":
        return Dataset(self.Y[rows], self.X[rows], self.preprocessing)


def _check_echelon(L: np.ndarray) -> None:
    p, k = L.shape
    if k > p:
        raise InvalidParameterError(f"k={k} exceeds p={p}")
    if np.any(np.triu(L, 1) != 0):
        raise InvalidParameterError("loadings have nonzero entries above the diagonal")


@dataclass(frozen=True, eq=False)
class EchelonLoadings:
    """A p x k lower-echelon matrix. ``L[i, j] == 0`` exactly for ``j > i``."""

    L: np.ndarray

    def __post_init__(self):
        L = np.array(self.L, dtype=float)
        if L.ndim != 2:
            raise InvalidParameterError("loadings must be a 2-D array")
        _check_echelon(L)
        L.setflags(write=False)
        object.__setattr__(self, "L", L)

    @classmethod
    def empty(cls, p: int) -> "EchelonLoadings":
        return cls(np.zeros((p, 0)))

    @property
    def p(self) -> int:
        return self.L.shape[0]

    @property
    def k(self) -> int:
        return self.L.shape[1]

    def is_canonical(self) -> bool:
        d = np.diagonal(self.L)
        return bool(np.all(d >= 0))


def free_mask(p: int, k: int) -> np.ndarray:
    """Boolean mask of the free (lower-echelon) entries of a p x k matrix."""
    return np.tril(np.ones((p, k), dtype=bool))


@dataclass(frozen=True, eq=False)
class SpikedCovariance:
    tau: float
    loadings: EchelonLoadings

    def __post_init__(self):
        if not (self.tau > 0 and np.isfinite(self.tau)):
            raise InvalidParameterError(f"tau must be positive, got {self.tau}")

    @property
    def p(self) -> int:
        return self.loadings.p

    @cached_property
    def matrix(self) -> np.ndarray:
        return spiked_cov_assemble(self.tau, self.loadings)


@dataclass(frozen=True, eq=False)
class PcrParams:
    """Fitted or true parameters ``(beta, Sigma, Sigma_X)`` with ``beta = L @ alpha``."""

    beta: np.ndarray
    Sigma: np.ndarray
    SigmaX: SpikedCovariance
    alpha: np.ndarray = field(default=None)

    @property
    def gamma(self) -> np.ndarray:
        """Coefficients on the eigenvector basis: ``beta = U @ gamma``."""
        U, _, _ = spiked_eigen(self.SigmaX)
        return U.T @ self.beta


def spiked_cov_assemble(tau: float, L: EchelonLoadings) -> np.ndarray:
    """Return ``tau * (I_p + L L^T)``, symmetrized."""
    if not (tau > 0 and np.isfinite(tau)):
        raise InvalidParameterError(f"tau must be positive, got {tau}")
    Lm = L.L if isinstance(L, EchelonLoadings) else np.asarray(L, dtype=float)
    p = Lm.shape[0]
    S = tau * (np.eye(p) + Lm @ Lm.T)
    return 0.5 * (S + S.T)


def spiked_eigen(cov: SpikedCovariance):
    """Decompose a spiked covariance into ``(U, D, tau)``.

    ``U`` holds the left singular vectors of ``L`` and ``D`` the squared
    singular values, so that ``tau * (I + U diag(D) U^T)`` reproduces the
    assembled matrix.
    """
    L = cov.loadings.L
    p, k = L.shape
    if k == 0:
        return np.zeros((p, 0)), np.zeros(0), cov.tau
    U, s, _ = np.linalg.svd(L, full_matrices=False)
    return U, s**2, cov.tau


def echelon_canonicalize(M, *, strict: bool = True) -> EchelonLoadings:
    """Map ``M`` (p x k) to the lower-echelon ``L`` with ``L L^T == M M^T``.

    Uses a QR factorization of ``M^T`` so that ``M = L O`` with ``O``
    orthogonal, then flips column signs so the diagonal is nonnegative.
    A column whose diagonal entry is exactly zero is left as is.

    With ``strict=True`` a rank-deficient ``M`` raises
    :class:`DegenerateLoadingsError`.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise InvalidParameterError("M must be 2-D")
    p, k = M.shape
    if k > p:
        raise InvalidParameterError(f"k={k} exceeds p={p}")
    if k == 0:
        return EchelonLoadings.empty(p)
    if strict and np.linalg.matrix_rank(M) < k:
        raise DegenerateLoadingsError(f"loadings have rank below k={k}")
    # M^T = Q R  =>  M = R^T Q^T, R^T lower trapezoidal
    _, R = np.linalg.qr(M.T, mode="reduced")
    L = R.T.copy()
    signs = np.sign(np.diagonal(L)).copy()
    signs[signs == 0] = 1.0
    L *= signs
    L[np.triu_indices(p, 1, k)] = 0.0
    return EchelonLoadings(L)
