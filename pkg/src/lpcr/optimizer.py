"""Minimization of the profile objective over lower-echelon loadings.

The free entries of L (on or below the diagonal) are optimized with a
limited-memory BFGS direction and a halving backtracking line search.
The upper triangle stays at zero. Signs are fixed afterwards by
canonicalization, which leaves the objective unchanged.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateLikelihoodError,
    DivergenceError,
    ExistenceViolationError,
    InvalidParameterError,
)
from .likelihood import VARIANTS, ProfileEval, profile_objective, profile_value_and_gradient
from .model import Dataset, EchelonLoadings, echelon_canonicalize, free_mask

log = logging.getLogger(__name__)

ARMIJO = 1e-4
EIG_FLOOR = 1e-8
DIVERGENCE_STREAK = 100
DIVERGENCE_GROWTH = 1e3
STEP_PATIENCE = 3


@dataclass(frozen=True)
class OptimConfig:
    max_iterations: int = 2000
    gradient_tolerance: float = 1e-7
    step_tolerance: float = 1e-10
    restarts: int = 3
    seed: int = 0
    objective_variant: str = "full-profile"
    memory: int = 10

    def __post_init__(self):
        if self.gradient_tolerance <= 0 or self.step_tolerance <= 0:
            raise InvalidParameterError("tolerances must be positive")
        if self.restarts < 1:
            raise InvalidParameterError("restarts must be >= 1")
        if self.max_iterations < 1 or self.memory < 1:
            raise InvalidParameterError("max_iterations and memory must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise InvalidParameterError("seed must be an unsigned 64-bit integer")
        if self.objective_variant not in VARIANTS:
            raise InvalidParameterError(f"objective_variant must be one of {VARIANTS}")


@dataclass(eq=False)
class FitResult:
    loadings: EchelonLoadings
    eval: ProfileEval
    iterations: int
    converged: bool
    restart_values: list
    grad_norm: float = 0.0
    stop_reason: str = ""
    history: list = field(default_factory=list)


def check_existence(data: Dataset, k: int) -> None:
    """Raise :class:`ExistenceViolationError` unless a likelihood maximizer is guaranteed.

    Requires ``rank(S_X) > k`` (``rank(S_X) == p`` when ``k == p``) and an
    invertible ``Y^T Q_X Y``.
    """
    p = data.p
    if not 0 <= k <= p:
        raise InvalidParameterError(f"k must lie in [0, {p}], got {k}")
    rank = data.x_rank
    if k < p and rank <= k:
        raise ExistenceViolationError(f"rank(S_X) = {rank} is not greater than k = {k}")
    if k == p and rank < p:
        raise ExistenceViolationError(f"rank(S_X) = {rank} < p = {p}; k = p needs full rank")
    coef, *_ = np.linalg.lstsq(data.X, data.Y, rcond=None)
    resid = data.Y - data.X @ coef
    sy = np.linalg.svd(data.Y, compute_uv=False)
    sr = np.linalg.svd(resid, compute_uv=False)
    if sy[0] == 0 or sr[-1] <= 1e-10 * sy[0]:
        raise ExistenceViolationError("Y^T Q_X Y is not invertible")


def tipping_bishop(data: Dataset, k: int):
    """Spiked-covariance MLE of the predictors alone.

    Returns ``(tau0, d, V)`` with ``V`` the top-k eigenvectors of ``S_X``,
    ``tau0`` the mean of the trailing ``p - k`` eigenvalues and
    ``d_j = max(lambda_j / tau0 - 1, 1e-8)``. For ``k == p`` there is no
    trailing block and ``tau0`` is set to half the smallest eigenvalue.
    """
    w, V = data.sx_eigen
    p = data.p
    if k < p:
        tau0 = float(np.mean(w[k:]))
    else:
        tau0 = float(w[-1]) / 2.0
    if not tau0 > 0:
        raise ExistenceViolationError(f"S_X has rank <= k = {k}")
    d = np.maximum(w[:k] / tau0 - 1.0, EIG_FLOOR)
    return tau0, d, V[:, :k]


def init_from_pca(data: Dataset, k: int) -> EchelonLoadings:
    p = data.p
    if not 0 <= k <= p:
        raise InvalidParameterError(f"k must lie in [0, {p}], got {k}")
    rank = data.x_rank
    if (k < p and rank <= k) or (k == p and rank < p):
        raise ExistenceViolationError(f"rank(S_X) = {rank} too small for k = {k}")
    if k == 0:
        return EchelonLoadings.empty(p)
    _, d, V = tipping_bishop(data, k)
    return echelon_canonicalize(V * np.sqrt(d))


def _perturb(L0: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mask = free_mask(*L0.shape)
    counts = mask.sum(axis=0)
    col_rms = np.sqrt(np.sum(L0**2, axis=0) / counts)
    noise = rng.standard_normal(L0.shape) * (0.1 * col_rms)
    return np.where(mask, L0 + noise, 0.0)


def start_rng(seed: int, start_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(start_index,)))


def _lbfgs(L0: np.ndarray, data: Dataset, config: OptimConfig):
    shape = L0.shape
    mask = free_mask(*shape)
    variant = config.objective_variant

    def fg(x):
        L = np.zeros(shape)
        L[mask] = x
        f, G = profile_value_and_gradient(L, data, variant)
        return f, G[mask]

    x = L0[mask].copy()
    f, g = fg(x)
    if not np.isfinite(f):
        raise DivergenceError("objective is not finite at the starting point")
    x0_norm = max(1.0, float(np.linalg.norm(x)))
    mem = deque(maxlen=config.memory)
    history = [f]
    streak = 0
    small_steps = 0
    stop = "max_iterations"
    it = 0
    for it in range(1, config.max_iterations + 1):
        if np.max(np.abs(g)) <= config.gradient_tolerance:
            stop = "gradient"
            it -= 1
            break
        # two-loop recursion
        q = g.copy()
        coeffs = []
        for s, y, rho in reversed(mem):
            a = rho * (s @ q)
            coeffs.append(a)
            q -= a * y
        if mem:
            s, y, _ = mem[-1]
            q *= (s @ y) / (y @ y)
        else:
            q *= min(1.0, 1.0 / np.max(np.abs(g)))
        for (s, y, rho), a in zip(mem, reversed(coeffs)):
            b = rho * (y @ q)
            q += (a - b) * s
        d = -q
        slope = g @ d
        if not slope < 0:
            mem.clear()
            d = -g * min(1.0, 1.0 / np.max(np.abs(g)))
            slope = g @ d
        t = 1.0
        while True:
            x_new = x + t * d
            try:
                f_new, g_new = fg(x_new)
            except DegenerateLikelihoodError:
                f_new = np.inf
            if np.isfinite(f_new) and f_new <= f + ARMIJO * t * slope:
                break
            t *= 0.5
            if t < 1e-16:
                f_new = None
                break
        if f_new is None:
            stop = "line_search"
            it -= 1
            break
        s_vec = x_new - x
        y_vec = g_new - g
        sy = s_vec @ y_vec
        if sy > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            mem.append((s_vec, y_vec, 1.0 / sy))
        grew = np.linalg.norm(x_new) > np.linalg.norm(x)
        streak = streak + 1 if (grew and f_new < f) else 0
        rel_change = abs(f - f_new) / max(1.0, abs(f))
        x, f, g = x_new, f_new, g_new
        history.append(f)
        if streak >= DIVERGENCE_STREAK and np.linalg.norm(x) > DIVERGENCE_GROWTH * x0_norm:
            raise DivergenceError(
                f"objective kept decreasing while ||L|| grew to {np.linalg.norm(x):.3g}; "
                "no finite minimizer"
            )
        small_steps = small_steps + 1 if rel_change <= config.step_tolerance else 0
        if small_steps >= STEP_PATIENCE:
            stop = "step"
            break
    L = np.zeros(shape)
    L[mask] = x
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    return L, f, it, stop, gnorm, history


def minimize_profile(data: Dataset, k: int, config: OptimConfig = None) -> FitResult:
    """Minimize the profile objective over p x k lower-echelon loadings.

    Starts from the PCA initializer plus ``restarts - 1`` seeded random
    perturbations of it and keeps the start with the smallest final value
    (ties go to the earliest start).
    """
    config = config or OptimConfig()
    check_existence(data, k)
    L_init = init_from_pca(data, k)
    if k == 0:
        ev = profile_objective(L_init, data, config.objective_variant)
        return FitResult(L_init, ev, 0, True, [ev.value], 0.0, "trivial", [ev.value])

    starts = [L_init.L.copy()]
    for i in range(1, config.restarts):
        starts.append(_perturb(L_init.L, start_rng(config.seed, i)))

    best = None
    values = []
    for i, L0 in enumerate(starts):
        try:
            res = _lbfgs(L0, data, config)
        except DegenerateLikelihoodError as exc:
            if i == 0:
                raise
            log.debug("start %d failed: %s", i, exc)
            values.append(float("inf"))
            continue
        values.append(res[1])
        if best is None or res[1] < best[1]:
            best = res
    L, f, iters, stop, gnorm, history = best
    loadings = echelon_canonicalize(L, strict=False)
    ev = profile_objective(loadings, data, config.objective_variant)
    converged = stop in ("gradient", "step")
    if not converged:
        log.warning("optimizer stopped without converging (%s, max|grad|=%.3g)", stop, gnorm)
    return FitResult(loadings, ev, iters, converged, values, gnorm, stop, history)
