"""Monte Carlo harness: ground truth, data generation, metrics and experiments.

Every replication draws from its own random stream derived from
``(seed, axis index, replication index)``, so results do not depend on the
order or concurrency in which replications run.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatchError, InvalidParameterError, LpcrError
from .estimators import (
    fit_classical_pcr,
    fit_ols,
    fit_pls_krylov,
    ic_scan,
    max_ic_k,
    report_from_scan,
    select_k_loocv,
)
from .model import Dataset
from .optimizer import OptimConfig

log = logging.getLogger(__name__)

AXES = ("coef_norm", "d_star", "p", "k", "n")
METRICS = ("est_rmse", "pred_rmse", "rel_est_rmse", "rel_pred_rmse", "selection_bias")
# (method, selector) pairs the harness knows how to run
METHOD_SELECTORS = {
    "lpcr": ("aic", "bic"),
    "classical_pcr": ("loocv",),
    "pls": ("loocv",),
    "ols": ("all",),
}


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(np.random.SeedSequence(seed_or_rng))


@dataclass(frozen=True, eq=False)
class TrueParams:
    U_star: np.ndarray
    D_star: np.ndarray
    tau_star: float
    gamma_star: np.ndarray
    beta_star: np.ndarray
    Sigma_star: np.ndarray
    SigmaX_star: np.ndarray
    d_star: float = 0.0

    @property
    def p(self):
        return self.U_star.shape[0]

    @property
    def k(self):
        return self.U_star.shape[1]

    @property
    def r(self):
        return self.Sigma_star.shape[0]


def spike_values(d_star: float, k: int) -> np.ndarray:
    """k equally spaced spike sizes from 1.1 d* down to 0.9 d*."""
    if k == 1:
        return np.array([1.1 * d_star])
    return np.linspace(1.1 * d_star, 0.9 * d_star, k)


def haar_semi_orthogonal(p: int, k: int, rng) -> np.ndarray:
    """Uniformly distributed p x k matrix with orthonormal columns."""
    rng = _rng(rng)
    Q, R = np.linalg.qr(rng.standard_normal((p, k)))
    signs = np.sign(np.diagonal(R)).copy()
    signs[signs == 0] = 1.0
    return Q * signs


def gen_true_params(p, k, r, d_star=3.0, tau_star=1.0, coef_norm=2.0, Sigma_star=None, seed=0) -> TrueParams:
    if p < 1 or r < 1 or not 0 <= k <= p:
        raise InvalidParameterError(f"invalid dimensions p={p}, k={k}, r={r}")
    if tau_star <= 0 or d_star < 0 or coef_norm < 0:
        raise InvalidParameterError("tau_star must be positive; d_star and coef_norm nonnegative")
    rng = _rng(seed)
    Sigma_star = 2.0 * np.eye(r) if Sigma_star is None else np.atleast_2d(np.asarray(Sigma_star, dtype=float))
    if Sigma_star.shape != (r, r):
        raise DimensionMismatchError(f"Sigma_star must be {r} x {r}")
    if k == 0:
        U = np.zeros((p, 0))
        D = np.zeros(0)
        gamma = np.zeros((0, r))
    else:
        U = haar_semi_orthogonal(p, k, rng)
        D = spike_values(d_star, k)
        gamma = rng.uniform(-1.0, 1.0, size=(k, r))
        gamma *= coef_norm / np.linalg.norm(gamma, axis=0)
    beta = U @ gamma
    SigmaX = tau_star * (np.eye(p) + (U * D) @ U.T)
    SigmaX = 0.5 * (SigmaX + SigmaX.T)
    return TrueParams(U, D, float(tau_star), gamma, beta, Sigma_star, SigmaX, float(d_star))


def latent_loadings(truth: TrueParams):
    """Latent-variable parameters reproducing ``Sigma_X*`` and ``beta*``.

    ``Gamma_X = diag(sqrt(tau D)) U^T`` and ``tau_V = sqrt(tau)`` give
    ``cov(X_i) = Sigma_X*``; ``Gamma_Y = diag((1 + D) sqrt(tau / D)) gamma`` makes
    the population regression coefficient equal ``beta*``. The response noise
    level ``tau_E`` is the root mean eigenvalue of ``Sigma*``, so the
    conditional response covariance is ``tau_E^2 I + gamma^T diag(tau (1+D)/D) gamma``
    rather than ``Sigma*``.
    """
    tau, D, U = truth.tau_star, truth.D_star, truth.U_star
    if np.any(D <= 0):
        raise InvalidParameterError("latent mode needs positive spike sizes")
    Gamma_X = np.sqrt(tau * D)[:, None] * U.T
    Gamma_Y = ((1.0 + D) * np.sqrt(tau / D))[:, None] * truth.gamma_star
    tau_E = math.sqrt(float(np.trace(truth.Sigma_star)) / truth.r)
    tau_V = math.sqrt(tau)
    return Gamma_Y, Gamma_X, tau_E, tau_V


def gen_latent(n, Gamma_Y, Gamma_X, tau_E, tau_V, rng):
    """``Y = W Gamma_Y + tau_E E`` and ``X = W Gamma_X + tau_V V`` with standard normal W, E, V."""
    rng = _rng(rng)
    Gamma_Y = np.atleast_2d(Gamma_Y)
    Gamma_X = np.atleast_2d(Gamma_X)
    k = Gamma_X.shape[0]
    r, p = Gamma_Y.shape[1], Gamma_X.shape[1]
    W = rng.standard_normal((n, k))
    E = rng.standard_normal((n, r))
    V = rng.standard_normal((n, p))
    return W @ Gamma_Y + tau_E * E, W @ Gamma_X + tau_V * V


def latent_moments(Gamma_Y, Gamma_X, tau_E, tau_V):
    """Population moments of the latent-variable model.

    Returns a dict with ``cov_Y``, ``cov_X``, ``cov_YX`` (r x p), ``coef``
    (p x r, so that ``E(Y_i | X_i) = coef^T X_i``) and ``cond_cov_Y``.
    """
    Gamma_Y = np.atleast_2d(Gamma_Y)
    Gamma_X = np.atleast_2d(Gamma_X)
    k, r = Gamma_Y.shape
    p = Gamma_X.shape[1]
    cov_X = Gamma_X.T @ Gamma_X + tau_V**2 * np.eye(p)
    cov_X_inv = np.linalg.inv(cov_X)
    return {
        "cov_Y": Gamma_Y.T @ Gamma_Y + tau_E**2 * np.eye(r),
        "cov_X": cov_X,
        "cov_YX": Gamma_Y.T @ Gamma_X,
        "coef": (Gamma_Y.T @ Gamma_X @ cov_X_inv).T,
        "cond_cov_Y": tau_E**2 * np.eye(r)
        + Gamma_Y.T @ (np.eye(k) - Gamma_X @ cov_X_inv @ Gamma_X.T) @ Gamma_Y,
    }


def gen_dataset(truth: TrueParams, n: int, seed=0, mode: str = "gaussian") -> Dataset:
    """Draw n observations from the model (rows are not re-centered)."""
    if n < 1:
        raise InvalidParameterError("n must be positive")
    rng = _rng(seed)
    if mode == "gaussian":
        cx = np.linalg.cholesky(truth.SigmaX_star)
        cy = np.linalg.cholesky(truth.Sigma_star)
        X = rng.standard_normal((n, truth.p)) @ cx.T
        Y = X @ truth.beta_star + rng.standard_normal((n, truth.r)) @ cy.T
    elif mode == "latent":
        if truth.k == 0:
            Gy, Gx = np.zeros((0, truth.r)), np.zeros((0, truth.p))
            tau_E = math.sqrt(float(np.trace(truth.Sigma_star)) / truth.r)
            tau_V = math.sqrt(truth.tau_star)
        else:
            Gy, Gx, tau_E, tau_V = latent_loadings(truth)
        Y, X = gen_latent(n, Gy, Gx, tau_E, tau_V, rng)
    else:
        raise InvalidParameterError(f"unknown mode {mode!r}")
    return Dataset(Y, X)


def estimation_rmse(beta_hat, beta_star, r=None, p=None) -> float:
    beta_hat = np.atleast_2d(np.asarray(beta_hat, dtype=float))
    beta_star = np.atleast_2d(np.asarray(beta_star, dtype=float))
    if beta_hat.shape != beta_star.shape:
        raise DimensionMismatchError(f"shapes {beta_hat.shape} and {beta_star.shape} differ")
    p = beta_star.shape[0] if p is None else p
    r = beta_star.shape[1] if r is None else r
    if (p, r) != beta_star.shape:
        raise DimensionMismatchError("r and p do not match the coefficient shape")
    return float(np.linalg.norm(beta_hat - beta_star) / math.sqrt(r * p))


def prediction_rmse(beta_hat, test: Dataset) -> float:
    beta_hat = np.asarray(beta_hat, dtype=float)
    if beta_hat.ndim == 1:
        beta_hat = beta_hat[:, None]
    if beta_hat.shape != (test.p, test.r):
        raise DimensionMismatchError(f"beta has shape {beta_hat.shape}, test data need {(test.p, test.r)}")
    return float(np.linalg.norm(test.X @ beta_hat - test.Y) / math.sqrt(test.r * test.n))


def trace_gap(X, SigmaX_star) -> float:
    """``|tr(S_X - Sigma_X*)|`` with ``S_X = X^T X / n``."""
    X = np.asarray(X, dtype=float)
    SigmaX_star = np.asarray(SigmaX_star, dtype=float)
    if SigmaX_star.shape != (X.shape[1], X.shape[1]):
        raise DimensionMismatchError("SigmaX_star does not match the predictor count")
    return float(abs(np.sum(X * X) / X.shape[0] - np.trace(SigmaX_star)))


@dataclass(frozen=True)
class SimGrid:
    """Baseline design plus one swept axis."""

    axis: str = "n"
    values: tuple = (120,)
    replications: int = 500
    seed: int = 0
    n: int = 120
    p: int = 40
    k: int = 4
    r: int = 2
    sigma: float = 2.0
    tau_star: float = 1.0
    d_star: float = 3.0
    coef_norm: float = 2.0
    k_max: Optional[int] = None
    mode: str = "gaussian"

    def __post_init__(self):
        if self.axis not in AXES:
            raise InvalidParameterError(f"axis must be one of {AXES}")
        if len(self.values) == 0:
            raise InvalidParameterError("at least one axis value is required")
        if self.replications < 1:
            raise InvalidParameterError("replications must be >= 1")
        if self.mode not in ("gaussian", "latent"):
            raise InvalidParameterError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "values", tuple(self.values))

    def setting(self, value) -> dict:
        s = {"n": self.n, "p": self.p, "k": self.k, "d_star": self.d_star, "coef_norm": self.coef_norm}
        s[self.axis] = int(value) if self.axis in ("n", "p", "k") else float(value)
        return s


@dataclass(eq=False)
class ExperimentResult:
    grid: SimGrid
    methods: list
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def summary(self):
        """Mean and Monte Carlo standard error per (axis value, method, selector, metric)."""
        cells = {}
        for axis_value, _, method, selector, metric, value in self.records:
            cells.setdefault((axis_value, method, selector, metric), []).append(value)
        rows = []
        for axis_value in self.grid.values:
            for method, selector in self.methods:
                for metric in METRICS:
                    vals = np.asarray(cells.get((axis_value, method, selector, metric), []), dtype=float)
                    m = len(vals)
                    mean = float(vals.mean()) if m else math.nan
                    se = float(vals.std(ddof=1) / math.sqrt(m)) if m > 1 else math.nan
                    rows.append({
                        "axis": self.grid.axis, "axis_value": axis_value, "method": method,
                        "selector": selector, "metric": metric, "mean": mean, "se": se, "count": m,
                    })
        return rows

    def mean(self, method, selector, metric, axis_value=None):
        vals = [
            v for a, _, m, s, mt, v in self.records
            if m == method and s == selector and mt == metric and (axis_value is None or a == axis_value)
        ]
        return float(np.mean(vals)) if vals else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis_value", "replication", "method", "selector", "metric", "value"])
        for axis_value, rep, method, selector, metric, value in self.records:
            w.writerow([_fmt(axis_value), rep, method, selector, metric, _fmt(value)])
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "grid": asdict(self.grid),
            "methods": [list(ms) for ms in self.methods],
            "summary": self.summary(),
            "failures": self.failures,
        }
        return json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return None if not math.isfinite(x) else float(format(x, ".17g"))
    return obj


def resolve_methods(methods, r: int):
    """Expand method names into (method, selector) pairs; PLS is dropped when r > 1."""
    if methods is None:
        methods = [m for m in METHOD_SELECTORS if not (m == "pls" and r > 1)]
    pairs = []
    for m in methods:
        if isinstance(m, (tuple, list)):
            method, selector = m
            if selector not in METHOD_SELECTORS.get(method, ()):
                raise InvalidParameterError(f"unknown method/selector {method}/{selector}")
            pairs.append((method, selector))
        elif m in METHOD_SELECTORS:
            pairs.extend((m, s) for s in METHOD_SELECTORS[m])
        else:
            raise InvalidParameterError(f"unknown method {m!r}")
    return pairs


def scan_k_max(setting: dict, k_max: Optional[int]) -> int:
    """Largest k scanned by the selectors in one replication."""
    p, n, k = setting["p"], setting["n"], setting["k"]
    cap = k_max if k_max is not None else max(10, 2 * k + 2)
    return max(0, min(cap, p, n - 2))


def _replication(grid: SimGrid, methods, config: OptimConfig, a_idx: int, rep: int):
    axis_value = grid.values[a_idx]
    s = grid.setting(axis_value)
    ss = np.random.SeedSequence(grid.seed, spawn_key=(a_idx, rep))
    s_truth, s_train, s_test = ss.spawn(3)
    truth = gen_true_params(
        s["p"], s["k"], grid.r, s["d_star"], grid.tau_star, s["coef_norm"],
        grid.sigma * np.eye(grid.r), np.random.default_rng(s_truth),
    )
    train = gen_dataset(truth, s["n"], np.random.default_rng(s_train), grid.mode)
    test = gen_dataset(truth, s["n"], np.random.default_rng(s_test), grid.mode)
    k_max = scan_k_max(s, grid.k_max)
    cfg = replace(config, seed=int(ss.generate_state(1, np.uint64)[0]))

    records, failures = [], []
    ols = fit_ols(train)
    ols_est = estimation_rmse(ols.beta, truth.beta_star)
    ols_pred = prediction_rmse(ols.beta, test)

    betas = {}
    wanted = set(methods)
    if ("ols", "all") in wanted:
        betas[("ols", "all")] = (ols.beta, train.p)
    lpcr_sel = [sel for (m, sel) in methods if m == "lpcr"]
    try:
        if lpcr_sel:
            fits, failed = ic_scan(train, min(k_max, max_ic_k(train)), cfg)
            for sel in lpcr_sel:
                rep_ = report_from_scan(fits, failed, sel)
                betas[("lpcr", sel)] = (rep_.chosen_fit.beta, rep_.chosen_k)
    except LpcrError as exc:
        failures.append({"axis_value": axis_value, "replication": rep, "method": "lpcr", "error": str(exc)})
    for method, fitter in (("classical_pcr", fit_classical_pcr), ("pls", fit_pls_krylov)):
        if (method, "loocv") not in wanted:
            continue
        try:
            rep_ = select_k_loocv(train, method, k_max)
            kh = rep_.chosen_k
            beta = np.zeros((train.p, train.r)) if kh == 0 else fitter(train, kh).beta
            betas[(method, "loocv")] = (beta, kh)
        except (LpcrError, ValueError) as exc:
            failures.append({"axis_value": axis_value, "replication": rep, "method": method, "error": str(exc)})

    for method, selector in methods:
        if (method, selector) not in betas:
            continue
        beta, kh = betas[(method, selector)]
        est = estimation_rmse(beta, truth.beta_star)
        pred = prediction_rmse(beta, test)
        vals = {
            "est_rmse": est,
            "pred_rmse": pred,
            "rel_est_rmse": est / ols_est,
            "rel_pred_rmse": pred / ols_pred,
            "selection_bias": kh - s["k"],
        }
        for metric in METRICS:
            records.append((axis_value, rep, method, selector, metric, vals[metric]))
    return records, failures


def run_experiment(grid: SimGrid, methods: Sequence = None, config: OptimConfig = None, n_jobs: int = 1) -> ExperimentResult:
    """Run every replication of the grid and collect per-replication metrics.

    Relative RMSEs are divided by OLS-with-all-predictors values from the
    same replication. Failed fits are recorded in ``failures`` and the
    replication is treated as missing for that method.
    """
    config = config or OptimConfig()
    pairs = resolve_methods(methods, grid.r)
    tasks = [(a, rep) for a in range(len(grid.values)) for rep in range(grid.replications)]
    if n_jobs == 1:
        outputs = [_replication(grid, pairs, config, a, rep) for a, rep in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            futs = [ex.submit(_replication, grid, pairs, config, a, rep) for a, rep in tasks]
            outputs = [f.result() for f in futs]
    result = ExperimentResult(grid, pairs)
    for recs, fails in outputs:
        result.records.extend(recs)
        result.failures.extend(fails)
    return result
