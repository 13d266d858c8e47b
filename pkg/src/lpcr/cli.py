"""Command-line interface.

Exit codes: 0 success, 2 invalid configuration or input, 3 no maximizer of
the likelihood exists (rank conditions fail or the optimizer diverges),
4 the optimizer did not converge (artifacts are still written).
"""

from __future__ import annotations

import functools
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import click
import numpy as np

from . import __version__
from .csvio import (
    dump_json,
    fit_from_dict,
    fit_to_dict,
    preprocess_split,
    read_csv,
    resolve_columns,
    write_matrix_csv,
)
from .errors import (
    ConstantColumnError,
    CsvFormatError,
    DegenerateLikelihoodError,
    DimensionMismatchError,
    DivergenceError,
    ExistenceViolationError,
    InvalidParameterError,
    UnsupportedConfigurationError,
)
from .estimators import (
    fit_classical_pcr,
    fit_lpcr,
    fit_ols,
    fit_pls_krylov,
    predict,
    select_k_ic,
    select_k_loocv,
)
from .optimizer import OptimConfig
from .simulation import SimGrid, run_experiment

log = logging.getLogger("lpcr")

EXIT_OK, EXIT_CONFIG, EXIT_EXISTENCE, EXIT_NONCONVERGED = 0, 2, 3, 4
METHOD_NAMES = {"lpcr": "lpcr", "pcr": "classical_pcr", "pls": "pls", "ols": "ols"}
JOBS_ENV = "LPCR_JOBS"


@dataclass
class CliConfig:
    command: str
    input: Optional[Path] = None
    response_cols: Optional[str] = None
    k: Optional[int] = None
    k_max: Optional[int] = None
    criterion: str = "bic"
    method: str = "lpcr"
    split_index: Optional[int] = None
    seed: int = 0
    out_dir: Path = Path(".")
    objective_variant: str = "full-profile"
    restarts: int = 3
    max_iterations: int = 2000
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.input is not None and not Path(self.input).is_file():
            raise InvalidParameterError(f"input file {self.input} does not exist")
        if self.split_index is not None and self.split_index < 2:
            raise InvalidParameterError("--split-index must be at least 2")

    def optim(self) -> OptimConfig:
        return OptimConfig(
            max_iterations=self.max_iterations,
            restarts=self.restarts,
            seed=self.seed,
            objective_variant=self.objective_variant,
        )


def _exit_on_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            code = fn(*args, **kwargs)
        except (InvalidParameterError, CsvFormatError, ConstantColumnError, DimensionMismatchError,
                UnsupportedConfigurationError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (ExistenceViolationError, DivergenceError, DegenerateLikelihoodError) as exc:
            click.echo(f"error: no maximum likelihood estimate: {exc}", err=True)
            sys.exit(EXIT_EXISTENCE)
        sys.exit(code or EXIT_OK)

    return wrapper


def _load(cfg: CliConfig):
    cfg.validate()
    headers, raw = read_csv(cfg.input)
    if cfg.response_cols is None:
        raise InvalidParameterError("--response-cols is required")
    ycols = resolve_columns(headers, cfg.response_cols)
    if cfg.split_index is not None and cfg.split_index >= raw.shape[0]:
        raise InvalidParameterError(f"--split-index {cfg.split_index} must be below n = {raw.shape[0]}")
    train, test = preprocess_split(raw, ycols, cfg.split_index, headers)
    return headers, raw, ycols, train, test


def _fit_method(method, train, k, cfg: CliConfig):
    if method == "lpcr":
        return fit_lpcr(train, k, cfg.optim())
    if method == "classical_pcr":
        return fit_classical_pcr(train, k)
    if method == "pls":
        return fit_pls_krylov(train, k)
    return fit_ols(train)


def _rmse(pred, Y):
    return float(np.linalg.norm(pred - Y) / np.sqrt(Y.size))


def _write_fit_artifacts(cfg, fit, headers, raw, ycols, meta) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    xcols = [j for j in range(len(headers)) if j not in ycols]
    ynames = [headers[j] for j in ycols]
    xnames = [headers[j] for j in xcols]
    doc = fit_to_dict(
        fit,
        response_names=ynames,
        predictor_names=xnames,
        seed=cfg.seed,
        split_index=cfg.split_index,
        **meta,
    )
    dump_json(doc, out / "fit.json")

    n = raw.shape[0]
    split = n if cfg.split_index is None else cfg.split_index
    preds = predict(fit, raw[:, xcols])
    rows = [[i, "train" if i < split else "test", *preds[i]] for i in range(n)]
    write_matrix_csv(out / "predictions.csv", ["row", "partition", *[f"pred_{y}" for y in ynames]], rows)

    part = slice(split, n) if split < n else slice(0, n)
    Y = raw[part][:, ycols]
    baseline = np.broadcast_to(fit.preprocessing.y_mean, Y.shape)
    rmse = _rmse(preds[part], Y)
    base = _rmse(baseline, Y)
    metrics = {
        "partition": "test" if split < n else "train",
        "rows": int(Y.shape[0]),
        "rmse": rmse,
        "baseline_rmse": base,
        "relative_rmse": rmse / base if base > 0 else None,
        "k": fit.k,
        "method": fit.method_tag,
    }
    dump_json(metrics, out / "metrics.json")
    fr = fit.fit_result
    if fr is not None and not fr.converged:
        click.echo(
            f"warning: optimizer did not converge ({fr.stop_reason}, max|grad| = {fr.grad_norm:.3g})",
            err=True,
        )
        return EXIT_NONCONVERGED
    return EXIT_OK


_common = [
    click.option("--input", "input_", required=True, type=click.Path(path_type=Path), help="CSV file with a header row."),
    click.option("--response-cols", required=True, help="Comma-separated response column names or 0-based indices."),
    click.option("--split-index", type=int, default=None, help="Rows before this index train, the rest test."),
    click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=0, show_default=True),
    click.option("--out-dir", type=click.Path(path_type=Path), default=Path("."), show_default=True),
    click.option("--objective-variant", type=click.Choice(["full-profile", "as-displayed"]), default="full-profile", show_default=True),
    click.option("--restarts", type=click.IntRange(1), default=3, show_default=True),
    click.option("--max-iterations", type=click.IntRange(1), default=2000, show_default=True),
]


def common_options(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(__version__, prog_name="lpcr")
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose):
    """Likelihood-based principal components regression."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@common_options
@click.option("--k", type=click.IntRange(0), default=None, help="Number of components (ignored for ols).")
@click.option("--method", type=click.Choice(list(METHOD_NAMES)), default="lpcr", show_default=True)
@_exit_on_errors
def fit(input_, response_cols, split_index, seed, out_dir, objective_variant, restarts, max_iterations, k, method):
    """Fit one model with a fixed number of components."""
    cfg = CliConfig("fit", input_, response_cols, k=k, method=METHOD_NAMES[method], split_index=split_index,
                    seed=seed, out_dir=out_dir, objective_variant=objective_variant, restarts=restarts,
                    max_iterations=max_iterations)
    headers, raw, ycols, train, _ = _load(cfg)
    if cfg.method != "ols" and k is None:
        raise InvalidParameterError("--k is required for this method")
    model = _fit_method(cfg.method, train, k, cfg)
    return _write_fit_artifacts(cfg, model, headers, raw, ycols, {})


@main.command()
@common_options
@click.option("--k-max", type=click.IntRange(0), default=None, help="Largest k considered.")
@click.option("--criterion", type=click.Choice(["aic", "bic", "loocv"]), default="bic", show_default=True)
@click.option("--method", type=click.Choice(list(METHOD_NAMES)), default=None,
              help="lpcr for aic/bic (default); pcr (default) or pls for loocv.")
@_exit_on_errors
def select(input_, response_cols, split_index, seed, out_dir, objective_variant, restarts, max_iterations,
           k_max, criterion, method):
    """Select k, then fit and write the chosen model."""
    if method is None:
        method = "lpcr" if criterion in ("aic", "bic") else "pcr"
    method = METHOD_NAMES[method]
    if criterion in ("aic", "bic") and method != "lpcr":
        raise InvalidParameterError("information criteria are available for --method lpcr only")
    if criterion == "loocv" and method not in ("classical_pcr", "pls"):
        raise InvalidParameterError("loocv is available for --method pcr or pls")
    cfg = CliConfig("select", input_, response_cols, k_max=k_max, criterion=criterion, method=method,
                    split_index=split_index, seed=seed, out_dir=out_dir, objective_variant=objective_variant,
                    restarts=restarts, max_iterations=max_iterations)
    headers, raw, ycols, train, _ = _load(cfg)
    if criterion == "loocv":
        report = select_k_loocv(train, method, k_max)
        k = report.chosen_k
        if k == 0:
            model = fit_classical_pcr(train, 0)
            model.method_tag = method
        else:
            model = _fit_method(method, train, k, cfg)
    else:
        report = select_k_ic(train, criterion, k_max, cfg.optim())
        model = report.chosen_fit
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    dump_json(
        {
            "criterion": criterion,
            "method": method,
            "chosen_k": report.chosen_k,
            "failed": report.failed,
            "table": [{"k": k_, "score": s if np.isfinite(s) else None} for k_, s in report.table],
        },
        Path(out_dir) / "selection.json",
    )
    return _write_fit_artifacts(cfg, model, headers, raw, ycols, {"criterion": criterion})


@main.command("predict")
@click.option("--fit", "fit_path", required=True, type=click.Path(exists=True, path_type=Path), help="fit.json from fit/select.")
@click.option("--input", "input_", required=True, type=click.Path(path_type=Path), help="CSV containing the predictor columns.")
@click.option("--out-dir", type=click.Path(path_type=Path), default=Path("."), show_default=True)
@_exit_on_errors
def predict_cmd(fit_path, input_, out_dir):
    """Predict responses for new rows with a saved fit."""
    with open(fit_path, encoding="utf-8") as fh:
        doc = json.load(fh)
    model = fit_from_dict(doc)
    cfg = CliConfig("predict", input_, out_dir=out_dir)
    cfg.validate()
    headers, raw = read_csv(input_)
    missing = [name for name in doc["predictor_names"] if name not in headers]
    if missing:
        raise InvalidParameterError(f"input lacks predictor columns {missing}")
    X = raw[:, [headers.index(name) for name in doc["predictor_names"]]]
    preds = predict(model, X)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    write_matrix_csv(
        Path(out_dir) / "predictions.csv",
        ["row", *[f"pred_{y}" for y in doc["response_names"]]],
        [[i, *preds[i]] for i in range(preds.shape[0])],
    )
    return EXIT_OK


def _parse_values(axis, text):
    conv = int if axis in ("n", "p", "k") else float
    try:
        return tuple(conv(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise InvalidParameterError(f"cannot parse axis values {text!r}") from None


@main.command()
@click.option("--axis", type=click.Choice(["coef_norm", "d_star", "p", "k", "n"]), default="n", show_default=True)
@click.option("--axis-values", default="120", show_default=True, help="Comma-separated values of the swept axis.")
@click.option("--reps", type=click.IntRange(1), default=500, show_default=True)
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=0, show_default=True)
@click.option("--mode", type=click.Choice(["gaussian", "latent"]), default="gaussian", show_default=True)
@click.option("--method", "methods", default="lpcr,pcr,pls,ols", show_default=True,
              help="Comma-separated subset of lpcr,pcr,pls,ols (pls is skipped when r > 1).")
@click.option("--k-max", type=click.IntRange(0), default=None, help="Largest k scanned by the selectors.")
@click.option("--n", "n_", type=click.IntRange(2), default=120, show_default=True)
@click.option("--p", "p_", type=click.IntRange(1), default=40, show_default=True)
@click.option("--k", "k_", type=click.IntRange(0), default=4, show_default=True)
@click.option("--r", "r_", type=click.IntRange(1), default=2, show_default=True)
@click.option("--d-star", type=float, default=3.0, show_default=True)
@click.option("--coef-norm", type=float, default=2.0, show_default=True)
@click.option("--out-dir", type=click.Path(path_type=Path), default=Path("."), show_default=True)
@click.option("--objective-variant", type=click.Choice(["full-profile", "as-displayed"]), default="full-profile", show_default=True)
@click.option("--restarts", type=click.IntRange(1), default=3, show_default=True)
@click.option("--jobs", type=click.IntRange(1), default=None, help=f"Worker processes (default ${JOBS_ENV} or 1).")
@_exit_on_errors
def simulate(axis, axis_values, reps, seed, mode, methods, k_max, n_, p_, k_, r_, d_star, coef_norm, out_dir,
             objective_variant, restarts, jobs):
    """Run the Monte Carlo experiment over one swept axis."""
    names = [m.strip() for m in methods.split(",") if m.strip()]
    bad = [m for m in names if m not in METHOD_NAMES]
    if bad:
        raise InvalidParameterError(f"unknown methods {bad}")
    internal = [METHOD_NAMES[m] for m in names]
    if r_ > 1:
        internal = [m for m in internal if m != "pls"]
    if not internal:
        raise InvalidParameterError("no runnable methods selected")
    grid = SimGrid(axis=axis, values=_parse_values(axis, axis_values), replications=reps, seed=seed,
                   n=n_, p=p_, k=k_, r=r_, d_star=d_star, coef_norm=coef_norm, k_max=k_max, mode=mode)
    if jobs is None:
        jobs = int(os.environ.get(JOBS_ENV, "1"))
    config = OptimConfig(restarts=restarts, seed=seed, objective_variant=objective_variant)
    result = run_experiment(grid, internal, config, n_jobs=jobs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(result.to_csv(), encoding="utf-8")
    (out / "summary.json").write_text(result.to_json(), encoding="utf-8")
    if result.failures:
        click.echo(f"warning: {len(result.failures)} method fits failed; see summary.json", err=True)
    return EXIT_OK


if __name__ == "__main__":
    main()
