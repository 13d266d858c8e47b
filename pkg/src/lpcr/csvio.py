"""CSV ingestion, train/test preprocessing and fit serialization."""

from __future__ import annotations

import csv
import json
import math

import numpy as np

from . import __version__
from .errors import ConstantColumnError, CsvFormatError, InvalidParameterError
from .estimators import PcrFit
from .model import Dataset, EchelonLoadings, PcrParams, Preprocessing, SpikedCovariance


def read_csv(path):
    """Read a numeric CSV with a header row. Returns ``(headers, matrix)``.

    Ragged rows, empty cells and non-numeric cells raise :class:`CsvFormatError`
    naming the offending row (1-based, header is row 1) and column.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            headers = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: file is empty") from None
        headers = [h.strip() for h in headers]
        if len(set(headers)) != len(headers):
            raise CsvFormatError(f"{path}: duplicate column names in header")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(headers):
                raise CsvFormatError(
                    f"{path}: row {lineno} has {len(row)} fields, expected {len(headers)}"
                )
            vals = []
            for j, cell in enumerate(row):
                cell = cell.strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: row {lineno}, column {j + 1} ({headers[j]!r}): "
                        f"cannot parse {cell!r} as a number"
                    ) from None
                if not math.isfinite(v):
                    raise CsvFormatError(
                        f"{path}: row {lineno}, column {j + 1} ({headers[j]!r}): non-finite value {cell!r}"
                    )
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    return headers, np.array(rows, dtype=float)


def resolve_columns(headers, columns) -> list:
    """Turn ``"a,b"`` or ``"0,3"`` (names or 0-based indices) into column indices."""
    if isinstance(columns, str):
        parts = [s.strip() for s in columns.split(",") if s.strip()]
    else:
        parts = list(columns)
    out = []
    for part in parts:
        if isinstance(part, int) or (isinstance(part, str) and part.lstrip("-").isdigit() and part not in headers):
            idx = int(part)
            if not 0 <= idx < len(headers):
                raise InvalidParameterError(f"column index {idx} out of range (0..{len(headers) - 1})")
            out.append(idx)
        elif part in headers:
            out.append(headers.index(part))
        else:
            raise InvalidParameterError(f"unknown column {part!r}")
    if not out:
        raise InvalidParameterError("no response columns given")
    if len(set(out)) != len(out):
        raise InvalidParameterError("response columns repeated")
    return out


def preprocess_split(raw, response_cols, split_index=None, headers=None):
    """Split rows into training ``[0, split_index)`` and test ``[split_index, n)``.

    Responses are centered and predictors centered and scaled (sample
    standard deviation) with training-row statistics only; the same
    statistics are applied to the test rows. Without ``split_index`` all rows
    are training rows and the test set is None.
    """
    raw = np.asarray(raw, dtype=float)
    n, m = raw.shape
    ycols = list(response_cols)
    xcols = [j for j in range(m) if j not in ycols]
    if not xcols:
        raise InvalidParameterError("no predictor columns left")
    split = n if split_index is None else int(split_index)
    if split < 2 or split > n:
        raise InvalidParameterError(f"split index must lie in [2, {n}], got {split}")
    if split_index is not None and split >= n:
        raise InvalidParameterError(f"split index {split} leaves no test rows (n = {n})")
    Yr, Xr = raw[:, ycols], raw[:, xcols]
    y_mean = Yr[:split].mean(axis=0)
    x_mean = Xr[:split].mean(axis=0)
    x_std = Xr[:split].std(axis=0, ddof=1)
    for j, sd in enumerate(x_std):
        if not sd > 0:
            name = headers[xcols[j]] if headers is not None else xcols[j]
            raise ConstantColumnError(name)
    pre = Preprocessing(y_mean=y_mean, x_mean=x_mean, x_std=x_std)
    train = Dataset(pre.transform_y(Yr[:split]), pre.transform_x(Xr[:split]), pre)
    test = None
    if split < n:
        test = Dataset(pre.transform_y(Yr[split:]), pre.transform_x(Xr[split:]), pre)
    return train, test


def fit_to_dict(fit: PcrFit, **meta) -> dict:
    params = fit.params
    d = {
        "software": "lpcr",
        "version": __version__,
        "method": fit.method_tag,
        "k": fit.k,
        "n": fit.n,
        "param_count": fit.param_count,
        "neg_loglik": _num(fit.neg_loglik),
        "ic_aic": _num(fit.ic_aic),
        "ic_bic": _num(fit.ic_bic),
        "beta": params.beta.tolist(),
        "Sigma": params.Sigma.tolist(),
        "tau": None if params.SigmaX is None else params.SigmaX.tau,
        "loadings": None if params.SigmaX is None else params.SigmaX.loadings.L.tolist(),
        "preprocessing": None if fit.preprocessing is None else fit.preprocessing.to_dict(),
    }
    if fit.fit_result is not None:
        fr = fit.fit_result
        d["optimizer"] = {
            "converged": fr.converged,
            "iterations": fr.iterations,
            "stop_reason": fr.stop_reason,
            "gradient_max_norm": fr.grad_norm,
            "profile_value": fr.eval.value,
            "objective_variant": fr.eval.variant,
            "restart_values": [_num(v) for v in fr.restart_values],
        }
    d.update(meta)
    return d


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def fit_from_dict(d: dict) -> PcrFit:
    beta = np.asarray(d["beta"], dtype=float)
    p = beta.shape[0]
    SigmaX = None
    if d.get("tau") is not None:
        L = np.asarray(d["loadings"], dtype=float).reshape(p, -1)
        SigmaX = SpikedCovariance(float(d["tau"]), EchelonLoadings(L))
    pre = Preprocessing.from_dict(d["preprocessing"]) if d.get("preprocessing") else None
    params = PcrParams(beta=beta, Sigma=np.asarray(d["Sigma"], dtype=float), SigmaX=SigmaX)
    inf = float("inf")
    return PcrFit(
        params=params,
        k=int(d["k"]),
        neg_loglik=d["neg_loglik"] if d["neg_loglik"] is not None else inf,
        param_count=int(d["param_count"]),
        ic_aic=d["ic_aic"] if d["ic_aic"] is not None else inf,
        ic_bic=d["ic_bic"] if d["ic_bic"] is not None else inf,
        method_tag=d["method"],
        n=int(d["n"]),
        preprocessing=pre,
    )


def dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_matrix_csv(path, headers, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(headers)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
