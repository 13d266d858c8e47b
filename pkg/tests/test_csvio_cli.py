import csv
import json

import numpy as np
import pytest
from click.testing import CliRunner

from lpcr.cli import main
from lpcr.csvio import fit_from_dict, preprocess_split, read_csv, resolve_columns
from lpcr.errors import ConstantColumnError, CsvFormatError, InvalidParameterError
from lpcr.estimators import predict
from lpcr.simulation import gen_dataset, gen_true_params


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def sim_csv(path, n=100, p=10, k=2, d_star=5.0, coef_norm=3.0, seed=1):
    t = gen_true_params(p, k, 1, d_star=d_star, coef_norm=coef_norm, Sigma_star=np.eye(1), seed=seed)
    d = gen_dataset(t, n, seed=seed + 1)
    rows = [[repr(float(d.Y[i, 0]))] + [repr(float(v)) for v in d.X[i]] for i in range(n)]
    return write_csv(path, ["y"] + [f"x{j}" for j in range(p)], rows)


# ---- CSV parsing -----------------------------------------------------------------

@pytest.mark.parametrize(
    "rows,fragment",
    [
        ([["1", "2"], ["3"]], "row 3 has 1 fields"),
        ([["1", "abc"]], "row 2, column 2 ('b')"),
        ([["1", ""]], "row 2, column 2"),
        ([["nan", "1"]], "non-finite"),
        ([["1", "1,000"]], "row 2"),
    ],
)
def test_read_csv_rejects_bad_cells(tmp_path, rows, fragment):
    f = tmp_path / "bad.csv"
    with open(f, "w", newline="") as fh:
        fh.write("a,b\n")
        for r in rows:
            fh.write(",".join(r) + "\n")
    with pytest.raises(CsvFormatError, match=None) as exc:
        read_csv(f)
    assert fragment in str(exc.value)


def test_read_csv_structure_errors(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("")
    with pytest.raises(CsvFormatError):
        read_csv(empty)
    header_only = write_csv(tmp_path / "h.csv", ["a", "b"], [])
    with pytest.raises(CsvFormatError):
        read_csv(header_only)
    dup = write_csv(tmp_path / "d.csv", ["a", "a"], [[1, 2]])
    with pytest.raises(CsvFormatError):
        read_csv(dup)


def test_read_csv_roundtrip(tmp_path):
    f = write_csv(tmp_path / "ok.csv", ["a", "b"], [["1.5", "-2e3"], ["0", "7"]])
    headers, M = read_csv(f)
    assert headers == ["a", "b"]
    np.testing.assert_array_equal(M, [[1.5, -2000.0], [0.0, 7.0]])


def test_resolve_columns():
    h = ["y1", "y2", "x"]
    assert resolve_columns(h, "y2,y1") == [1, 0]
    assert resolve_columns(h, "0, 2") == [0, 2]
    for bad in ("z", "5", "", "y1,y1"):
        with pytest.raises(InvalidParameterError):
            resolve_columns(h, bad)


# ---- preprocessing ------------------------------------------------------------

def test_preprocess_hand_example():
    raw = np.array([
        [1.0, 2.0, 10.0],
        [3.0, 4.0, 14.0],
        [5.0, 0.0, 0.0],
        [7.0, 8.0, 20.0],
    ])
    train, test = preprocess_split(raw, [0], split_index=2)
    pre = train.preprocessing
    np.testing.assert_allclose(pre.y_mean, [2.0])
    np.testing.assert_allclose(pre.x_mean, [3.0, 12.0])
    np.testing.assert_allclose(pre.x_std, [np.sqrt(2.0), np.sqrt(8.0)])
    np.testing.assert_allclose(train.Y[:, 0], [-1.0, 1.0])
    np.testing.assert_allclose(train.X, [[-1 / np.sqrt(2), -2 / np.sqrt(8)], [1 / np.sqrt(2), 2 / np.sqrt(8)]])
    np.testing.assert_allclose(test.Y[:, 0], [3.0, 5.0])
    np.testing.assert_allclose(test.X[:, 0], [-3 / np.sqrt(2), 5 / np.sqrt(2)])


def test_preprocess_training_statistics():
    rng = np.random.default_rng(0)
    raw = rng.standard_normal((50, 5)) * [1, 2, 3, 4, 5] + [1, -1, 2, 0, 3]
    train, test = preprocess_split(raw, [0, 1], split_index=35)
    np.testing.assert_allclose(train.X.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(train.X.std(axis=0, ddof=1), 1.0, atol=1e-10)
    np.testing.assert_allclose(train.Y.mean(axis=0), 0.0, atol=1e-10)
    assert np.all(np.abs(test.X.mean(axis=0)) > 1e-6)
    full, none = preprocess_split(raw, [0], None)
    assert none is None and full.n == 50


def test_preprocess_errors():
    raw = np.array([[1.0, 5.0, 2.0], [2.0, 5.0, 3.0], [3.0, 1.0, 4.0]])
    with pytest.raises(ConstantColumnError) as exc:
        preprocess_split(raw, [0], split_index=2, headers=["y", "flat", "x"])
    assert "flat" in str(exc.value)
    with pytest.raises(InvalidParameterError):
        preprocess_split(raw, [0], split_index=1)
    with pytest.raises(InvalidParameterError):
        preprocess_split(raw, [0], split_index=3)
    with pytest.raises(InvalidParameterError):
        preprocess_split(raw, [0, 1, 2])


# ---- CLI -------------------------------------------------------------------------

@pytest.fixture
def runner():
    return CliRunner()


def run(runner, *args):
    return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)


def read_bytes(d):
    return {f.name: f.read_bytes() for f in sorted(d.iterdir())}


def test_fit_writes_artifacts_and_roundtrips(runner, tmp_path):
    data = sim_csv(tmp_path / "d.csv")
    out = tmp_path / "out"
    res = run(runner, "fit", "--input", data, "--response-cols", "y", "--k", 2, "--split-index", 70,
              "--out-dir", out, "--seed", 3)
    assert res.exit_code == 0, res.output
    assert sorted(p.name for p in out.iterdir()) == ["fit.json", "metrics.json", "predictions.csv"]
    doc = json.loads((out / "fit.json").read_text())
    for key in ("beta", "Sigma", "tau", "k", "param_count", "ic_aic", "ic_bic", "optimizer", "seed", "version"):
        assert key in doc
    assert doc["param_count"] == 1 + 2 * (1 + 1 + 10) - 3 + 1
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["partition"] == "test" and metrics["rows"] == 30
    assert metrics["relative_rmse"] < 1.0

    fit = fit_from_dict(doc)
    headers, raw = read_csv(data)
    preds = predict(fit, raw[:, 1:])
    with open(out / "predictions.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["row", "partition", "pred_y"]
    assert [r[1] for r in rows[1:]] == ["train"] * 70 + ["test"] * 30
    written = np.array([float(r[2]) for r in rows[1:]])
    np.testing.assert_allclose(written, preds[:, 0], atol=1e-12, rtol=0)


def test_fit_k0_relative_rmse_is_one(runner, tmp_path):
    data = sim_csv(tmp_path / "d.csv", seed=4)
    for method in ("lpcr", "pcr"):
        out = tmp_path / method
        res = run(runner, "fit", "--input", data, "--response-cols", "y", "--k", 0, "--split-index", 60,
                  "--method", method, "--out-dir", out)
        assert res.exit_code == 0
        assert json.loads((out / "metrics.json").read_text())["relative_rmse"] == 1.0


def test_fit_is_byte_deterministic(runner, tmp_path):
    data = sim_csv(tmp_path / "d.csv", seed=5)
    for name in ("a", "b"):
        res = run(runner, "fit", "--input", data, "--response-cols", "0", "--k", 3, "--split-index", 70,
                  "--seed", 9, "--out-dir", tmp_path / name)
        assert res.exit_code == 0
    assert read_bytes(tmp_path / "a") == read_bytes(tmp_path / "b")


def test_exit_codes(runner, tmp_path):
    data = sim_csv(tmp_path / "d.csv", seed=6)
    assert run(runner, "fit", "--input", tmp_path / "missing.csv", "--response-cols", "y", "--k", 1).exit_code == 2
    assert run(runner, "fit", "--input", data, "--response-cols", "nope", "--k", 1).exit_code == 2
    assert run(runner, "fit", "--input", data, "--response-cols", "y", "--k", 1, "--split-index", 100).exit_code == 2
    assert run(runner, "fit", "--input", data, "--response-cols", "y").exit_code == 2
    assert run(runner, "select", "--input", data, "--response-cols", "y", "--criterion", "aic",
               "--method", "pcr").exit_code == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("y,x\n1,2\n3,oops\n")
    res = run(runner, "fit", "--input", bad, "--response-cols", "y", "--k", 0)
    assert res.exit_code == 2 and "row 3, column 2" in res.output

    rng = np.random.default_rng(0)
    deg = write_csv(tmp_path / "deg.csv", ["y"] + [f"x{j}" for j in range(7)],
                    rng.standard_normal((4, 8)).tolist())
    assert run(runner, "fit", "--input", deg, "--response-cols", "y", "--k", 3).exit_code == 3

    out = tmp_path / "nc"
    res = run(runner, "fit", "--input", data, "--response-cols", "y", "--k", 2, "--max-iterations", 1,
              "--out-dir", out)
    assert res.exit_code == 4
    doc = json.loads((out / "fit.json").read_text())
    assert doc["optimizer"]["converged"] is False
    assert (out / "predictions.csv").exists() and (out / "metrics.json").exists()


@pytest.mark.parametrize("criterion,method", [("bic", None), ("aic", "lpcr"), ("loocv", "pcr"), ("loocv", "pls")])
def test_select_command(runner, tmp_path, criterion, method):
    data = sim_csv(tmp_path / "d.csv", seed=7)
    out = tmp_path / "sel"
    args = ["select", "--input", data, "--response-cols", "y", "--criterion", criterion, "--split-index", 70,
            "--k-max", 5, "--out-dir", out]
    if method:
        args += ["--method", method]
    res = run(runner, *args)
    assert res.exit_code == 0, res.output
    sel = json.loads((out / "selection.json").read_text())
    assert [row["k"] for row in sel["table"]] == list(range(6))
    scores = [row["score"] for row in sel["table"]]
    assert sel["chosen_k"] == int(np.argmin(scores))
    assert json.loads((out / "fit.json").read_text())["k"] == sel["chosen_k"]


def test_predict_command(runner, tmp_path):
    data = sim_csv(tmp_path / "d.csv", seed=8)
    out = tmp_path / "fit"
    assert run(runner, "fit", "--input", data, "--response-cols", "y", "--k", 2, "--split-index", 70,
               "--out-dir", out).exit_code == 0
    new = tmp_path / "new.csv"
    headers, raw = read_csv(data)
    # different column order and no response column
    write_csv(new, headers[:0:-1], [[repr(float(v)) for v in row[:0:-1]] for row in raw[:5]])
    res = run(runner, "predict", "--fit", out / "fit.json", "--input", new, "--out-dir", tmp_path / "pred")
    assert res.exit_code == 0, res.output
    with open(tmp_path / "pred" / "predictions.csv") as fh:
        got = [float(r[1]) for r in list(csv.reader(fh))[1:]]
    with open(out / "predictions.csv") as fh:
        want = [float(r[2]) for r in list(csv.reader(fh))[1:6]]
    np.testing.assert_allclose(got, want, atol=1e-12)
    write_csv(new, ["x0"], [[1.0]])
    assert run(runner, "predict", "--fit", out / "fit.json", "--input", new).exit_code == 2


def test_simulate_command(runner, tmp_path):
    out = tmp_path / "sim"
    res = run(runner, "simulate", "--axis", "n", "--axis-values", "50", "--method", "ols", "--reps", 4,
              "--out-dir", out)
    assert res.exit_code == 0, res.output
    summary = json.loads((out / "summary.json").read_text())
    rows = summary["summary"]
    assert len(rows) == 1 * 1 * 5
    for row in rows:
        if row["metric"].startswith("rel_"):
            assert row["mean"] == 1.0
    with open(out / "results.csv") as fh:
        recs = list(csv.DictReader(fh))
    assert len(recs) == 4 * 5
    assert run(runner, "simulate", "--axis", "sigma", "--axis-values", "1").exit_code == 2
    assert run(runner, "simulate", "--method", "ridge").exit_code == 2
    assert run(runner, "simulate", "--axis", "n", "--axis-values", "a,b").exit_code == 2
