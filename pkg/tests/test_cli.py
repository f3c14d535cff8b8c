import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from otbe.barycenter import multi_correlation
from otbe.cli import main
from otbe.extractor import feature_moments, fit
from otbe.io import read_csv, write_csv
from otbe.simlab import SemSpec, sem_to_moments


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture
def toy_csv(tmp_path):
    assert run("simulate", "toy", "--seed", 1, "--n", 10_000, "--out", tmp_path / "sim") == 0
    return tmp_path / "sim" / "toy.csv"


def test_fit_report_matches_exact_pipeline(tmp_path, toy_csv):
    out = tmp_path / "model.otbe"
    assert run("fit", "--data", toy_csv, "--lambda", 0, "--dim", 1, "--out", out) == 0
    report = json.loads((tmp_path / "model.otbe.report.json").read_text())
    m = sem_to_moments(SemSpec.toy(0.9))
    model = fit(m, lam=0.0, dim=1, context=("Z",))
    exact = multi_correlation(feature_moments(model, m), "W", "Y")
    assert abs(report["corr_WY"] - exact) <= 0.02
    assert len(report["h_spectrum"]) == 2
    assert {"term_C", "term_D", "objective", "warnings"} <= set(report)


def test_fit_rejects_lambda_one(tmp_path, toy_csv, capsys):
    assert run("fit", "--data", toy_csv, "--lambda", 1, "--dim", 1, "--out", tmp_path / "m") == 2
    assert "lambda must be < 1" in capsys.readouterr().err


def test_fit_rejects_dim_zero(tmp_path, toy_csv):
    assert run("fit", "--data", toy_csv, "--lambda", 0.5, "--dim", 0, "--out", tmp_path / "m") == 2


def test_schema_errors(tmp_path, toy_csv):
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps({"y_1": "outcome", "x_1": "bogus"}))
    assert run("fit", "--data", toy_csv, "--schema", schema, "--lambda", 0, "--dim", 1,
               "--out", tmp_path / "m") == 2
    schema.write_text(json.dumps({"y_1": "outcome", "z_1": "confounder"}))
    assert run("fit", "--data", toy_csv, "--schema", schema, "--lambda", 0, "--dim", 1,
               "--out", tmp_path / "m") == 2
    schema.write_text(json.dumps({"y_1": "outcome", "z_1": "confounder", "x_1": "feature",
                                  "x_2": "feature"}))
    assert run("fit", "--data", toy_csv, "--schema", schema, "--lambda", 0.5, "--dim", 1,
               "--context", "s", "--out", tmp_path / "m") == 2
    assert run("fit", "--data", toy_csv, "--schema", schema, "--lambda", 0.5, "--dim", 1,
               "--context", "z", "--out", tmp_path / "m") == 0


def test_numeric_failure_exit_code(tmp_path, capsys):
    data = tmp_path / "d.csv"
    rng = np.random.default_rng(0)
    rows = np.hstack([np.ones((50, 1)), rng.standard_normal((50, 3))])
    write_csv(data, ["y_1", "s_1", "x_1", "x_2"], rows.tolist())
    assert run("fit", "--data", data, "--lambda", 0.5, "--dim", 1, "--out", tmp_path / "m") == 3
    assert "numeric failure" in capsys.readouterr().err


def test_transform_predict_composition(tmp_path, toy_csv):
    model = tmp_path / "m.otbe"
    assert run("fit", "--data", toy_csv, "--lambda", 0.8, "--dim", 1, "--out", model) == 0
    w, p1, p2 = tmp_path / "w.csv", tmp_path / "p1.csv", tmp_path / "p2.csv"
    assert run("transform", "--model", model, "--data", toy_csv, "--out", w) == 0
    assert run("predict", "--model", model, "--data", w, "--out", p1) == 0
    assert run("predict", "--model", model, "--data", toy_csv, "--out", p2) == 0
    assert p1.read_bytes() == p2.read_bytes()
    assert read_csv(p1)[0] == ["yhat_y_1"]


def test_mean_row_maps_to_zero(tmp_path, toy_csv):
    model = tmp_path / "m.otbe"
    run("fit", "--data", toy_csv, "--lambda", 0.3, "--dim", 2, "--out", model)
    header, rows = read_csv(toy_csv)
    x = np.array([[float(r[2]), float(r[3])] for r in rows])
    one = tmp_path / "mean.csv"
    write_csv(one, ["x_1", "x_2"], [x.mean(axis=0).tolist()])
    w = tmp_path / "w.csv"
    assert run("transform", "--model", model, "--data", one, "--out", w) == 0
    _, wrows = read_csv(w)
    assert_allclose(np.array(wrows[0], dtype=float), [0.0, 0.0], atol=1e-12)


def test_transform_schema_mismatch(tmp_path, toy_csv):
    model = tmp_path / "m.otbe"
    run("fit", "--data", toy_csv, "--lambda", 0.3, "--dim", 1, "--out", model)
    bad = tmp_path / "bad.csv"
    write_csv(bad, ["a", "b"], [[1.0, 2.0]])
    assert run("transform", "--model", model, "--data", bad, "--out", tmp_path / "w.csv") == 2


def test_classification_accuracy(tmp_path):
    rng = np.random.default_rng(9)
    n = 10_000
    labels = rng.integers(0, 2, size=n)
    s = rng.standard_normal((n, 1)) + labels[:, None]
    x = np.hstack([4.0 * labels[:, None] + rng.standard_normal((n, 1)),
                   s + 0.5 * rng.standard_normal((n, 1))])
    data = tmp_path / "cls.csv"
    write_csv(data, ["y_class", "s_1", "x_1", "x_2"],
              [[f"c{lab}", *srow, *xrow] for lab, srow, xrow in zip(labels, s, x)])
    model = tmp_path / "cls.otbe"
    assert run("fit", "--data", data, "--task", "classify", "--lambda", 0.5, "--dim", 1,
               "--out", model) == 0
    pred = tmp_path / "pred.csv"
    assert run("predict", "--model", model, "--data", data, "--out", pred) == 0
    header, rows = read_csv(pred)
    assert header == ["yhat_y_class"]
    acc = np.mean([r[0] == f"c{lab}" for r, lab in zip(rows, labels)])
    # class means 4 apart along x_1 with unit noise: Bayes accuracy Phi(2) = 0.977
    assert acc >= 0.95
    report = json.loads((tmp_path / "cls.otbe.report.json").read_text())
    assert report["classes"] == ["c0", "c1"]


def test_simulate_degenerate_grid(tmp_path, capsys):
    cfg = tmp_path / "grid.json"
    cfg.write_text(json.dumps({"triples": [[0.4, 0.4, 0.4]], "lam_grid": [0.0, 0.5, 0.99]}))
    assert run("simulate", "grid", "--config", cfg, "--out", tmp_path / "g") == 0
    summary = json.loads((tmp_path / "g" / "grid.json").read_text())["summary"]
    assert summary["percent"]["ols"] == 100.0
    echoed = json.loads(capsys.readouterr().out)
    assert echoed["resolved"]["lam_grid"] == [0.0, 0.5, 0.99]


def test_simulate_invalid_config(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert run("simulate", "grid", "--config", cfg, "--out", tmp_path / "g") == 2
    cfg.write_text(json.dumps({"triples": [[0.9, 0.9, -0.9]]}))
    assert run("simulate", "grid", "--config", cfg, "--out", tmp_path / "g") == 2
    cfg.write_text("[1, 2")
    assert run("simulate", "grid", "--config", cfg, "--out", tmp_path / "g") == 2


def test_simulate_lambda_star_deterministic(tmp_path):
    outs = []
    for k, threads in enumerate((1, 4)):
        d = tmp_path / f"run{k}"
        assert run("simulate", "lambda-star", "--iters", 500, "--seed", 42, "--threads", threads,
                   "--out", d) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outs[0] == outs[1]
    assert set(outs[0]) == {"lambda_star.csv", "lambda_star.json"}


def test_simulate_lambda_curve_decay(tmp_path):
    assert run("simulate", "lambda-curve", "--reps", 100, "--seed", 0, "--out", tmp_path) == 0
    summary = json.loads((tmp_path / "lambda_curve.json").read_text())["summary"]
    assert summary["decay_fraction"] >= 0.95
