import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from otbe.errors import InvalidData
from otbe.extractor import fit
from otbe.heads import fit_centroid_classifier, fit_linear_head
from otbe.io import MAGIC, dumps_model, loads_model, numeric_columns, read_csv, write_csv
from otbe.matstats import ClassMoments

from conftest import random_moments


def _assert_models_identical(a, b):
    for name in ("x_mean", "x_inv_sqrt", "loadings", "raw_loadings", "h_eigenvalues", "C", "D"):
        x, y = getattr(a, name), getattr(b, name)
        assert x.shape == y.shape
        assert x.tobytes() == y.tobytes(), name
    assert (a.lam, a.dim, a.task, a.context, a.delta_wy, a.delta_ws) == \
        (b.lam, b.dim, b.task, b.context, b.delta_wy, b.delta_ws)


def test_model_round_trip_is_bit_exact():
    m = random_moments(0)
    model = fit(m, lam=0.37, dim=2, context=("S",))
    head = fit_linear_head(model, m)
    text = dumps_model(model, head, {"features": ["x_1"]})
    assert text.startswith(MAGIC + "\n")
    model2, head2, meta = loads_model(text)
    _assert_models_identical(model, model2)
    assert head.beta.tobytes() == head2.beta.tobytes()
    assert head.intercept.tobytes() == head2.intercept.tobytes()
    assert meta == {"features": ["x_1"]}
    assert dumps_model(model2, head2, meta) == text


def test_classifier_round_trip():
    rng = np.random.default_rng(1)
    cm = ClassMoments.from_data(rng.standard_normal((60, 3)), [("S", 1), ("X", 2)],
                                rng.choice(["a", "b"], size=60))
    model = fit(cm, task="classification", dim=1)
    clf = fit_centroid_classifier(model, cm)
    _, clf2, _ = loads_model(dumps_model(model, clf))
    assert clf2.classes == ("a", "b")
    assert clf2.centroids.tobytes() == clf.centroids.tobytes()


def test_bad_model_files():
    with pytest.raises(InvalidData, match="OTBE1"):
        loads_model("NOPE\n{}")
    with pytest.raises(InvalidData):
        loads_model(MAGIC + "\n{not json")
    with pytest.raises(InvalidData, match="version"):
        loads_model(MAGIC + '\n{"version": 99}')


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
def test_csv_round_trip_full_precision(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("csv") / "v.csv"
    write_csv(path, ["v"], [[v] for v in values])
    header, rows = read_csv(path)
    back = numeric_columns(header, rows, ["v"])[:, 0]
    assert_array_equal(back, np.array(values))


def test_csv_errors(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("")
    with pytest.raises(InvalidData, match="header"):
        read_csv(p)
    p.write_text("x_1,x_2\n1,\n")
    with pytest.raises(InvalidData, match="missing"):
        read_csv(p)
    p.write_text("x_1,x_2\n1,abc\n")
    header, rows = read_csv(p)
    with pytest.raises(InvalidData, match="not a number"):
        numeric_columns(header, rows, ["x_1", "x_2"])
