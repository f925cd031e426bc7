import json

import numpy as np
import pytest

from spatial_classify import data_io
from spatial_classify.data_models import Dataset, ErrorReport, McmcSettings, RngStream, RunConfig, Scenario
from spatial_classify.errors import DataFormatError, ValidationError
from spatial_classify.eval_sim import apply_split, simulate_dataset
from spatial_classify.model_interface import BayesianClassifier, build_classifier

SHORT = McmcSettings(iters=120, burn_in=60)

CSV = """row,col,y,x1,x2,is_test
0,0,1,0.5,1.0,0
0,1,0,-0.25,2.0,0
1,0,,0.125,3.0,0
1,1,1,0.0,4.0,1
"""


@pytest.fixture(scope="module")
def data() -> Dataset:
    raw = simulate_dataset(Scenario("Simple1", 1.0, rows=6, cols=6), RngStream(61))
    return apply_split(raw, "random", RngStream(62), test_fraction=0.25)


# ---------- grid CSV ----------

def test_read_dataset(tmp_path):
    path = tmp_path / "grid.csv"
    path.write_text(CSV)
    d = data_io.read_dataset(path)
    assert d.n == 4 and d.covariate_names == ["x1", "x2"]
    np.testing.assert_array_equal(d.X[:, 0], 1.0)
    np.testing.assert_array_equal(d.y, [1, 0, -1, 1])
    # the unobserved cell is held out even though is_test says otherwise
    np.testing.assert_array_equal(d.test_mask, [False, False, True, True])
    assert (d.domain.rows, d.domain.cols) == (2, 2)
    assert d.label == "grid"


def test_read_dataset_orders_covariates_numerically(tmp_path):
    path = tmp_path / "wide.csv"
    path.write_text("row,col,y,x10,x2,is_test\n0,0,1,10.0,2.0,0\n0,1,0,20.0,4.0,0\n")
    d = data_io.read_dataset(path)
    assert d.covariate_names == ["x2", "x10"]
    np.testing.assert_array_equal(d.X[0], [1.0, 2.0, 10.0])
    assert d.domain is not None


def test_missing_column_is_named(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("row,col,x1,is_test\n0,0,1.0,0\n")
    with pytest.raises(DataFormatError) as info:
        data_io.read_dataset(path)
    assert info.value.columns == ["y"]
    assert "y" in str(info.value)


@pytest.mark.parametrize("text,column", [
    ("row,col,y,x1,is_test\n0,0,1,abc,0\n0,1,0,1.0,0\n", "x1"),
    ("row,col,y,x1,is_test\n0,0,yes,1.0,0\n0,1,0,1.0,0\n", "y"),
    ("row,col,y,x1,is_test\n0,0,1,1.0,0\n0,0,0,1.0,0\n", "row"),
])
def test_malformed_values_are_reported(tmp_path, text, column):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(DataFormatError) as info:
        data_io.read_dataset(path)
    assert column in info.value.columns


def test_domain_only_for_row_major_full_grid(tmp_path):
    path = tmp_path / "sparse.csv"
    path.write_text("row,col,y,is_test\n0,0,1,0\n2,2,0,0\n")
    assert data_io.read_dataset(path).domain is None
    path.write_text("row,col,y,is_test\n0,1,1,0\n0,0,0,0\n")
    assert data_io.read_dataset(path).domain is None


def test_dataset_written_and_read_back_exactly(tmp_path, data):
    path = data_io.write_dataset(data, tmp_path / data_io.DATA_FILE)
    header = path.read_text().splitlines()[0]
    assert header == "row,col,y,x1,is_test"
    back = data_io.read_dataset(path)
    np.testing.assert_array_equal(back.X, data.X)
    np.testing.assert_array_equal(back.y, data.y)
    np.testing.assert_array_equal(back.test_mask, data.test_mask)


def test_read_adjacency(tmp_path):
    path = tmp_path / "adj.csv"
    path.write_text("0,1,0\n1,0,1\n0,1,0\n")
    nb = data_io.read_adjacency(path)
    np.testing.assert_allclose(nb.weights[1], [0.5, 0.0, 0.5])
    path.write_text("0,1\n0,0\n")
    with pytest.raises(ValidationError):
        data_io.read_adjacency(path)


def test_read_json_reports_bad_files(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(DataFormatError):
        data_io.read_json(path)
    data_io.write_json(path, {"a": np.arange(2), "b": np.float64(0.5)})
    assert data_io.read_json(path) == {"a": [0, 1], "b": 0.5}


# ---------- fitted models ----------

def test_bayesian_fit_reloads_from_chains(tmp_path, data):
    clf = BayesianClassifier("sglmm", mcmc=SHORT).fit(data, rng=RngStream(63))
    written = data_io.save_fit(clf, tmp_path)
    assert {p.name for p in written} == {data_io.CHAINS_FILE, data_io.META_FILE, data_io.MODEL_FILE}
    first = json.loads((tmp_path / data_io.CHAINS_FILE).read_text().splitlines()[0])
    assert set(first) == {"beta", "gamma2", "rho", "kappa", "z_test", "z_train"}
    loaded = data_io.load_fit(tmp_path, data)
    np.testing.assert_allclose(loaded.samples.beta, clf.samples.beta)
    np.testing.assert_allclose(loaded.samples.kappa, clf.samples.kappa)
    sites = data.test_idx
    assert ([s.p1 for s in loaded.score(data, sites)] == [s.p1 for s in clf.score(data, sites)])


def test_reload_against_other_split_is_refused(tmp_path, data):
    clf = BayesianClassifier("probit", mcmc=SHORT).fit(data, rng=RngStream(64))
    data_io.save_fit(clf, tmp_path)
    other = data.with_test_mask(np.zeros(data.n, dtype=bool))
    with pytest.raises(ValidationError):
        data_io.load_fit(tmp_path, other)


def test_frequentist_fit_round_trip(tmp_path, data):
    clf = build_classifier("lda").fit(data)
    data_io.save_fit(clf, tmp_path)
    payload = data_io.read_json(tmp_path / data_io.MODEL_FILE)
    assert {"pi", "mu", "lambda"} <= set(payload)
    loaded = data_io.load_fit(tmp_path, data)
    assert loaded.score(data, [0])[0].delta == pytest.approx(clf.score(data, [0])[0].delta)
    with pytest.raises(ValidationError):
        data_io.load_fit(tmp_path / "nowhere", data)


def test_read_chains_checks_content(tmp_path):
    path = tmp_path / data_io.CHAINS_FILE
    path.write_text("")
    with pytest.raises(DataFormatError):
        data_io.read_chains(path)
    path.write_text(json.dumps({"beta": [0.1], "gamma2": 1.0}) + "\n")
    with pytest.raises(DataFormatError) as info:
        data_io.read_chains(path)
    assert "rho" in info.value.columns


# ---------- reports and provenance ----------

def test_reports_written_in_row_layout(tmp_path):
    reports = [
        ErrorReport("sglm", training_error_oaat=0.1, training_error_joint=0.3, training_error=0.12,
                    test_error=0.2, linear_component="Simple2", dataset="1", kappa=1.0),
        ErrorReport("lda", training_error=0.25, linear_component="Simple2", dataset="1", kappa=1.0),
    ]
    csv_path, json_path = data_io.write_reports(reports, tmp_path)
    frame = data_io.reports_frame(reports)
    assert list(frame.columns) == ["linear_component", "dataset", "kappa", "model_fit", "metric", "rate"]
    assert len(frame) == 5
    assert csv_path.read_text().splitlines()[0] == "linear_component,dataset,kappa,model_fit,metric,rate"
    back = data_io.read_reports(json_path)
    assert [r.rates() for r in back] == [r.rates() for r in reports]


def test_predictions_file(tmp_path, data):
    clf = build_classifier("lda").fit(data)
    sites = data.test_idx[:3]
    scores = clf.score(data, sites)
    path = data_io.write_predictions(data, sites, scores, clf.predict(data, sites), tmp_path / "p.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "row,col,p1,delta,y_hat" and len(lines) == 4


def test_run_records(tmp_path):
    cfg = RunConfig(command="simulate", seed=7, scenario="Simple1", kappa=1.0)
    config_path, prov_path = data_io.write_run_records(cfg, tmp_path / "run", argv=["simulate"], streams={"SIMULATE": 0})
    assert data_io.read_json(config_path)["seed"] == 7
    prov = data_io.read_json(prov_path)
    assert prov["argv"] == ["simulate"] and prov["streams"] == {"SIMULATE": 0}
    assert {"numpy", "scipy", "pandas", "package_version", "created_at"} <= set(prov)
