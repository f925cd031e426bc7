import dataclasses

import numpy as np
import pytest
from scipy.special import ndtr

from spatial_classify import eval_sim
from spatial_classify.data_models import Dataset, GridDomain, McmcSettings, RngStream, RunConfig, Scenario
from spatial_classify.errors import ValidationError
from spatial_classify.model_interface import BayesianClassifier
from spatial_classify.sglm_sglmm import build_artifacts, fit_indep_probit, fit_sglm
from spatial_classify.spatial_core import build_grid_neighbors

SHORT = McmcSettings(iters=300, burn_in=100)


def _tiny_config(**kw) -> RunConfig:
    return RunConfig(command="compare", rows=6, cols=6, split="random", iters=200, **kw)


@pytest.fixture(scope="module")
def small_data() -> Dataset:
    data = eval_sim.simulate_dataset(Scenario("Simple1", 0.5, rows=8, cols=8), RngStream(51))
    return eval_sim.apply_split(data, "random", RngStream(52), test_fraction=0.2)


# ---------- simulation ----------

def test_simulation_is_deterministic():
    s = Scenario("Multiple", 0.5, rows=6, cols=6, replicate_seed=3)
    a, b = eval_sim.simulate_dataset(s), eval_sim.simulate_dataset(s)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.X, b.X)
    assert a.X.shape == (36, 4) and a.label == "3"
    c = eval_sim.simulate_dataset(s, RngStream(99))
    assert not np.array_equal(a.X, c.X)


def test_simulated_covariate_ranges():
    rng = RngStream(5).generator()
    d = GridDomain(10, 10)
    X = eval_sim.simulate_covariates("Multiple", d, build_grid_neighbors(d).weights, rng)
    assert np.all(X[:, 0] == 1.0)
    assert X[:, 1].min() >= -0.5 and X[:, 1].max() <= 0.5
    assert X[:, 2].min() >= 0.0 and X[:, 3].max() <= 0.0
    assert eval_sim.simulate_covariates("Intercept", d, None, rng).shape == (100, 1)


def test_independent_intercept_field_has_probit_marginal():
    ys = [eval_sim.simulate_dataset(Scenario("Intercept", 0.0), RngStream(100 + r)).y for r in range(25)]
    assert np.mean(np.concatenate(ys)) == pytest.approx(ndtr(0.1), abs=0.02)


def test_dependence_raises_join_count():
    A = build_grid_neighbors(GridDomain(20, 20)).adjacency
    wins = 0
    for r in range(50):
        dep = eval_sim.simulate_dataset(Scenario("Simple1", 1.0), RngStream(200 + r))
        ind = eval_sim.simulate_dataset(Scenario("Simple1", 0.0), RngStream(200 + r))
        wins += eval_sim.join_count(dep.y, A) > eval_sim.join_count(ind.y, A)
    assert wins >= 48


def test_join_count_small_chain():
    A = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    assert eval_sim.join_count([0, 0, 1], A) == 1
    assert eval_sim.join_count([1, 1, 1], A) == 2


# ---------- splits ----------

def test_clustered_split_fraction():
    d = GridDomain(20, 20)
    fractions = np.array([eval_sim.clustered_test_split(d, rng=RngStream(300 + r)).mean() for r in range(100)])
    assert np.all((fractions >= 0.20) & (fractions <= 0.32))
    assert 0.24 <= fractions.mean() <= 0.30


def test_clustered_split_edge_cases():
    d = GridDomain(5, 5)
    assert eval_sim.clustered_test_split(d, n_seeds=1, per_seed=0, rng=0).sum() == 1
    full = eval_sim.clustered_test_split(d, n_seeds=25, per_seed=8, rng=1)
    assert full.shape == (25,) and full.all()
    with pytest.raises(ValidationError):
        eval_sim.clustered_test_split(GridDomain(2, 5))
    with pytest.raises(ValidationError):
        eval_sim.clustered_test_split(d, n_seeds=0)
    with pytest.raises(ValidationError):
        eval_sim.clustered_test_split(d, per_seed=9)


def test_random_split():
    mask = eval_sim.random_test_split(40, 0.25, rng=3)
    assert mask.sum() == 10
    assert eval_sim.random_test_split(40, 0.0, rng=3).sum() == 0
    with pytest.raises(ValidationError):
        eval_sim.random_test_split(40, 1.0)


def test_clustered_split_follows_row_order():
    data = eval_sim.simulate_dataset(Scenario("Simple1", 0.5, rows=6, cols=6), RngStream(7))
    perm = np.random.default_rng(8).permutation(data.n)
    y = data.y[perm].copy()
    y[0] = -1
    shuffled = Dataset(y=y, X=data.X[perm], coords=data.coords[perm],
                       test_mask=np.r_[True, np.zeros(data.n - 1, dtype=bool)], domain=data.domain)
    split = eval_sim.apply_split(shuffled, "clustered", RngStream(9))
    grid_mask = eval_sim.clustered_test_split(data.domain, rng=RngStream(9))
    expected = grid_mask[data.domain.index(shuffled.coords[:, 0], shuffled.coords[:, 1])]
    np.testing.assert_array_equal(split.test_mask[1:], expected[1:])
    assert split.test_mask[0]
    assert eval_sim.apply_split(shuffled, "none") is shuffled
    with pytest.raises(ValidationError):
        eval_sim.apply_split(shuffled, "diagonal")


# ---------- error rates ----------

@pytest.mark.parametrize("pred,truth,rate", [
    ([1, 0, 1], [1, 0, 1], 0.0),
    ([1, 0, 1], [0, 1, 0], 1.0),
    ([1, 0, 1, 1], [1, 1, 1, 0], 0.5),
])
def test_error_rate_examples(pred, truth, rate):
    assert eval_sim.test_error(pred, truth) == rate


def test_error_rate_checks():
    with pytest.raises(ValidationError):
        eval_sim.test_error([1, 0], [1])
    with pytest.raises(ValidationError):
        eval_sim.test_error([], [])


def test_one_at_a_time_error_with_identity_covariance(small_data):
    samples = fit_indep_probit(small_data, mcmc=SHORT, rng=RngStream(10))
    got = eval_sim.one_at_a_time_training_error(samples, rng=RngStream(11), eval_draws=None)
    gen = RngStream(11).generator()
    tr = small_data.train_idx
    hits = np.zeros(tr.size)
    for t in range(samples.n_draws):
        hits += (small_data.X[tr] @ samples.beta[t] + gen.standard_normal(tr.size)) > 0
    direct = float(np.mean((hits / samples.n_draws > 0.5).astype(int) != small_data.y[tr]))
    assert got == pytest.approx(direct, abs=1e-12)
    # a spatial fit pinned at kappa = 0 conditions on nothing
    spatial = build_artifacts("sglmm", small_data, fixed_kappa=0.0)
    again = eval_sim.one_at_a_time_training_error(samples, spatial, rng=RngStream(11), eval_draws=None)
    assert again == pytest.approx(direct, abs=1e-12)


def test_training_errors_on_sglm_fit(small_data):
    samples = fit_sglm(small_data, mcmc=SHORT, rng=RngStream(12))
    oaat = eval_sim.one_at_a_time_training_error(samples, rng=RngStream(13))
    joint = eval_sim.joint_training_error(samples, rng=RngStream(13))
    plug = eval_sim.posterior_mean_training_error(samples)
    assert all(0.0 <= r <= 1.0 for r in (oaat, joint, plug))
    one = dataclasses.replace(samples, beta=samples.beta[:1], gamma2=samples.gamma2[:1], z_test=samples.z_test[:1],
                              rho=samples.rho[:1], z_train=samples.z_train[:1])
    assert (eval_sim.joint_training_error(one, rng=RngStream(14))
            == eval_sim.joint_training_error(one, rng=RngStream(14)))
    with pytest.raises(ValidationError):
        eval_sim.one_at_a_time_training_error(dataclasses.replace(samples, z_train=None))


# ---------- cross-validation ----------

def test_stratified_folds_balance_classes():
    y = np.r_[np.zeros(23, dtype=int), np.ones(12, dtype=int)]
    folds = eval_sim.stratified_folds(y, 5, np.random.default_rng(0))
    for c in (0, 1):
        counts = np.bincount(folds[y == c], minlength=5)
        assert counts.max() - counts.min() <= 1


def test_kfold_tuning_picks_the_grid_minimum(small_data):
    grid = [{"lam": lam} for lam in (0.1, 0.5, 2.0)]
    best, cve = eval_sim.kfold_cv_tune("svm-linear", grid, small_data, rng=RngStream(15), workers=1)
    assert best in grid
    for point in grid:
        _, single = eval_sim.kfold_cv_tune("svm-linear", [point], small_data, rng=RngStream(15), workers=1)
        assert cve <= single
    only, _ = eval_sim.kfold_cv_tune("knn-g", [{"k": 3}], small_data, rng=RngStream(16))
    assert only == {"k": 3}
    with pytest.raises(ValidationError):
        eval_sim.kfold_cv_tune("knn-g", [], small_data)
    with pytest.raises(ValidationError):
        eval_sim.kfold_cv_tune("knn-g", [{"k": 1}], small_data, k=1)


# ---------- evaluation ----------

def test_fit_classifier_records_tuning(small_data):
    clf, meta = eval_sim.fit_classifier("knn-g", small_data, _tiny_config(), rng=RngStream(17))
    assert clf.k == meta["tuned"]["k"] and 0.0 <= meta["cve"] <= 1.0
    fixed, meta = eval_sim.fit_classifier("knn-c", small_data, _tiny_config(tuning={"knn-c": {"k": 4}}))
    assert fixed.k == 4 and "cve" not in meta


def test_evaluate_fitted_without_test_sites(small_data):
    everything = small_data.with_test_mask(np.zeros(small_data.n, dtype=bool))
    clf, _ = eval_sim.fit_classifier("lda", everything, _tiny_config())
    report = eval_sim.evaluate_fitted(clf, everything)
    assert report.test_error is None and report.training_error is not None
    assert set(report.rates()) == {"training"}


def test_evaluate_bayesian_reports_three_training_rates(small_data):
    clf = BayesianClassifier("sglm", mcmc=SHORT).fit(small_data, rng=RngStream(18))
    report = eval_sim.evaluate_fitted(clf, small_data, rng=RngStream(19))
    assert set(report.rates()) == {"training_oaat", "training_joint", "training", "test"}
    assert report.n_test == small_data.n_test


def test_unfittable_classifier_is_left_out():
    d = GridDomain(6, 6)
    coords = d.coords
    y = (coords[:, 1] >= 3).astype(int)
    X = np.column_stack([np.ones(d.n), coords[:, 1] + np.random.default_rng(0).uniform(0, 0.1, d.n)])
    data = Dataset(y=y, X=X, coords=coords, test_mask=np.zeros(d.n, dtype=bool), domain=d)
    reports = eval_sim.evaluate_classifiers(data, ["glm-logit", "lda"], _tiny_config(), rng=RngStream(20))
    assert [r.classifier for r in reports] == ["lda"]


def test_replicate_study_is_reproducible():
    cfg = _tiny_config()
    args = (["Simple1"], [0.5], 2, ["lda", "knn-g"], cfg)
    first = eval_sim.run_replicate_study(*args, seed=21, workers=1)
    assert [(r.classifier, r.dataset) for r in first] == [("lda", "1"), ("knn-g", "1"), ("lda", "2"), ("knn-g", "2")]
    again = eval_sim.run_replicate_study(*args, seed=21, workers=2)
    assert [r.rates() for r in again] == [r.rates() for r in first]
    assert all(r.linear_component == "Simple1" and r.kappa == 0.5 for r in first)


# ---------- simulation studies ----------

def _study_config(**kw) -> RunConfig:
    return RunConfig(command="compare", iters=6000, burn_in=3000, eval_draws=1000, **kw)


def _replicate(component, kappa, rep, split="clustered"):
    data = eval_sim.simulate_dataset(Scenario(component, kappa, replicate_seed=rep))
    return eval_sim.apply_split(data, split, RngStream(rep, 1))


@pytest.mark.slow
def test_sglm_interval_covers_true_slope():
    cfg = _study_config()
    covered = 0
    for rep in range(20):
        data = _replicate("Simple1", 1.0, rep)
        s = fit_sglm(data, priors=cfg.prior_spec(2), mcmc=cfg.mcmc(), rng=RngStream(rep, 2))
        lo, hi = np.quantile(s.beta[:, 1], [0.05, 0.95])
        covered += lo <= -np.sqrt(2.0) <= hi
    assert covered >= 14


@pytest.mark.slow
def test_simulated_test_error_bands():
    cfg = _study_config()
    in_band = {"sglm": 0, "sglmm": 0}
    for rep in range(5):
        data = _replicate("Simple2", 1.0, rep)
        for r in eval_sim.evaluate_classifiers(data, ["sglm", "sglmm"], cfg, rng=RngStream(rep, 2)):
            in_band[r.classifier] += 0.08 <= r.test_error <= 0.28
    assert min(in_band.values()) >= 4
    weak = 0
    for rep in range(5):
        data = _replicate("Intercept", 0.25, rep)
        r = eval_sim.evaluate_classifiers(data, ["sglmm"], cfg, rng=RngStream(rep, 2))[0]
        weak += 0.25 <= r.test_error <= 0.50
    assert weak >= 4


@pytest.mark.slow
def test_joint_training_error_exceeds_one_at_a_time():
    cfg = _study_config()
    wins = 0
    for rep in range(15):
        data = _replicate("Simple1", 1.0, rep)
        s = fit_sglm(data, priors=cfg.prior_spec(2), mcmc=cfg.mcmc(), rng=RngStream(rep, 2))
        oaat = eval_sim.one_at_a_time_training_error(s, rng=RngStream(rep, 3), eval_draws=1000)
        joint = eval_sim.joint_training_error(s, rng=RngStream(rep, 3), eval_draws=1000)
        wins += joint > oaat
    assert wins >= 12


@pytest.mark.slow
def test_spatial_model_beats_independent_probit_on_clustered_split():
    cfg = _study_config()
    errors = {"sglm": [], "probit": []}
    for rep in range(5):
        data = _replicate("Confounded", 1.0, rep)
        for r in eval_sim.evaluate_classifiers(data, ["sglm", "probit"], cfg, rng=RngStream(rep, 2)):
            errors[r.classifier].append(r.test_error)
    assert np.mean(errors["probit"]) - np.mean(errors["sglm"]) >= 0.05
