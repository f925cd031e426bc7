import math

import numpy as np
import pytest
from scipy import optimize, stats
from scipy.special import expit, ndtr

from spatial_classify.classifiers import (
    classify,
    decision_da,
    decision_glm,
    discriminant_coefficients,
    fit_dlda,
    fit_glm_mle,
    fit_lda,
    fit_qda,
    kernel_matrix,
    knn_c,
    knn_deltas,
    knn_g,
    posterior_mean_classifier,
    posterior_predictive_classifier,
    score_from_p1,
    svm_decision,
    svm_decision_values,
    svm_dual_objective,
    svm_fit,
)
from spatial_classify.data_models import DecisionScore, DiscriminantParams, PosteriorSamples
from spatial_classify.errors import (
    DegenerateResponseError,
    EmptyChainError,
    SeparationError,
    SingularMatrixError,
    ValidationError,
)


def _overlapping(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    y = (rng.random(n) < expit(0.5 + 1.2 * x)).astype(int)
    return y, np.column_stack([np.ones(n), x])


def _two_gaussians(n=150, seed=1):
    rng = np.random.default_rng(seed)
    X0 = rng.multivariate_normal([0.0, 0.0], [[1.0, 0.3], [0.3, 1.0]], size=n)
    X1 = rng.multivariate_normal([1.5, 1.0], [[1.5, -0.2], [-0.2, 0.7]], size=n)
    return np.r_[np.zeros(n, dtype=int), np.ones(n, dtype=int)], np.vstack([X0, X1])


# ---------- classification rule ----------

def test_classify_thresholds_at_one():
    assert classify(DecisionScore(1.5, None, "t")) == 1
    assert classify(DecisionScore(0.2, None, "t")) == 0
    assert classify(DecisionScore(1.0, None, "t")) == 0
    assert classify(DecisionScore(math.inf, 1.0, "t")) == 1


def test_random_tie_rule_uses_generator():
    tie = DecisionScore(1.0, None, "t", tie_rule="random")
    rng = np.random.default_rng(0)
    labels = [classify(tie, rng=rng) for _ in range(400)]
    assert 0.4 < np.mean(labels) < 0.6
    with pytest.raises(ValidationError):
        classify(tie)
    with pytest.raises(ValidationError):
        classify(DecisionScore(1.0, None, "t"), tie_rule="coin")


def test_score_from_p1():
    assert score_from_p1(0.75, "x").delta == pytest.approx(3.0)
    assert score_from_p1(1.0, "x").delta == math.inf
    assert score_from_p1(0.0, "x").delta == 0.0
    with pytest.raises(ValidationError):
        score_from_p1(1.2, "x")


def test_decision_score_rejects_nan_and_negative():
    with pytest.raises(ValidationError):
        DecisionScore(float("nan"), None, "t")
    with pytest.raises(ValidationError):
        DecisionScore(-0.1, None, "t")


# ---------- GLM ----------

def test_glm_decisions():
    x0, beta = np.array([1.0, 2.0]), np.array([-0.5, 0.4])
    logit = decision_glm(x0, beta, "logit")
    assert logit.delta == pytest.approx(math.exp(0.3))
    probit = decision_glm(x0, beta, "probit")
    assert probit.delta == pytest.approx(ndtr(0.3) / ndtr(-0.3))
    assert probit.p1 == pytest.approx(ndtr(0.3))
    with pytest.raises(ValidationError):
        decision_glm(x0, beta[:1])
    with pytest.raises(ValidationError):
        decision_glm(x0, beta, "cloglog")


@pytest.mark.parametrize("link", ["logit", "probit"])
def test_glm_mle_solves_score_equations(link):
    y, X = _overlapping()
    fit = fit_glm_mle(y, X, link)
    eta = X @ fit.beta
    if link == "logit":
        score = X.T @ (y - expit(eta))
    else:
        p = ndtr(eta)
        score = X.T @ ((y - p) * stats.norm.pdf(eta) / (p * (1 - p)))
    np.testing.assert_allclose(score, 0.0, atol=1e-6)
    assert fit.beta[1] > 0
    assert np.all(fit.se > 0)
    np.testing.assert_allclose(fit.cov, fit.cov.T)


def test_glm_mle_detects_separation_and_degenerate_responses():
    x = np.linspace(-1, 1, 20)
    X = np.column_stack([np.ones(20), x])
    with pytest.raises(SeparationError):
        fit_glm_mle((x > 0).astype(int), X)
    with pytest.raises(DegenerateResponseError):
        fit_glm_mle(np.zeros(20, dtype=int), X)
    with pytest.raises(ValidationError):
        fit_glm_mle(np.full(20, 2), X)


# ---------- Bayesian decisions ----------

def test_posterior_predictive_fractions():
    s = posterior_predictive_classifier(z0_draws=[0.5, -0.1, 2.0, 0.3])
    assert s.p1 == 0.75 and s.delta == pytest.approx(3.0)
    assert posterior_predictive_classifier(y0_draws=[0, 0, 1, 0]).p1 == 0.25
    assert posterior_predictive_classifier(z0_draws=[1.0, 2.0]).delta == math.inf
    with pytest.raises(ValidationError):
        posterior_predictive_classifier()
    with pytest.raises(EmptyChainError):
        posterior_predictive_classifier(z0_draws=[])


def test_posterior_mean_plug_in_for_independent_probit():
    beta = np.array([[0.2, 1.0], [0.4, -0.2], [0.0, 0.4]])
    samples = PosteriorSamples("probit", beta=beta, gamma2=np.ones(3), z_test=np.zeros((3, 0)))
    x0 = np.array([1.0, 0.5])
    s = posterior_mean_classifier(samples, x0=x0)
    assert s.p1 == pytest.approx(ndtr(0.2 + 0.5 * 0.4))
    assert s.source == "posterior-mean"
    with pytest.raises(ValidationError):
        posterior_mean_classifier(samples)
    spatial = PosteriorSamples("sglm", beta=beta, gamma2=np.ones(3), z_test=np.zeros((3, 0)))
    with pytest.raises(ValidationError):
        posterior_mean_classifier(spatial, x0=x0)
    empty = PosteriorSamples("probit", beta=np.zeros((0, 2)), gamma2=np.zeros(0), z_test=np.zeros((0, 0)))
    with pytest.raises(EmptyChainError):
        posterior_mean_classifier(empty, x0=x0)


# ---------- discriminant analysis ----------

@pytest.mark.parametrize("fit", [fit_lda, fit_dlda, fit_qda])
def test_discriminant_matches_density_ratio(fit):
    y, X = _two_gaussians()
    p = fit(y, X)
    for x0 in ([0.2, -0.4], [1.0, 1.0], [3.0, 0.5]):
        ratio = (p.pi1 * stats.multivariate_normal(p.mu1, p.lambda1).pdf(x0)
                 / (p.pi0 * stats.multivariate_normal(p.mu0, p.lambda0).pdf(x0)))
        assert decision_da(p, x0).delta == pytest.approx(ratio, rel=1e-7)


def test_discriminant_parameter_shapes():
    y, X = _two_gaussians()
    lda, dlda, qda = fit_lda(y, X), fit_dlda(y, X), fit_qda(y, X)
    assert lda.pi0 == lda.pi1 == 0.5
    np.testing.assert_allclose(lda.mu1, X[y == 1].mean(axis=0))
    assert dlda.lam[0, 1] == 0.0 and dlda.lam[0, 0] == lda.lam[0, 0]
    np.testing.assert_allclose(qda.lambda1, np.cov(X[y == 1], rowvar=False))
    assert not np.allclose(qda.lambda0, qda.lambda1)
    _, _, a2 = discriminant_coefficients(lda)
    np.testing.assert_allclose(a2, 0.0)


def test_discriminant_edge_cases():
    with pytest.raises(ValidationError):
        fit_lda([0, 1, 1], np.array([[0.0], [1.0], [2.0]]))
    with pytest.raises(SingularMatrixError):
        fit_qda([0, 0, 0, 1, 1, 1], np.column_stack([np.arange(6.0), np.arange(6.0)]))
    # one covariate passed as a flat vector
    p = fit_lda([0, 0, 0, 1, 1, 1], np.array([0.0, 0.5, 1.0, 2.0, 2.5, 3.5]))
    assert decision_da(p, 3.0).delta > 1 > decision_da(p, 0.0).delta


def test_lda_log_decision_is_affine():
    y, X = _two_gaussians()
    p = fit_lda(y, X)
    a, b = np.array([0.3, -1.0]), np.array([2.0, 0.4])
    log_d = [math.log(decision_da(p, x).delta) for x in (a, b, 0.5 * (a + b))]
    assert log_d[0] + log_d[1] == pytest.approx(2 * log_d[2], abs=1e-10)


def test_qda_with_equal_covariances_is_lda():
    y, X = _two_gaussians()
    lda = fit_lda(y, X)
    qda = DiscriminantParams("qda", lda.pi0, lda.pi1, lda.mu0, lda.mu1, lda.lam.copy(), lda.lam.copy())
    for x0 in np.random.default_rng(5).normal(size=(20, 2)):
        assert math.log(decision_da(qda, x0).delta) == pytest.approx(math.log(decision_da(lda, x0).delta),
                                                                     abs=1e-10)


def test_decision_and_probability_agree():
    rng = np.random.default_rng(6)
    y, X = _two_gaussians()
    params = [fit_lda(y, X), fit_qda(y, X)]
    for x0 in rng.normal(loc=0.8, scale=1.5, size=(200, 2)):
        scores = [decision_da(p, x0) for p in params]
        scores += [decision_glm(np.r_[1.0, x0], np.array([0.2, -0.7, 0.9]), link) for link in ("logit", "probit")]
        scores.append(score_from_p1(float(rng.random()), "draws"))
        for s in scores:
            assert (s.delta > 1) == (s.p1 > 0.5)


# ---------- support vector machine ----------

@pytest.mark.parametrize("kernel", ["linear", "poly", "radial"])
def test_svm_dual_feasibility(kernel):
    y, X = _two_gaussians(n=40, seed=2)
    lam = 2.0
    m = svm_fit(y, X, kernel, lam=lam)
    assert np.all(m.zeta >= 0) and np.all(m.zeta <= lam + 1e-12)
    assert abs(np.sum(m.zeta * m.y_star)) < 1e-8
    assert m.support_indices.size > 0
    assert svm_dual_objective(m) > 0
    train_acc = np.mean((svm_decision_values(m, X) > 0) == (y == 1))
    assert train_acc > 0.7


def test_svm_separable_data_is_fit_exactly():
    X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [3.0, 3.0], [3.0, 4.0], [4.0, 3.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    m = svm_fit(y, X, "linear", lam=100.0)
    f = svm_decision_values(m, X)
    assert np.all((f > 0) == (y == 1))
    assert svm_decision(m, [5.0, 5.0]).delta > 1
    assert svm_decision(m, [-1.0, -1.0]).delta < 1
    assert svm_decision(m, [-1.0, -1.0]).p1 is None


@pytest.mark.parametrize("kernel", ["linear", "poly", "radial"])
def test_svm_four_point_toy_has_no_training_error(kernel):
    X = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 3.0], [4.0, 3.0]])
    y = np.array([0, 0, 1, 1])
    m = svm_fit(y, X, kernel, lam=100.0)
    assert np.all((svm_decision_values(m, X) > 0) == (y == 1))


def _dual_oracle(m, lam):
    """Dual optimum by SLSQP over the same standardized kernel."""
    K = kernel_matrix(m.X_train, m.X_train, m.kernel, m.degree, m.u)
    ys = m.y_star
    Q = (ys[:, None] * ys[None, :]) * K
    res = optimize.minimize(
        lambda z: 0.5 * z @ Q @ z - z.sum(), np.zeros(ys.size), jac=lambda z: Q @ z - 1.0,
        bounds=[(0.0, lam)] * ys.size, constraints=[{"type": "eq", "fun": lambda z: z @ ys, "jac": lambda z: ys}],
        method="SLSQP", options={"ftol": 1e-12, "maxiter": 1000},
    )
    return -res.fun


@pytest.mark.parametrize("kernel", ["linear", "radial"])
def test_svm_matches_dual_oracle_on_tiny_instances(kernel):
    rng = np.random.default_rng(7)
    lam = 1.0
    for _ in range(50):
        n = int(rng.integers(4, 9))
        y = np.r_[0, 1, rng.integers(0, 2, n - 2)]
        X = rng.normal(size=(n, 2)) + y[:, None]
        m = svm_fit(y, X, kernel, lam=lam, tol=1e-5)
        assert svm_dual_objective(m) == pytest.approx(_dual_oracle(m, lam), abs=1e-3)
        # KKT: no violating pair beyond tolerance
        a = m.zeta * m.y_star
        g = m.y_star - kernel_matrix(m.X_train, m.X_train, m.kernel, m.degree, m.u) @ a
        lower = np.where(m.y_star > 0, 0.0, -lam)
        upper = np.where(m.y_star > 0, lam, 0.0)
        up, low = a < upper - 1e-12, a > lower + 1e-12
        if up.any() and low.any():
            assert g[up].max() - g[low].min() < 1e-3


def test_svm_argument_checks():
    y, X = _two_gaussians(n=10)
    with pytest.raises(ValidationError):
        svm_fit(y, X, "sigmoid")
    with pytest.raises(ValidationError):
        svm_fit(y, X, lam=0.0)


# ---------- nearest neighbours ----------

def test_knn_deltas_and_index_ties():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([0, 1, 1, 0])
    np.testing.assert_allclose(knn_deltas([[1.1]], X, y, 1), [2.0])
    np.testing.assert_allclose(knn_deltas([[1.1]], X, y, 3), [4.0 / 3.0])
    # 0.5 is equidistant from 0 and 1; the lower index wins
    np.testing.assert_allclose(knn_deltas([[0.5]], X, y, 1), [0.0])
    with pytest.raises(ValidationError):
        knn_deltas([[0.0]], X, y, 5)


def test_knn_geographic_and_covariate():
    coords = np.array([[0, 0], [0, 1], [5, 5], [5, 6]])
    y = np.array([1, 1, 0, 0])
    g = knn_g([0, 2], coords, y, 2)
    assert g.delta == 2.0 and g.tie_rule == "random"
    tie = knn_g([2, 3], coords, y, 4)
    assert tie.delta == 1.0
    X = np.array([[0.0, 100.0], [0.1, 300.0], [5.0, 200.0], [5.1, 400.0]])
    # standardizing keeps the wide second covariate from dominating
    assert knn_c([0.05, 350.0], X, y, 1).delta == 2.0
