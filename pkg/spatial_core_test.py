import math

import numpy as np
import pytest

from spatial_classify.data_models import CovarianceSpec, GridDomain
from spatial_classify.errors import SingularMatrixError, ValidationError
from spatial_classify.spatial_core import (
    CovarianceCache,
    LatentCovariance,
    assemble_sigma_star,
    build_grid_neighbors,
    car_dependence,
    car_precision,
    conditional_normal,
    covariance_from_spec,
    domain_from_coords,
    exponential_correlation,
    moran_operator,
    neighbors_from_adjacency,
    neighbors_from_coords,
    odd_one_out_probability,
    sameness_probability,
)

CHAIN3 = np.array([[0.0, 1.0, 0.0], [0.5, 0.0, 0.5], [0.0, 1.0, 0.0]])
PAIR = np.array([[0.0, 1.0], [1.0, 0.0]])


def _random_pd(rng, n):
    A = rng.normal(size=(n, n))
    return A @ A.T + n * np.eye(n) * 0.1


# ---------- neighborhoods ----------

def test_queen_neighbors_on_small_grid():
    nb = build_grid_neighbors(GridDomain(3, 3), "second")
    deg = nb.adjacency.sum(axis=1)
    assert deg[4] == 8  # center
    assert deg[0] == 3  # corner
    assert deg[1] == 5  # edge
    np.testing.assert_allclose(nb.weights.sum(axis=1), 1.0)
    assert np.array_equal(nb.adjacency, nb.adjacency.T)


def test_rook_neighbors_follow_given_order():
    coords = np.array([[1, 1], [0, 1], [2, 2]])
    nb = neighbors_from_coords(coords, "first")
    assert nb.adjacency[0, 1] == 1
    assert nb.adjacency[0, 2] == 0
    assert nb.weights[2].sum() == 0  # isolated


def test_domain_from_coords():
    d = domain_from_coords([[0, 0], [3, 4]])
    assert (d.rows, d.cols) == (4, 5)
    with pytest.raises(ValidationError):
        domain_from_coords([[-1, 0]])


@pytest.mark.parametrize("A", [
    np.ones((2, 3)),
    np.array([[0, 2], [2, 0]]),
    np.array([[0, 1], [0, 0]]),
    np.array([[1, 1], [1, 0]]),
])
def test_adjacency_validation(A):
    with pytest.raises(ValidationError):
        neighbors_from_adjacency(A)


# ---------- dependence ----------

def test_car_precision_inverts_dependence():
    W = build_grid_neighbors(GridDomain(5, 5)).weights
    for rho in (0.0, 0.5, 0.99):
        K = car_dependence(W, rho)
        Q = car_precision(W, rho)
        np.testing.assert_allclose(Q @ K, np.eye(25), atol=1e-8)
        np.testing.assert_allclose(K, K.T)


def test_car_rho_bounds():
    with pytest.raises(SingularMatrixError):
        car_dependence(PAIR, 1.0)
    with pytest.raises(ValidationError):
        car_precision(PAIR, -0.1)


def test_sigma_star_endpoints():
    K = car_dependence(PAIR, 0.5)
    np.testing.assert_allclose(assemble_sigma_star(K, 0.0), np.eye(2))
    np.testing.assert_allclose(assemble_sigma_star(K, 1.0, 2.0), 2.0 * K)
    with pytest.raises(ValidationError):
        assemble_sigma_star(K, 1.2)


def test_exponential_correlation():
    C = exponential_correlation([[0, 0], [0, 1], [3, 4]], theta=2.0)
    assert C[0, 0] == 1.0
    assert C[0, 1] == pytest.approx(math.exp(-0.5))
    assert C[0, 2] == pytest.approx(math.exp(-2.5))


# ---------- conditioning ----------

def test_conditional_normal_matches_schur_complement():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 7))
        S = _random_pd(rng, n)
        m = rng.normal(size=n)
        z = rng.normal(size=n - 1)
        mu, var = conditional_normal(m, S, z)
        s = S[1:, 0]
        direct_mu = m[0] + s @ np.linalg.inv(S[1:, 1:]) @ (z - m[1:])
        direct_var = S[0, 0] - s @ np.linalg.inv(S[1:, 1:]) @ s
        assert mu == pytest.approx(direct_mu, abs=1e-10)
        assert var == pytest.approx(direct_var, abs=1e-10)


def test_conditional_normal_edge_cases():
    assert conditional_normal([0.3], [[2.0]], []) == (0.3, 2.0)
    mu, var = conditional_normal([0, 0], np.eye(2), [5.0])
    assert (mu, var) == (0.0, 1.0)
    with pytest.raises(SingularMatrixError):
        conditional_normal([0, 0, 0], np.ones((3, 3)), [1.0, 1.0])
    with pytest.raises(ValidationError):
        conditional_normal([0, 0], np.eye(3), [1.0])


@pytest.mark.slow
def test_conditional_normal_monte_carlo():
    rng = np.random.default_rng(2)
    S = _random_pd(rng, 3)
    draws = rng.multivariate_normal(np.zeros(3), S, size=1_000_000)
    # condition on a thin slab around the observed value
    near = np.all(np.abs(draws[:, 1:] - [0.2, -0.1]) < 0.05, axis=1)
    mu, var = conditional_normal(np.zeros(3), S, [0.2, -0.1])
    sample = draws[near, 0]
    se = math.sqrt(var / sample.size)
    assert abs(sample.mean() - mu) < 3 * se + 0.02
    assert sample.var() == pytest.approx(var, rel=0.25)


# ---------- Moran eigenvectors ----------

@pytest.mark.parametrize("n_cov", [0, 1, 2, 3])
def test_moran_eigenvectors_orthogonal_to_design(n_cov):
    rng = np.random.default_rng(n_cov)
    d = GridDomain(10, 10)
    X = np.column_stack([np.ones(d.n)] + [rng.uniform(-0.5, 0.5, d.n) for _ in range(n_cov)])
    M, vecs, vals = moran_operator(X, build_grid_neighbors(d).adjacency, r_frac=0.1)
    assert vecs.shape == (100, 10)
    assert np.max(np.abs(X.T @ vecs)) < 1e-8
    assert np.all(np.diff(vals) <= 1e-12)
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(10), atol=1e-10)
    # leading vectors are eigenvectors of the projected operator
    np.testing.assert_allclose(M @ vecs, vecs * vals, atol=1e-8)


def test_moran_zero_fraction_and_rank_deficiency():
    d = GridDomain(4, 4)
    A = build_grid_neighbors(d).adjacency
    _, vecs, vals = moran_operator(np.ones((16, 1)), A, r_frac=0.0)
    assert vecs.shape == (16, 0) and vals.size == 0
    with pytest.raises(SingularMatrixError):
        moran_operator(np.ones((16, 2)), A)


# ---------- orthant probabilities ----------

def test_sameness_three_site_chain_formula():
    for rho, kappa in ((0.5, 1.0), (0.9, 0.5), (0.99, 0.25)):
        S = assemble_sigma_star(car_dependence(CHAIN3, rho), kappa)
        sd = np.sqrt(np.diag(S))
        R = S / np.outer(sd, sd)
        expected = 2 * (1 / 8 + sum(math.asin(R[i, j]) for i, j in ((0, 1), (0, 2), (1, 2))) / (4 * math.pi))
        assert sameness_probability(S) == pytest.approx(expected, abs=1e-4)


def test_sameness_increases_with_kappa_and_rho():
    by_kappa = [sameness_probability(assemble_sigma_star(car_dependence(PAIR, 0.9), k)) for k in (0.0, 0.5, 1.0)]
    assert by_kappa[0] == pytest.approx(0.5, abs=1e-6)
    assert by_kappa[0] < by_kappa[1] < by_kappa[2]
    by_rho = [sameness_probability(assemble_sigma_star(car_dependence(CHAIN3, r), 0.5)) for r in (0.1, 0.5, 0.9)]
    assert by_rho[0] < by_rho[1] < by_rho[2]


def test_two_site_outcomes_partition():
    S = assemble_sigma_star(car_dependence(PAIR, 0.7), 0.8)
    mean = np.array([0.3, -0.2])
    total = sameness_probability(S, mean) + odd_one_out_probability(S, 0, mean)
    assert total == pytest.approx(1.0, abs=1e-5)
    with pytest.raises(ValidationError):
        odd_one_out_probability(S, 2)


# ---------- factorization cache ----------

def _split(n, rng, n_test):
    test = np.sort(rng.choice(n, n_test, replace=False))
    return np.setdiff1d(np.arange(n), test), test


def test_precision_and_covariance_paths_agree():
    d = GridDomain(5, 5)
    W = build_grid_neighbors(d).weights
    train, test = _split(d.n, np.random.default_rng(3), 6)
    via_cov = LatentCovariance.from_covariance(car_dependence(W, 0.9), train, test)
    via_prec = LatentCovariance.from_precision(car_precision(W, 0.9), train, test)
    np.testing.assert_allclose(via_prec.precision, via_cov.precision, atol=1e-8)
    np.testing.assert_allclose(via_prec.test_map, via_cov.test_map, atol=1e-8)
    np.testing.assert_allclose(via_prec.test_var, via_cov.test_var, atol=1e-8)
    assert via_prec.logdet == pytest.approx(via_cov.logdet, abs=1e-8)


def test_site_and_loo_moments_match_conditional_normal():
    d = GridDomain(4, 4)
    sigma = assemble_sigma_star(car_dependence(build_grid_neighbors(d).weights, 0.8), 0.6)
    rng = np.random.default_rng(4)
    train, test = _split(d.n, rng, 3)
    lc = LatentCovariance.from_covariance(sigma, train, test)
    S_tt = sigma[np.ix_(train, train)]
    r = rng.normal(size=train.size)
    mus, vars_ = lc.loo_moments(r)
    for i in range(train.size):
        order = [i] + [j for j in range(train.size) if j != i]
        mu, var = conditional_normal(np.zeros(train.size), S_tt[np.ix_(order, order)], r[order[1:]])
        assert lc.site_moments(r, i) == pytest.approx((mu, var), abs=1e-10)
        assert (mus[i], vars_[i]) == pytest.approx((mu, var), abs=1e-10)
    assert lc.quad(r) == pytest.approx(r @ np.linalg.solve(S_tt, r))
    assert lc.logdet == pytest.approx(np.linalg.slogdet(S_tt)[1])


def test_latent_draw_has_training_covariance():
    sigma = assemble_sigma_star(car_dependence(CHAIN3, 0.9), 1.0)
    lc = LatentCovariance.from_covariance(sigma, np.arange(3), np.array([], dtype=int))
    rng = np.random.default_rng(5)
    draws = np.array([lc.draw(rng) for _ in range(40000)])
    np.testing.assert_allclose(np.cov(draws.T), sigma, rtol=0.05, atol=0.05)


def test_cache_reuses_and_evicts():
    d = GridDomain(4, 4)
    train, test = np.arange(12), np.arange(12, 16)
    cache = CovarianceCache(build_grid_neighbors(d).weights, train, test, maxsize=2)
    a = cache.get(0.5, 1.0)
    assert cache.get(0.5, 1.0) is a
    cache.get(0.6, 0.5)
    cache.get(0.7, 0.5)
    assert cache.misses == 3
    cache.get(0.5, 1.0)  # evicted
    assert cache.misses == 4
    np.testing.assert_allclose(cache.full_sigma(0.7, 0.0), np.eye(16))


def test_covariance_from_spec_families():
    nb = build_grid_neighbors(GridDomain(3, 3), "second")
    coords = GridDomain(3, 3).coords
    car = covariance_from_spec(CovarianceSpec("CAR", rho=0.9, kappa=0.4, gamma2=2.0), W=nb.weights)
    np.testing.assert_allclose(car, assemble_sigma_star(car_dependence(nb.weights, 0.9), 0.4, 2.0))
    expo = covariance_from_spec(CovarianceSpec("exponential", theta=1.5, kappa=1.0), coords=coords)
    np.testing.assert_allclose(expo, exponential_correlation(coords, 1.5))
    ident = covariance_from_spec(CovarianceSpec("identity", gamma2=3.0), coords=coords)
    np.testing.assert_allclose(ident, 3.0 * np.eye(9))
    with pytest.raises(ValidationError):
        covariance_from_spec(CovarianceSpec("CAR", rho=0.5))
    with pytest.raises(ValidationError):
        CovarianceSpec("CAR", rho=1.0)
