"""
Spatial discriminant classifiers that use the spatial structure of the
covariates: neighbor-augmented LDA (Switzer), window-weighted Gaussian
scores (Mardia), location-regression LDA (Spatial LDA) and the
homogeneous-neighborhood Bayesian classifier (Press), plus the variogram
fit they use for spatial ranges.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.optimize import curve_fit
from scipy.spatial.distance import pdist
from scipy.special import expit
from tqdm import trange

from spatial_classify.classifiers import decision_da, fit_lda, score_from_p1
from spatial_classify.data_models import (
    DecisionScore,
    DiscriminantParams,
    MardiaParams,
    MetropolisState,
    PressModel,
    SpatialLdaParams,
)
from spatial_classify.errors import (
    DegenerateVariogramError,
    SingularMatrixError,
    ValidationError,
)
from spatial_classify.sampler import (
    as_generator,
    geweke_flags,
    inv_wishart_sample,
    mvn_sample,
    rw_metropolis_step,
)
from spatial_classify.spatial_core import QUEEN_OFFSETS, exponential_correlation

log = logging.getLogger(__name__)

THETA_MIN, THETA_MAX = 0.1, 20.0
DEFAULT_THETA = 0.1
PRESS_MU_VAR = 1e4
PRESS_IW_DF = 5.0


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def _class_rows(y, X, coords):
    y = np.asarray(y, dtype=int)
    X, coords = _as_matrix(X), np.asarray(coords, dtype=float).reshape(-1, 2)
    out = []
    for j in (0, 1):
        rows = y == j
        if rows.sum() < 2:
            raise ValidationError(f"class {j} needs at least two training sites")
        out.append((X[rows], coords[rows]))
    return out


def site_lookup(coords) -> Dict[Tuple[int, int], int]:
    return {(int(r), int(c)): i for i, (r, c) in enumerate(np.asarray(coords, dtype=int).reshape(-1, 2))}


# ---------- variogram ----------

def _exponential_variogram(d, c, theta):
    return c * (1.0 - np.exp(-d / theta))


def variogram_fit(values, coords, n_bins: int = 10) -> float:
    """Exponential range fitted to the binned empirical semivariogram, clamped to [0.1, 20]."""
    values = np.asarray(values, dtype=float).ravel()
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    if values.size < 20:
        raise ValidationError(f"variogram_fit needs at least 20 locations, got {values.size}")
    if np.ptp(values) == 0:
        raise DegenerateVariogramError("variogram_fit: covariate is constant")
    d = pdist(coords)
    semi = 0.5 * pdist(values[:, None], "sqeuclidean")
    edges = np.linspace(0.0, 0.5 * d.max(), n_bins + 1)
    which = np.digitize(d, edges[1:], right=True)
    centers, gammas = [], []
    for b in range(n_bins):
        sel = which == b
        if sel.any():
            centers.append(d[sel].mean())
            gammas.append(semi[sel].mean())
    centers, gammas = np.asarray(centers), np.asarray(gammas)
    try:
        (c, theta), _ = curve_fit(
            _exponential_variogram, centers, gammas,
            p0=[gammas.max(), max(centers.max() / 3.0, 1.0)],
            bounds=([0.0, 1e-3], [np.inf, 1e3]),
        )
    except (RuntimeError, ValueError) as e:
        log.warning("variogram fit failed (%s); using the upper range bound", e)
        theta = THETA_MAX
    return float(np.clip(theta, THETA_MIN, THETA_MAX))


def class_theta(X, coords) -> float:
    """Mean variogram range over covariate columns; falls back to 0.1 when no fit is possible."""
    X = _as_matrix(X)
    fits = []
    for col in X.T:
        try:
            fits.append(variogram_fit(col, coords))
        except (DegenerateVariogramError, ValidationError) as e:
            log.warning("variogram unavailable (%s); theta defaults to %.1f", e, DEFAULT_THETA)
            fits.append(DEFAULT_THETA)
    return float(np.mean(fits))


def _gls_pieces(K: np.ndarray):
    try:
        L = linalg.cholesky(K, lower=True)
    except linalg.LinAlgError as e:
        raise SingularMatrixError("spatial correlation matrix is not positive definite") from e
    return L


def _k_inv(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    return linalg.cho_solve((L, True), B)


# ---------- Switzer ----------

def switzer_augment(X, W) -> np.ndarray:
    """[X, W X]: covariates next to their neighbor means."""
    X = _as_matrix(X)
    return np.hstack([X, np.asarray(W) @ X])


def switzer_fit(y_train, X_all, W, train_idx) -> Tuple[DiscriminantParams, DiscriminantParams]:
    """LDA on neighbor-augmented covariates, plus plain LDA for sites without neighbors."""
    X_all = _as_matrix(X_all)
    aug = switzer_augment(X_all, W)[train_idx]
    return fit_lda(y_train, aug), fit_lda(y_train, X_all[train_idx])


def switzer_decision(x0, neighbor_covariates, lda_params_star: DiscriminantParams,
                     fallback: Optional[DiscriminantParams] = None) -> DecisionScore:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    nb = np.asarray(neighbor_covariates, dtype=float).reshape(-1, x0.size)
    if nb.shape[0] == 0:
        if fallback is None:
            raise ValidationError("isolated location and no plain LDA fit to fall back on")
        log.warning("location has no neighbors; Switzer falls back to LDA")
        s = decision_da(fallback, x0)
        return DecisionScore(delta=s.delta, p1=s.p1, source="switzer:lda-fallback")
    s = decision_da(lda_params_star, np.concatenate([x0, nb.mean(axis=0)]))
    return DecisionScore(delta=s.delta, p1=s.p1, source="switzer")


# ---------- Mardia ----------

def _window_offsets(radius: int) -> List[Tuple[int, int]]:
    if radius == 1:
        return [(0, 0)] + list(QUEEN_OFFSETS)
    side = range(-radius, radius + 1)
    return [(0, 0)] + [(dr, dc) for dr in side for dc in side if (dr, dc) != (0, 0)]


def window_covariates(focal_rc, lookup: Dict[Tuple[int, int], int], X_all, fill, radius: int = 1) -> np.ndarray:
    """Focal row first, then window cells in row-major order; cells without data get `fill`."""
    X_all = _as_matrix(X_all)
    r, c = int(focal_rc[0]), int(focal_rc[1])
    rows = []
    for dr, dc in _window_offsets(radius):
        i = lookup.get((r + dr, c + dc))
        rows.append(X_all[i] if i is not None else fill)
    return np.vstack(rows)


def _mardia_class(X, coords, theta, identity):
    n = X.shape[0]
    L = _gls_pieces(np.eye(n) if identity else exponential_correlation(coords, theta))
    ones = np.ones(n)
    Ki1 = _k_inv(L, ones)
    mu = Ki1 @ X / (ones @ Ki1)
    R = X - mu
    return mu, R.T @ _k_inv(L, R)


def mardia_fit(y, X, coords, shared_cov: bool = False, force_identity: bool = False,
               window_radius: int = 1) -> MardiaParams:
    y = np.asarray(y, dtype=int)
    X = _as_matrix(X)
    groups = _class_rows(y, X, coords)
    if shared_cov:
        thetas = [class_theta(X, coords)] * 2
    else:
        thetas = [class_theta(Xj, cj) for Xj, cj in groups]
    mus, scatters = [], []
    for (Xj, cj), th in zip(groups, thetas):
        mu, S = _mardia_class(Xj, cj, th, force_identity)
        mus.append(mu)
        scatters.append(S)
    n_j = np.array([g[0].shape[0] for g in groups], dtype=float)
    if shared_cov:
        pooled = (scatters[0] + scatters[1]) / n_j.sum()
        lambdas = [pooled, pooled]
    else:
        lambdas = [scatters[j] / n_j[j] for j in (0, 1)]
    for lam in lambdas:
        try:
            linalg.cholesky(lam, lower=True)
        except linalg.LinAlgError as e:
            raise SingularMatrixError("Mardia class covariance is singular") from e
    return MardiaParams(mu=np.vstack(mus), lambdas=np.stack(lambdas), thetas=np.array(thetas),
                        pi=n_j / n_j.sum(), fill=X.mean(axis=0), window_radius=window_radius,
                        identity=force_identity)


def mardia_scores(params: MardiaParams, X_star) -> np.ndarray:
    """S_0, S_1 for a window of covariates (focal row first)."""
    X_star = _as_matrix(X_star)
    m, ell = X_star.shape
    offsets = np.asarray(_window_offsets(params.window_radius)[:m], dtype=float)
    S = np.empty(2)
    for j in (0, 1):
        K0 = np.eye(m) if params.identity else exponential_correlation(offsets, params.thetas[j])
        G = np.ones(m) @ K0 @ X_star
        psi2 = float(np.ones(m) @ K0 @ np.ones(m))
        lam = params.lambdas[j]
        _, logdet = np.linalg.slogdet(lam)
        resid = G - psi2 * params.mu[j]
        S[j] = (math.log(params.pi[j]) - 0.5 * m * logdet + 0.5 * ell * m * math.log(psi2)
                - resid @ linalg.solve(lam, resid, assume_a="pos") / (2.0 * psi2))
    return S


def mardia_decision(params: MardiaParams, X_star) -> DecisionScore:
    """delta = exp(S_1 - S_0): class 1 exactly when S_1 > S_0."""
    S = mardia_scores(params, X_star)
    with np.errstate(over="ignore"):
        return DecisionScore(delta=float(np.exp(S[1] - S[0])), p1=None, source="mardia")


# ---------- Spatial LDA ----------

def spatial_lda_basis(coords, u_basis: str, rows: int, cols: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    ones = np.ones((coords.shape[0], 1))
    if u_basis == "intercept":
        return ones
    if u_basis == "coords":
        scaled = coords / np.array([max(rows - 1, 1), max(cols - 1, 1)], dtype=float)
        return np.hstack([ones, scaled])
    raise ValidationError(f"unknown regressor basis {u_basis!r}")


def spatial_lda_fit(y, X, coords, u_basis: str = "coords", rows: Optional[int] = None,
                    cols: Optional[int] = None, force_identity: bool = False) -> SpatialLdaParams:
    y = np.asarray(y, dtype=int)
    X = _as_matrix(X)
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    rows = rows or int(coords[:, 0].max()) + 1
    cols = cols or int(coords[:, 1].max()) + 1
    groups = _class_rows(y, X, coords)
    Bs, thetas, scatter = [], [], np.zeros((X.shape[1], X.shape[1]))
    for Xj, cj in groups:
        th = DEFAULT_THETA if force_identity else class_theta(Xj, cj)
        L = _gls_pieces(np.eye(Xj.shape[0]) if force_identity else exponential_correlation(cj, th))
        U = spatial_lda_basis(cj, u_basis, rows, cols)
        KiU = _k_inv(L, U)
        try:
            B = linalg.solve(U.T @ KiU, KiU.T @ Xj, assume_a="pos")
        except linalg.LinAlgError as e:
            raise SingularMatrixError("Spatial LDA: U'K^-1U is singular") from e
        R = Xj - U @ B
        scatter += R.T @ _k_inv(L, R)
        Bs.append(B)
        thetas.append(th)
    n = y.size
    return SpatialLdaParams(B0=Bs[0], B1=Bs[1], sigma=scatter / n, theta0=thetas[0], theta1=thetas[1],
                            pi0=float(np.mean(y == 0)), pi1=float(np.mean(y == 1)),
                            u_basis=u_basis, rows=rows, cols=cols)


def spatial_lda_decision(params: SpatialLdaParams, x0, u0) -> DecisionScore:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    u0 = np.atleast_1d(np.asarray(u0, dtype=float))
    mu0, mu1 = params.B0.T @ u0, params.B1.T @ u0
    diff = linalg.solve(params.sigma, mu1 - mu0, assume_a="pos")
    log_delta = (x0 - 0.5 * (mu1 + mu0)) @ diff + math.log(params.pi1 / params.pi0)
    with np.errstate(over="ignore"):
        return DecisionScore(delta=float(np.exp(log_delta)), p1=float(expit(log_delta)), source="spatial-lda")


# ---------- Press ----------

def kronecker_logpdf(X, mu, K, lam) -> np.ndarray:
    """
    log N(vec(X) | 1 (x) mu, K (x) lam) with rows of X stacked site by site.

    mu, K and lam may carry a leading batch axis of draws.
    """
    X = _as_matrix(X)
    m, ell = X.shape
    mu, K, lam = np.asarray(mu, dtype=float), np.asarray(K, dtype=float), np.asarray(lam, dtype=float)
    batched = mu.ndim == 2
    if not batched:
        mu, K, lam = mu[None], K[None], lam[None]
    Lk = np.linalg.cholesky(K)
    Ll = np.linalg.cholesky(lam)
    R = X[None] - mu[:, None, :]  # (T, m, ell)
    A = np.linalg.solve(Lk, R)  # Lk^-1 R
    B = np.linalg.solve(Ll, np.swapaxes(A, 1, 2))  # Ll^-1 (Lk^-1 R)'
    quad = np.sum(B * B, axis=(1, 2))
    logdet_k = 2.0 * np.sum(np.log(np.diagonal(Lk, axis1=1, axis2=2)), axis=1)
    logdet_l = 2.0 * np.sum(np.log(np.diagonal(Ll, axis1=1, axis2=2)), axis=1)
    out = -0.5 * (m * ell * math.log(2 * math.pi) + ell * logdet_k + m * logdet_l + quad)
    return out if batched else out[0]


def _press_chain(X, coords, iters, burn_in, theta_sd, identity, rng, progress, label):
    n, ell = X.shape
    ones = np.ones(n)
    prior_prec = np.eye(ell) / PRESS_MU_VAR

    def corr_chol(theta):
        return _gls_pieces(np.eye(n) if identity else exponential_correlation(coords, theta))

    def loglik(theta, mu, lam):
        try:
            L = corr_chol(theta)
        except SingularMatrixError:
            return -np.inf
        return float(kronecker_logpdf(X, mu, L @ L.T, lam))

    mu = X.mean(axis=0)
    lam = np.atleast_2d(np.cov(X, rowvar=False)) if n > ell else np.eye(ell)
    theta = MetropolisState(1.0, theta_sd)
    L = corr_chol(theta.current)
    keep = iters - burn_in
    mus, thetas, lams = np.empty((keep, ell)), np.empty(keep), np.empty((keep, ell, ell))
    for it in trange(iters, desc=f"press {label}", disable=not progress, leave=False):
        lam_inv = linalg.inv(lam)
        Ki1 = _k_inv(L, ones)
        prec = float(ones @ Ki1) * lam_inv + prior_prec
        cov = linalg.inv(prec)
        mu = mvn_sample(cov @ lam_inv @ (X.T @ Ki1), 0.5 * (cov + cov.T), rng)
        R = X - mu
        lam = inv_wishart_sample(PRESS_IW_DF + n, np.eye(ell) + R.T @ _k_inv(L, R), rng)
        if not identity:
            theta = rw_metropolis_step(theta, lambda t: loglik(t, mu, lam), 0.0, THETA_MAX, rng)
            L = corr_chol(theta.current)
        if it >= burn_in:
            k = it - burn_in
            mus[k], thetas[k], lams[k] = mu, theta.current, lam
    log.info("press class %s: theta acceptance %.2f", label, theta.acceptance_rate)
    return mus, thetas, lams


def _gaussian_logpdf_sites(X, mus, lams) -> np.ndarray:
    """(T, n) log densities of each site row under each draw."""
    L = np.linalg.cholesky(lams)  # (T, l, l)
    R = X[None] - mus[:, None, :]
    Z = np.linalg.solve(L, np.swapaxes(R, 1, 2))  # (T, l, n)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    ell = X.shape[1]
    return -0.5 * (ell * math.log(2 * math.pi) + logdet[:, None] + np.sum(Z * Z, axis=1))


def press_fit(y, X, coords, X_all, rng=None, iters: int = 2000, burn_in: int = 1000,
              theta_sd: float = 0.5, force_identity: bool = False, pooled: bool = False,
              progress: bool = False) -> PressModel:
    """
    Per-class posterior draws of (mu, theta, Lambda), then preclassification of every site.

    With `pooled` a single chain is run on all training rows and both classes
    share its draws, so class densities cancel and only pi separates them.
    """
    if not 0 <= burn_in < iters:
        raise ValidationError(f"burn_in must lie in [0, iters), got {burn_in}")
    y = np.asarray(y, dtype=int)
    X = _as_matrix(X)
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    gen, _ = as_generator(rng)
    seeds = gen.integers(2 ** 63, size=2)
    if pooled:
        if not (np.any(y == 0) and np.any(y == 1)):
            raise ValidationError("pooled Press fit needs training sites of both classes")
        shared = _press_chain(X, coords, iters, burn_in, theta_sd, force_identity,
                              np.random.default_rng(int(seeds[0])), progress, "pooled")
        chains = [shared, shared]
    else:
        groups = _class_rows(y, X, coords)
        with ThreadPoolExecutor(max_workers=2) as pool:
            futures = [
                pool.submit(_press_chain, Xj, cj, iters, burn_in, theta_sd, force_identity,
                            np.random.default_rng(int(seeds[j])), progress, str(j))
                for j, (Xj, cj) in enumerate(groups)
            ]
            chains = [f.result() for f in futures]
    model = PressModel(
        mu=[c[0] for c in chains], theta=[c[1] for c in chains], lambdas=[c[2] for c in chains],
        pi=np.array([np.mean(y == 0), np.mean(y == 1)]), preclass=np.zeros(0, dtype=int),
        pooled=pooled, identity=force_identity)
    diag = {}
    for j in ((0,) if pooled else (0, 1)):
        for k in range(X.shape[1]):
            diag[f"mu{j}_{k}"] = model.mu[j][:, k]
        if not force_identity:
            diag[f"theta{j}"] = model.theta[j]
    model.geweke, model.flagged = geweke_flags(diag)
    model.preclass = press_preclassify(model, X_all)
    return model


def press_preclassify(model: PressModel, x0) -> np.ndarray:
    """Majority vote over draws of which class density is larger at each site; ties go to class 0."""
    X0 = np.asarray(x0, dtype=float).reshape(-1, model.mu[0].shape[1])
    votes = (_gaussian_logpdf_sites(X0, model.mu[1], model.lambdas[1])
             > _gaussian_logpdf_sites(X0, model.mu[0], model.lambdas[0]))
    return (votes.mean(axis=0) > 0.5).astype(int)


def directional_blocks(focal_rc) -> Dict[str, List[Tuple[int, int]]]:
    """Eight cells of the 3x3 block on each side of the focal cell, focal excluded."""
    r, c = int(focal_rc[0]), int(focal_rc[1])
    spans = {
        "north": (range(r - 2, r + 1), range(c - 1, c + 2)),
        "south": (range(r, r + 3), range(c - 1, c + 2)),
        "east": (range(r - 1, r + 2), range(c, c + 3)),
        "west": (range(r - 1, r + 2), range(c - 2, c + 1)),
    }
    return {name: [(i, j) for i in rows for j in cols if (i, j) != (r, c)] for name, (rows, cols) in spans.items()}


def press_neighborhood(focal_rc, lookup: Dict[Tuple[int, int], int], preclass: np.ndarray, j: Optional[int],
                       rng: np.random.Generator) -> List[int]:
    """
    Sites pre-classified to j in the direction holding the most of them (random among ties).
    j=None counts every site in the block whatever its class.
    """
    members = {}
    for name, cells in directional_blocks(focal_rc).items():
        idx = [lookup[cell] for cell in cells if cell in lookup]
        members[name] = [i for i in idx if j is None or preclass[i] == j]
    best = max(len(v) for v in members.values())
    names = [k for k, v in members.items() if len(v) == best]
    return members[names[int(rng.integers(len(names)))]]


def press_classify(model: PressModel, focal: int, all_coords, all_covariates, rng=None) -> DecisionScore:
    """Posterior predictive vote of pi_j f(X0_j | mu_j, theta_j, Lambda_j) over the retained draws."""
    gen, _ = as_generator(rng)
    coords = np.asarray(all_coords, dtype=int).reshape(-1, 2)
    X_all = _as_matrix(all_covariates)
    if not 0 <= focal < coords.shape[0]:
        raise ValidationError(f"focal index {focal} out of range")
    lookup = site_lookup(coords)
    log_delta = []
    shared_nb = press_neighborhood(coords[focal], lookup, model.preclass, None, gen) if model.pooled else None
    for j in (0, 1):
        nb = shared_nb if model.pooled else press_neighborhood(coords[focal], lookup, model.preclass, j, gen)
        sites = [focal] + nb
        Xj = X_all[sites]
        T = model.mu[j].shape[0]
        if model.identity:
            K = np.broadcast_to(np.eye(len(sites)), (T, len(sites), len(sites)))
        else:
            K = np.stack([exponential_correlation(coords[sites], th) for th in model.theta[j]])
        log_delta.append(math.log(model.pi[j]) + kronecker_logpdf(Xj, model.mu[j], K, model.lambdas[j]))
    return score_from_p1(float(np.mean(log_delta[1] > log_delta[0])), "press")
