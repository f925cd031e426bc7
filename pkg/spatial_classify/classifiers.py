"""
Decision functions and the shared classification rule.

Every classifier produces a DecisionScore whose delta is the class-1 to
class-0 odds (or a monotone stand-in for it); `classify` turns it into a
label with delta > 1 meaning class 1.
"""
import logging
import math
from typing import Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.optimize import linprog
from scipy.spatial.distance import cdist
from scipy.special import expit, log_expit, log_ndtr, ndtr

from spatial_classify.data_models import (
    DecisionScore,
    DiscriminantParams,
    GlmFit,
    PosteriorSamples,
    SvmModel,
)
from spatial_classify.errors import (
    ConvergenceError,
    DegenerateResponseError,
    EmptyChainError,
    SeparationError,
    SingularMatrixError,
    ValidationError,
)
from spatial_classify.sglm_sglmm import plugin_moments

log = logging.getLogger(__name__)

LINKS = ("logit", "probit")
KERNELS = ("linear", "poly", "radial")


# ---------- classification rule ----------

def classify(score: DecisionScore, tie_rule: Optional[str] = None, rng: Optional[np.random.Generator] = None) -> int:
    rule = tie_rule or score.tie_rule
    if score.delta > 1:
        return 1
    if score.delta < 1:
        return 0
    if rule == "zero":
        return 0
    if rule == "random":
        if rng is None:
            raise ValidationError("the random tie rule needs a random generator")
        return int(rng.integers(2))
    raise ValidationError(f"unknown tie rule {rule!r}")


def score_from_p1(p1: float, source: str) -> DecisionScore:
    if not 0.0 <= p1 <= 1.0:
        raise ValidationError(f"{source}: class-1 probability {p1} outside [0, 1]")
    with np.errstate(divide="ignore"):
        delta = float(np.float64(p1) / np.float64(1.0 - p1))
    return DecisionScore(delta=delta, p1=float(p1), source=source)


def _probit_odds(eta: float) -> float:
    return float(np.exp(log_ndtr(eta) - log_ndtr(-eta)))


def _check_binary(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=int)
    if not np.all(np.isin(y, (0, 1))):
        raise ValidationError("responses must be 0 or 1")
    if y.size == 0 or y.min() == y.max():
        raise DegenerateResponseError("training responses must contain both classes")
    return y


# ---------- GLM ----------

def decision_glm(x0, beta, link: str = "logit") -> DecisionScore:
    x0, beta = np.asarray(x0, dtype=float), np.asarray(beta, dtype=float)
    if x0.shape != beta.shape:
        raise ValidationError(f"x0 has {x0.size} entries, beta has {beta.size}")
    eta = float(x0 @ beta)
    with np.errstate(over="ignore"):
        if link == "logit":
            return DecisionScore(delta=float(np.exp(eta)), p1=float(expit(eta)), source="glm-logit")
        if link == "probit":
            return DecisionScore(delta=_probit_odds(eta), p1=float(ndtr(eta)), source="glm-probit")
    raise ValidationError(f"unknown link {link!r}")


def _separated(y: np.ndarray, X: np.ndarray) -> bool:
    """Whether some direction puts every observation on its own class's side (quasi-complete separation)."""
    S = (2 * y - 1)[:, None] * X
    res = linprog(
        c=np.zeros(X.shape[1]),
        A_ub=np.vstack([-S, -S.sum(axis=0)]),
        b_ub=np.concatenate([np.zeros(X.shape[0]), [-1.0]]),
        bounds=[(None, None)] * X.shape[1],
        method="highs",
    )
    return res.status == 0


def _glm_pieces(y, X, beta, link):
    eta = X @ beta
    if link == "logit":
        mu = expit(eta)
        w = mu * (1 - mu)
        score = X.T @ (y - mu)
        dev = -2.0 * np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta))
    else:
        log_p, log_q = log_ndtr(eta), log_ndtr(-eta)
        # phi / (Phi (1 - Phi)) computed in log space
        log_phi = -0.5 * eta * eta - 0.5 * math.log(2 * math.pi)
        ratio = np.exp(log_phi - log_p - log_q)
        w = np.exp(2 * log_phi - log_p - log_q)
        score = X.T @ ((y - np.exp(log_p)) * ratio)
        dev = -2.0 * np.sum(y * log_p + (1 - y) * log_q)
    return score, (X * w[:, None]).T @ X, float(dev)


def fit_glm_mle(y, X, link: str = "logit", max_iter: int = 100, tol: float = 1e-8) -> GlmFit:
    """Maximum likelihood by Fisher scoring with step halving on the deviance."""
    if link not in LINKS:
        raise ValidationError(f"unknown link {link!r}")
    y = _check_binary(y)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] != y.size:
        raise ValidationError("X and y disagree on the number of observations")
    if _separated(y, X):
        raise SeparationError("classes are separated by the covariates; the MLE does not exist")

    beta = np.zeros(X.shape[1])
    score, info, dev = _glm_pieces(y, X, beta, link)
    for it in range(1, max_iter + 1):
        try:
            step = linalg.solve(info, score, assume_a="pos")
        except linalg.LinAlgError as e:
            raise SingularMatrixError("fit_glm_mle: information matrix is singular") from e
        for _ in range(30):
            cand = beta + step
            c_score, c_info, c_dev = _glm_pieces(y, X, cand, link)
            if c_dev <= dev + 1e-12 * abs(dev):
                break
            step = 0.5 * step
        else:
            log.warning("GLM line search exhausted at iteration %d", it)
            raise ConvergenceError("fit_glm_mle: deviance could not be decreased")
        beta, score, info, dev = cand, c_score, c_info, c_dev
        if np.linalg.norm(beta) > 1e3:
            raise SeparationError("fit_glm_mle: coefficients diverge (separation)")
        if np.max(np.abs(score)) < tol:
            cov = linalg.inv(info)
            return GlmFit(beta=beta, cov=0.5 * (cov + cov.T), link=link, iterations=it, deviance=dev)
    raise ConvergenceError(f"fit_glm_mle: no convergence after {max_iter} iterations")


# ---------- Bayesian decisions ----------

def posterior_mean_classifier(samples: PosteriorSamples, focal: Optional[int] = None, x0=None) -> DecisionScore:
    """Plug-in decision at the posterior mean of every parameter (and of the training latents for spatial fits)."""
    if samples.n_draws == 0:
        raise EmptyChainError("posterior_mean_classifier: no draws")
    if focal is None:
        if x0 is None:
            raise ValidationError("give a focal index or a covariate vector")
        if samples.model in ("sglm", "sglmm"):
            raise ValidationError("spatial posterior mean decisions need a focal index")
        return _relabel(decision_glm(x0, samples.beta.mean(axis=0), "probit"), "posterior-mean")
    mu, var = plugin_moments(samples, [focal])
    return _latent_score(float(mu[0]), float(var[0]), "posterior-mean")


def _relabel(score: DecisionScore, source: str) -> DecisionScore:
    return DecisionScore(delta=score.delta, p1=score.p1, source=source, tie_rule=score.tie_rule)


def _latent_score(mu: float, var: float, source: str) -> DecisionScore:
    if var <= 0:
        p1 = 1.0 if mu > 0 else 0.0 if mu < 0 else 0.5
        return score_from_p1(p1, source)
    t = mu / math.sqrt(var)
    return DecisionScore(delta=_probit_odds(t), p1=float(ndtr(t)), source=source)


def posterior_predictive_classifier(z0_draws=None, y0_draws=None) -> DecisionScore:
    """Fraction of draws on the class-1 side: latent draws > 0, or label draws == 1."""
    if (z0_draws is None) == (y0_draws is None):
        raise ValidationError("give exactly one of z0_draws or y0_draws")
    draws = np.asarray(z0_draws if z0_draws is not None else y0_draws, dtype=float).ravel()
    if draws.size == 0:
        raise EmptyChainError("posterior_predictive_classifier: no draws")
    hits = draws > 0 if z0_draws is not None else draws == 1
    return score_from_p1(float(hits.mean()), "posterior-predictive")


# ---------- discriminant analysis ----------

def _class_split(y, X):
    y = _check_binary(y)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.size:
        raise ValidationError("X and y disagree on the number of observations")
    groups = [X[y == 0], X[y == 1]]
    if min(g.shape[0] for g in groups) < 2:
        raise ValidationError("each class needs at least two observations")
    return y, X, groups


def _check_pd(S: np.ndarray, what: str) -> np.ndarray:
    try:
        linalg.cholesky(S, lower=True)
    except linalg.LinAlgError as e:
        raise SingularMatrixError(f"{what} covariance is singular") from e
    return S


def _pooled(groups, n):
    S = sum((g - g.mean(axis=0)).T @ (g - g.mean(axis=0)) for g in groups)
    return S / (n - 2)


def fit_lda(y, X) -> DiscriminantParams:
    y, X, groups = _class_split(y, X)
    n = y.size
    lam = _check_pd(_pooled(groups, n), "pooled")
    return DiscriminantParams("lda", groups[0].shape[0] / n, groups[1].shape[0] / n,
                              groups[0].mean(axis=0), groups[1].mean(axis=0), lam, lam)


def fit_dlda(y, X) -> DiscriminantParams:
    y, X, groups = _class_split(y, X)
    n = y.size
    lam = _check_pd(np.diag(np.diag(_pooled(groups, n))), "diagonal")
    return DiscriminantParams("dlda", groups[0].shape[0] / n, groups[1].shape[0] / n,
                              groups[0].mean(axis=0), groups[1].mean(axis=0), lam, lam)


def fit_qda(y, X) -> DiscriminantParams:
    y, X, groups = _class_split(y, X)
    n = y.size
    lams = [_check_pd(np.atleast_2d(np.cov(g, rowvar=False, ddof=1)), f"class {j}") for j, g in enumerate(groups)]
    return DiscriminantParams("qda", groups[0].shape[0] / n, groups[1].shape[0] / n,
                              groups[0].mean(axis=0), groups[1].mean(axis=0), lams[0], lams[1])


def discriminant_coefficients(params: DiscriminantParams) -> Tuple[float, np.ndarray, np.ndarray]:
    """(a0, a1, a2) with log delta = a0 + x'a1 - x'a2 x."""
    P0 = linalg.inv(params.lambda0)
    P1 = P0 if params.lambda1 is params.lambda0 else linalg.inv(params.lambda1)
    _, logdet0 = np.linalg.slogdet(params.lambda0)
    _, logdet1 = np.linalg.slogdet(params.lambda1)
    mu0, mu1 = params.mu0, params.mu1
    a0 = (math.log(params.pi1 / params.pi0) - 0.5 * logdet1 + 0.5 * logdet0
          - 0.5 * mu1 @ P1 @ mu1 + 0.5 * mu0 @ P0 @ mu0)
    a1 = P1 @ mu1 - P0 @ mu0
    a2 = 0.5 * (P1 - P0)
    return float(a0), a1, a2


def decision_da(params: DiscriminantParams, x0) -> DecisionScore:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    a0, a1, a2 = discriminant_coefficients(params)
    log_delta = a0 + x0 @ a1 - x0 @ a2 @ x0
    with np.errstate(over="ignore"):
        return DecisionScore(delta=float(np.exp(log_delta)), p1=float(expit(log_delta)), source=params.kind)


# ---------- support vector machine ----------

def standardize_fit(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1) if X.shape[0] > 1 else np.ones(X.shape[1])
    return mean, np.where(sd > 0, sd, 1.0)


def kernel_matrix(A: np.ndarray, B: np.ndarray, kernel: str, degree: int = 3, u: float = 1.0) -> np.ndarray:
    if kernel == "linear":
        return A @ B.T
    if kernel == "poly":
        return (1.0 + A @ B.T) ** degree
    if kernel == "radial":
        return np.exp(-u * cdist(A, B, "sqeuclidean"))
    raise ValidationError(f"unknown kernel {kernel!r}")


def svm_fit(y, X, kernel: str = "linear", lam: float = 1.0, degree: int = 3, u: float = 1.0,
            tol: float = 1e-3, max_iter: Optional[int] = None) -> SvmModel:
    """
    Soft-margin SVM dual by SMO with maximal-violating-pair selection.

    Works on signed multipliers a_i = y*_i zeta_i, box [0, lam] or [-lam, 0],
    and the dual gradient g = y* - K a; stops when the violation gap is below tol.
    """
    if kernel not in KERNELS:
        raise ValidationError(f"unknown kernel {kernel!r}")
    if lam <= 0:
        raise ValidationError(f"lambda must be positive, got {lam}")
    y = _check_binary(y)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    mean, sd = standardize_fit(X)
    Xs = (X - mean) / sd
    K = kernel_matrix(Xs, Xs, kernel, degree, u)
    ys = 2.0 * y - 1.0
    n = y.size
    lower = np.where(ys > 0, 0.0, -lam)
    upper = np.where(ys > 0, lam, 0.0)
    a = np.zeros(n)
    g = ys.copy()
    max_iter = max_iter or max(10000, 100 * n)
    snap = 1e-12 * lam

    for it in range(1, max_iter + 1):
        up = a < upper
        low = a > lower
        i = int(np.argmax(np.where(up, g, -np.inf)))
        j = int(np.argmin(np.where(low, g, np.inf)))
        gap = g[i] - g[j]
        if gap < tol:
            break
        curv = max(K[i, i] + K[j, j] - 2.0 * K[i, j], 1e-12)
        step = min(upper[i] - a[i], a[j] - lower[j], gap / curv)
        a[i] += step
        a[j] -= step
        for k in (i, j):
            if abs(a[k] - upper[k]) < snap:
                a[k] = upper[k]
            elif abs(a[k] - lower[k]) < snap:
                a[k] = lower[k]
        g -= step * (K[:, i] - K[:, j])
    else:
        raise ConvergenceError(f"svm_fit: no convergence after {max_iter} iterations")

    free = (a > lower + snap) & (a < upper - snap)
    if free.any():
        beta0 = float(g[free].mean())
    else:
        up, low = a < upper, a > lower
        beta0 = 0.5 * (float(np.max(g[up])) + float(np.min(g[low])))
    zeta = a * ys
    support = np.flatnonzero(zeta > snap)
    log.debug("svm %s lam=%g: %d iterations, %d support vectors", kernel, lam, it, support.size)
    return SvmModel(kernel=kernel, lam=lam, zeta=zeta, beta0=beta0, support_indices=support, y_star=ys,
                    X_train=Xs, x_mean=mean, x_sd=sd, degree=degree, u=u, iterations=it)


def svm_decision_values(model: SvmModel, X0) -> np.ndarray:
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    Xs = (X0 - model.x_mean) / model.x_sd
    s = model.support_indices
    K = kernel_matrix(Xs, model.X_train[s], model.kernel, model.degree, model.u)
    return K @ (model.zeta[s] * model.y_star[s]) + model.beta0


def svm_decision(model: SvmModel, x0) -> DecisionScore:
    f = float(svm_decision_values(model, np.atleast_1d(x0)[None, :])[0])
    with np.errstate(over="ignore"):
        return DecisionScore(delta=float(np.exp(f)), p1=None, source=f"svm-{model.kernel}")


def svm_dual_objective(model: SvmModel) -> float:
    a = model.zeta * model.y_star
    K = kernel_matrix(model.X_train, model.X_train, model.kernel, model.degree, model.u)
    return float(model.zeta.sum() - 0.5 * a @ K @ a)


# ---------- nearest neighbours ----------

def knn_deltas(X0, X_train, y_train, k: int) -> np.ndarray:
    """2 x (mean label of the k nearest training points) per row of X0; equal distances rank by index."""
    X_train = np.atleast_2d(np.asarray(X_train, dtype=float))
    y_train = np.asarray(y_train, dtype=float)
    if not 1 <= k <= y_train.size:
        raise ValidationError(f"k must lie in [1, {y_train.size}], got {k}")
    D = cdist(np.atleast_2d(np.asarray(X0, dtype=float)), X_train)
    nearest = np.argsort(D, axis=1, kind="stable")[:, :k]
    return 2.0 * y_train[nearest].mean(axis=1)


def knn_c(x0, X_train, y_train, k: int) -> DecisionScore:
    """kNN in covariate space, standardized by the training mean and sd."""
    X_train = np.atleast_2d(np.asarray(X_train, dtype=float))
    mean, sd = standardize_fit(X_train)
    x0 = (np.atleast_1d(np.asarray(x0, dtype=float)) - mean) / sd
    delta = knn_deltas(x0[None, :], (X_train - mean) / sd, y_train, k)[0]
    return DecisionScore(delta=float(delta), p1=None, source="knn-c", tie_rule="random")


def knn_g(s0, coords_train, y_train, k: int) -> DecisionScore:
    """kNN in geographic space."""
    delta = knn_deltas(np.atleast_1d(np.asarray(s0, dtype=float))[None, :], coords_train, y_train, k)[0]
    return DecisionScore(delta=float(delta), p1=None, source="knn-g", tie_rule="random")
