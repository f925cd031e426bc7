"""
Data-augmentation Gibbs samplers for the probit SGLM, SGLMM, independent
probit and low-rank (Moran basis) SGLMM, plus held-out latent prediction.

Each iteration redraws a working variance from its prior, samples the
training latents from truncated normals on the working scale, draws
(working variance, coefficients) jointly from their conjugate update and
stores only the identified quantities.
"""
import logging
import math
import time
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg
from tqdm import trange

from spatial_classify.data_models import (
    Dataset,
    FitArtifacts,
    McmcSettings,
    MetropolisState,
    NeighborhoodMatrix,
    PosteriorSamples,
    PriorSpec,
)
from spatial_classify.errors import (
    DegenerateResponseError,
    SingularMatrixError,
    ValidationError,
)
from spatial_classify.sampler import (
    adapt_proposal,
    as_generator,
    geweke_flags,
    mvn_sample,
    rw_metropolis_step,
    scaled_inv_chisq_sample,
    truncated_normal_draws,
    truncated_normal_sample,
)
from spatial_classify.spatial_core import (
    CovarianceCache,
    moran_operator,
    neighbors_from_coords,
)

log = logging.getLogger(__name__)


# ---------- shared pieces ----------

def _check_training(data: Dataset, n_coef: int) -> np.ndarray:
    y_t = data.y[data.train_idx]
    if y_t.size == 0:
        raise DegenerateResponseError("no training responses to fit")
    if y_t.min() == y_t.max():
        raise DegenerateResponseError(
            f"all {y_t.size} training responses are {y_t[0]}; coefficients are not identified")
    if n_coef >= y_t.size:
        raise ValidationError(f"need more training sites ({y_t.size}) than coefficients ({n_coef})")
    return y_t


def _resolve_priors(priors: Optional[PriorSpec], n_coef: int) -> PriorSpec:
    priors = priors or PriorSpec.default(n_coef)
    if priors.beta_cov.shape[0] != n_coef:
        raise ValidationError(f"beta_cov is {priors.beta_cov.shape[0]}x{priors.beta_cov.shape[0]}, "
                              f"design has {n_coef} columns")
    return priors


def _bounds(y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.where(y == 1, 0.0, -np.inf), np.where(y == 1, np.inf, 0.0)


def _neighbors(data: Dataset, neighbors: Optional[NeighborhoodMatrix]) -> NeighborhoodMatrix:
    if neighbors is None:
        return neighbors_from_coords(data.coords, "second")
    if neighbors.n != data.n:
        raise ValidationError(f"neighborhood has {neighbors.n} sites, data has {data.n}")
    return neighbors


def _conjugate_update(zt: np.ndarray, X: np.ndarray, Q: Optional[np.ndarray], V_inv: np.ndarray,
                      a: float, b: float, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """Joint draw of (working variance, working coefficients) given working latents zt with precision Q."""
    XtQ = X.T if Q is None else X.T @ Q
    try:
        L = linalg.cholesky(XtQ @ X + V_inv, lower=True)
    except linalg.LinAlgError as e:
        raise SingularMatrixError("coefficient update: X'QX + V^-1 is not positive definite") from e
    beta_hat = linalg.cho_solve((L, True), XtQ @ zt)
    res = zt - X @ beta_hat
    rss = res @ res if Q is None else res @ Q @ res
    scale = rss + b + beta_hat @ V_inv @ beta_hat
    g2 = scale / rng.chisquare(zt.size + a)
    u = rng.standard_normal(beta_hat.size)
    beta_t = beta_hat + math.sqrt(g2) * linalg.solve_triangular(L, u, lower=True, trans="T")
    return beta_t, float(g2)


class _Store:
    """Retained draws, filled every `thin` iterations after burn-in."""

    def __init__(self, mcmc: McmcSettings, n_coef: int, n_train: int, n_test: int):
        self.mcmc = mcmc
        T = mcmc.n_retained
        self.beta = np.empty((T, n_coef))
        self.gamma2 = np.empty(T)
        self.rho = np.empty(T)
        self.kappa = np.empty(T)
        self.z_test = np.empty((T, n_test))
        self.z_train = np.empty((T, n_train)) if mcmc.store_latent else None
        self.k = 0

    def keep(self, it: int) -> bool:
        return it >= self.mcmc.burn_in and (it - self.mcmc.burn_in) % self.mcmc.thin == 0

    def add(self, beta, gamma2, z_test, z_train, rho=0.0, kappa=0.0):
        k = self.k
        self.beta[k], self.gamma2[k], self.z_test[k] = beta, gamma2, z_test
        self.rho[k], self.kappa[k] = rho, kappa
        if self.z_train is not None:
            self.z_train[k] = z_train
        self.k += 1


def _diagnostics(beta: np.ndarray, rho: Optional[np.ndarray], kappa: Optional[np.ndarray]):
    chains = {f"beta{j}": beta[:, j] for j in range(beta.shape[1])}
    if rho is not None:
        chains["rho"] = rho
    if kappa is not None:
        chains["kappa"] = kappa
    return geweke_flags(chains)


# ---------- independent latents ----------

def _run_independent(model: str, X: np.ndarray, y_t: np.ndarray, train: np.ndarray, test: np.ndarray,
                     V: np.ndarray, priors: PriorSpec, mcmc: McmcSettings, rng: np.random.Generator):
    X_t, X_0 = X[train], X[test]
    V_inv = linalg.inv(V)
    a, b = priors.gamma_df, priors.gamma_scale
    lower, upper = _bounds(y_t)
    beta = np.zeros(X.shape[1])
    store = _Store(mcmc, X.shape[1], train.size, test.size)

    for it in trange(mcmc.iters, desc=model, disable=not mcmc.progress, leave=False):
        gt = math.sqrt(scaled_inv_chisq_sample(a, b, rng))
        zt = truncated_normal_draws(gt * (X_t @ beta), gt, lower, upper, rng)
        z = zt / gt
        z0 = X_0 @ beta + rng.standard_normal(test.size)
        beta_t, g2 = _conjugate_update(zt, X_t, None, V_inv, a, b, rng)
        beta = beta_t / math.sqrt(g2)
        if store.keep(it):
            store.add(beta, g2, z0, z)
    return store


# ---------- spatial latents ----------

def _log_target(cache: CovarianceCache, rho: float, kappa: float, r: np.ndarray) -> float:
    try:
        lc = cache.get(rho, kappa)
    except SingularMatrixError:
        return -np.inf
    return -0.5 * lc.logdet - 0.5 * lc.quad(r)


def _run_spatial(model: str, X: np.ndarray, y_t: np.ndarray, train: np.ndarray, test: np.ndarray,
                 W: np.ndarray, priors: PriorSpec, mcmc: McmcSettings, rng: np.random.Generator,
                 fix_kappa: Optional[float]):
    X_t, X_0 = X[train], X[test]
    V_inv = linalg.inv(priors.beta_cov)
    a, b = priors.gamma_df, priors.gamma_scale
    rho_lo, rho_hi = priors.rho_bounds
    lower, upper = _bounds(y_t)
    cache = CovarianceCache(W, train, test)

    beta = np.zeros(X.shape[1])
    z = np.where(y_t == 1, 0.5, -0.5)
    rho = MetropolisState(0.5 * (rho_lo + rho_hi), mcmc.tau_rho)
    kappa = MetropolisState(0.5 if fix_kappa is None else fix_kappa, mcmc.tau_kappa)
    window = {"rho": (0, 0), "kappa": (0, 0)}
    store = _Store(mcmc, X.shape[1], train.size, test.size)

    for it in trange(mcmc.iters, desc=model, disable=not mcmc.progress, leave=False):
        # step 1: latents on a working scale drawn fresh from the prior
        g2t = scaled_inv_chisq_sample(a, b, rng)
        gt = math.sqrt(g2t)
        lc = cache.get(rho.current, kappa.current)
        m = X_t @ beta
        r = z - m
        for i in range(train.size):
            mu, var = lc.site_moments(r, i)
            zt = truncated_normal_sample(gt * (m[i] + mu), g2t * var, lower[i], upper[i], rng)
            r[i] = zt / gt - m[i]
        z = m + r
        if test.size:
            mean0, var0 = lc.test_moments(z, m, X_0 @ beta)
            z0 = mean0 + np.sqrt(var0) * rng.standard_normal(test.size)
        else:
            z0 = np.zeros(0)

        # step 2: conjugate (working variance, coefficients)
        beta_t, g2 = _conjugate_update(gt * z, X_t, lc.precision, V_inv, a, b, rng)
        beta = beta_t / math.sqrt(g2)
        r = z - X_t @ beta

        # steps 3-4: dependence parameters
        rho = rw_metropolis_step(rho, lambda v: _log_target(cache, v, kappa.current, r), rho_lo, rho_hi, rng)
        if fix_kappa is None:
            kappa = rw_metropolis_step(kappa, lambda v: _log_target(cache, rho.current, v, r), 0.0, 1.0, rng)

        if mcmc.adapt and it < mcmc.burn_in and (it + 1) % mcmc.adapt_every == 0:
            rho, kappa = _adapt(rho, kappa, window, fix_kappa is None)

        if store.keep(it):
            store.add(beta, g2, z0, z, rho.current, kappa.current)

    acceptance = {"rho": rho.acceptance_rate}
    proposal_sd = {"rho": rho.proposal_sd}
    if fix_kappa is None:
        acceptance["kappa"] = kappa.acceptance_rate
        proposal_sd["kappa"] = kappa.proposal_sd
    return store, acceptance, proposal_sd


def _adapt(rho: MetropolisState, kappa: MetropolisState, window: Dict[str, Tuple[int, int]], with_kappa: bool):
    out = []
    for name, state in (("rho", rho), ("kappa", kappa)):
        if name == "kappa" and not with_kappa:
            out.append(state)
            continue
        acc0, att0 = window[name]
        sd = adapt_proposal(state, state.accepts - acc0, state.attempts - att0)
        if sd != state.proposal_sd:
            log.debug("%s proposal sd %.4g -> %.4g", name, state.proposal_sd, sd)
        window[name] = (state.accepts, state.attempts)
        out.append(MetropolisState(state.current, sd, state.accepts, state.attempts))
    return out[0], out[1]


# ---------- public fits ----------

def build_artifacts(model: str, data: Dataset, neighbors: Optional[NeighborhoodMatrix] = None,
                    r_frac: float = 0.10, fixed_kappa: Optional[float] = None) -> FitArtifacts:
    """Everything needed to recompute latent moments for `model` on `data`; also used to reload saved chains."""
    if model not in FITTERS:
        raise ValidationError(f"unknown latent model {model!r}")
    common = dict(y=data.y, train_idx=data.train_idx, test_idx=data.test_idx, coords=data.coords,
                  n_covariates=data.X.shape[1])
    if model == "probit":
        return FitArtifacts(model=model, X=data.X, fixed_kappa=0.0, **common)
    nb = _neighbors(data, neighbors)
    if model == "lowrank":
        _, psi, _ = moran_operator(data.X, nb.adjacency, r_frac)
        return FitArtifacts(model=model, X=np.hstack([data.X, psi]), fixed_kappa=0.0, **common)
    if model == "sglm":
        fixed_kappa = 1.0
    return FitArtifacts(model=model, X=data.X, weights=nb.weights, fixed_kappa=fixed_kappa, **common)


def _finish(model: str, store: _Store, data: Dataset, artifacts: FitArtifacts, rng_meta: Dict,
            mcmc: McmcSettings, started: float, spatial: bool, sample_kappa: bool,
            acceptance: Optional[Dict] = None, proposal_sd: Optional[Dict] = None) -> PosteriorSamples:
    rho = store.rho if spatial else None
    kappa = store.kappa if sample_kappa else None
    zs, flagged = _diagnostics(store.beta, rho, kappa)
    wall = time.perf_counter() - started
    meta = {
        "model": model,
        "iters": mcmc.iters,
        "burn_in": mcmc.burn_in,
        "thin": mcmc.thin,
        "n_train": int(artifacts.train_idx.size),
        "n_test": int(artifacts.test_idx.size),
        "covariate_names": list(data.covariate_names),
        "fixed_kappa": artifacts.fixed_kappa,
        "acceptance": acceptance or {},
        "proposal_sd": proposal_sd or {},
        "geweke": zs,
        "geweke_flagged": flagged,
        "wall_time": wall,
        **rng_meta,
    }
    log.info("%s fit: %d iterations, %d retained, acceptance %s, %.1fs",
             model, mcmc.iters, store.k, acceptance or {}, wall)
    return PosteriorSamples(
        model=model,
        beta=store.beta,
        gamma2=store.gamma2,
        z_test=store.z_test,
        rho=rho,
        kappa=kappa,
        z_train=store.z_train,
        meta=meta,
        artifacts=artifacts,
    )


def _fit_spatial(model: str, data: Dataset, priors, mcmc, rng, neighbors, fix_kappa) -> PosteriorSamples:
    started = time.perf_counter()
    mcmc = mcmc or McmcSettings()
    priors = _resolve_priors(priors, data.X.shape[1])
    y_t = _check_training(data, data.X.shape[1])
    artifacts = build_artifacts(model, data, neighbors, fixed_kappa=fix_kappa)
    gen, rng_meta = as_generator(rng)
    log.info("%s fit: %d training sites, %d held out", model, data.n_train, data.n_test)
    store, acceptance, proposal_sd = _run_spatial(
        model, data.X, y_t, data.train_idx, data.test_idx, artifacts.weights, priors, mcmc, gen, fix_kappa)
    return _finish(model, store, data, artifacts, rng_meta, mcmc, started, True, fix_kappa is None,
                   acceptance, proposal_sd)


def fit_sglm(data: Dataset, priors: Optional[PriorSpec] = None, mcmc: Optional[McmcSettings] = None,
             rng=None, neighbors: Optional[NeighborhoodMatrix] = None) -> PosteriorSamples:
    """Probit SGLM: latent covariance is the CAR dependence alone (kappa = 1)."""
    return _fit_spatial("sglm", data, priors, mcmc, rng, neighbors, 1.0)


def fit_sglmm(data: Dataset, priors: Optional[PriorSpec] = None, mcmc: Optional[McmcSettings] = None,
              rng=None, neighbors: Optional[NeighborhoodMatrix] = None,
              fix_kappa: Optional[float] = None) -> PosteriorSamples:
    """Probit SGLMM: latent covariance (1 - kappa) I + kappa K with kappa ~ U(0, 1) unless clamped."""
    if fix_kappa is not None and not 0.0 <= fix_kappa <= 1.0:
        raise ValidationError(f"fix_kappa must lie in [0, 1], got {fix_kappa}")
    return _fit_spatial("sglmm", data, priors, mcmc, rng, neighbors, fix_kappa)


def fit_indep_probit(data: Dataset, priors: Optional[PriorSpec] = None, mcmc: Optional[McmcSettings] = None,
                     rng=None) -> PosteriorSamples:
    started = time.perf_counter()
    mcmc = mcmc or McmcSettings()
    priors = _resolve_priors(priors, data.X.shape[1])
    y_t = _check_training(data, data.X.shape[1])
    gen, rng_meta = as_generator(rng)
    store = _run_independent("probit", data.X, y_t, data.train_idx, data.test_idx,
                             priors.beta_cov, priors, mcmc, gen)
    artifacts = build_artifacts("probit", data)
    return _finish("probit", store, data, artifacts, rng_meta, mcmc, started, False, False)


def fit_lowrank(data: Dataset, priors: Optional[PriorSpec] = None,
                neighbors: Optional[NeighborhoodMatrix] = None, r_frac: float = 0.10,
                mcmc: Optional[McmcSettings] = None, rng=None) -> PosteriorSamples:
    """Independent probit on [X Psi], Psi the leading Moran eigenvectors orthogonal to X."""
    started = time.perf_counter()
    mcmc = mcmc or McmcSettings()
    n_cov = data.X.shape[1]
    priors = _resolve_priors(priors, n_cov)
    artifacts = build_artifacts("lowrank", data, neighbors, r_frac)
    X_h = artifacts.X
    n_basis = X_h.shape[1] - n_cov
    if np.linalg.matrix_rank(X_h[data.train_idx]) < X_h.shape[1]:
        raise SingularMatrixError("low-rank design [X Psi] is rank deficient on the training sites")
    V_h = priors.beta_cov
    if n_basis:
        V_h = linalg.block_diag(V_h, priors.basis_var * np.eye(n_basis))
    y_t = _check_training(data, X_h.shape[1])
    gen, rng_meta = as_generator(rng)
    log.info("lowrank fit: %d Moran basis vectors", n_basis)
    store = _run_independent("lowrank", X_h, y_t, data.train_idx, data.test_idx, V_h, priors, mcmc, gen)
    samples = _finish("lowrank", store, data, artifacts, rng_meta, mcmc, started, False, False)
    samples.meta["n_basis"] = int(n_basis)
    samples.meta["r_frac"] = r_frac
    return samples


FITTERS = {
    "sglm": fit_sglm,
    "sglmm": fit_sglmm,
    "probit": fit_indep_probit,
    "lowrank": fit_lowrank,
}


# ---------- prediction ----------

def predict_latent(samples: PosteriorSamples, focal: Union[int, Sequence[int]], rng=None) -> np.ndarray:
    """One draw of the latent at each focal location per retained iteration, given that iteration's training latents."""
    art = samples.artifacts
    if art is None:
        raise ValidationError("posterior samples carry no fit artifacts")
    if samples.n_draws == 0:
        raise ValidationError("posterior samples are empty")
    idx = np.atleast_1d(np.asarray(focal, dtype=int))
    n = art.X.shape[0]
    if np.any(idx < 0) or np.any(idx >= n):
        raise ValidationError(f"focal index out of range for {n} locations")
    gen, _ = as_generator(rng)
    means = samples.beta @ art.X[idx].T
    if not art.spatial:
        draws = means + gen.standard_normal(means.shape)
    else:
        if samples.z_train is None:
            raise ValidationError("spatial prediction needs stored training latents")
        cache = CovarianceCache(art.weights, art.train_idx, idx, maxsize=64, precision_path=False)
        X_t = art.X[art.train_idx]
        rho, kappa = samples.rho_draws(), samples.kappa_draws()
        draws = np.empty_like(means)
        for t in range(samples.n_draws):
            lc = cache.get(rho[t], kappa[t])
            mu, var = lc.test_moments(samples.z_train[t], X_t @ samples.beta[t], means[t])
            draws[t] = mu + np.sqrt(var) * gen.standard_normal(idx.size)
    return draws[:, 0] if np.ndim(focal) == 0 else draws


def plugin_moments(samples: PosteriorSamples, focal: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Latent mean and variance at focal sites with every parameter (and training latent) at its posterior mean."""
    art = samples.artifacts
    if art is None:
        raise ValidationError("posterior samples carry no fit artifacts")
    idx = np.asarray(focal, dtype=int)
    beta = samples.beta.mean(axis=0)
    mean = art.X[idx] @ beta
    if not art.spatial:
        return mean, np.ones(idx.size)
    if samples.z_train is None:
        raise ValidationError("spatial plug-in decisions need stored training latents")
    cache = CovarianceCache(art.weights, art.train_idx, idx, precision_path=False)
    lc = cache.get(float(samples.rho_draws().mean()), float(samples.kappa_draws().mean()))
    return lc.test_moments(samples.z_train.mean(axis=0), art.X[art.train_idx] @ beta, mean)


# ---------- summaries ----------

def summarize_posterior(samples: PosteriorSamples) -> pd.DataFrame:
    """Mean, sd and 90% equal-tailed interval per scalar parameter."""
    names = samples.meta.get("covariate_names") or []
    cols = {"beta0": samples.beta[:, 0]}
    for j in range(1, samples.beta.shape[1]):
        label = names[j - 1] if j - 1 < len(names) else f"psi{j - len(names)}"
        cols[f"beta_{label}"] = samples.beta[:, j]
    if samples.rho is not None:
        cols["rho"] = samples.rho
    if samples.kappa is not None:
        cols["kappa"] = samples.kappa
    cols["gamma2"] = samples.gamma2
    frame = pd.DataFrame(cols)
    return pd.DataFrame({
        "mean": frame.mean(),
        "sd": frame.std(ddof=1),
        "q05": frame.quantile(0.05),
        "q95": frame.quantile(0.95),
    })


def prior_predictive_check(X: np.ndarray, priors: Optional[PriorSpec] = None, n_rep: int = 2000,
                           rng=None) -> Dict[str, np.ndarray]:
    """
    Simulation check of the conjugate update: draw (gamma2, beta) from the
    prior, latents given them, then one conjugate update. The refit draws
    share the prior's distribution when the update is correct.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    priors = _resolve_priors(priors, X.shape[1])
    gen, _ = as_generator(rng)
    V_inv = linalg.inv(priors.beta_cov)
    a, b = priors.gamma_df, priors.gamma_scale
    out = {k: [] for k in ("beta_prior", "beta_refit", "gamma2_prior", "gamma2_refit")}
    for _ in range(n_rep):
        g2 = scaled_inv_chisq_sample(a, b, gen)
        beta_t = mvn_sample(np.zeros(X.shape[1]), g2 * priors.beta_cov, gen)
        zt = X @ beta_t + math.sqrt(g2) * gen.standard_normal(X.shape[0])
        beta_r, g2_r = _conjugate_update(zt, X, None, V_inv, a, b, gen)
        out["beta_prior"].append(beta_t)
        out["beta_refit"].append(beta_r)
        out["gamma2_prior"].append(g2)
        out["gamma2_refit"].append(g2_r)
    return {k: np.asarray(v) for k, v in out.items()}
