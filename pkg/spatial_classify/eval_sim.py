"""
Simulation study and error-rate evaluation.

Datasets are simulated on a lattice from a probit latent field, split into
training and held-out locations (clustered or random), and every classifier
is scored by its training and test misclassification rates. Latent-model
fits additionally get one-at-a-time and joint training errors computed from
their retained chains.
"""
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtr

from spatial_classify.data_models import (
    Dataset,
    ErrorReport,
    FitArtifacts,
    GridDomain,
    NeighborhoodMatrix,
    PosteriorSamples,
    RngStream,
    RunConfig,
    Scenario,
)
from spatial_classify.env import worker_count
from spatial_classify.errors import EmptyChainError, SpatialClassifyError, ValidationError
from spatial_classify.model_interface import (
    BAYESIAN_TAGS,
    TUNING_GRIDS,
    BayesianClassifier,
    ClassifierInterface,
    build_classifier,
    resolve_tags,
)
from spatial_classify.sampler import as_generator, mvn_sample
from spatial_classify.spatial_core import (
    QUEEN_OFFSETS,
    CovarianceCache,
    build_grid_neighbors,
    car_dependence,
    covariance_from_spec,
)

log = logging.getLogger(__name__)

CONFOUNDING_RHO = 0.99
CLUSTER_SEEDS = 25
CLUSTER_PER_SEED = 4
DEFAULT_EVAL_DRAWS = 2000
CV_FOLDS = 5


def _generators(rng, count: int) -> List[np.random.Generator]:
    """Independent generators for `count` tasks, reproducible from `rng`."""
    if isinstance(rng, np.random.Generator):
        return [np.random.default_rng(int(s)) for s in rng.integers(2 ** 63, size=count)]
    base = RngStream(int(rng)) if isinstance(rng, (int, np.integer)) else (rng or RngStream(0))
    return [base.child(k).generator() for k in range(count)]


# ---------- simulation ----------

def simulate_covariates(component: str, domain: GridDomain, weights: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
    """Design matrix (intercept first) for one linear component."""
    n = domain.n
    cols = [np.ones(n)]
    if component in ("Simple1", "Simple2", "Multiple"):
        cols.append(rng.uniform(-0.5, 0.5, n))
    if component == "Multiple":
        cols.append(rng.uniform(0.0, 0.5, n))
        cols.append(rng.uniform(-0.5, 0.0, n))
    if component == "Confounded":
        cols.append(mvn_sample(np.zeros(n), car_dependence(weights, CONFOUNDING_RHO), rng))
    return np.column_stack(cols)


def simulate_dataset(scenario: Scenario, rng=None) -> Dataset:
    """Covariates, then the latent field N(X beta, Sigma*(rho, kappa, gamma2)) and y = 1 where it is >= 0."""
    gen, _ = as_generator(RngStream(scenario.replicate_seed) if rng is None else rng)
    domain = scenario.domain
    nb = build_grid_neighbors(domain, "second")
    X = simulate_covariates(scenario.linear_component, domain, nb.weights, gen)
    sigma = covariance_from_spec(scenario.covariance, W=nb.weights)
    latent = X @ scenario.beta + mvn_sample(np.zeros(domain.n), sigma, gen)
    y = (latent >= 0).astype(int)
    log.debug("simulated %s kappa=%.2f: %.3f of %d sites in class 1",
              scenario.linear_component, scenario.kappa, y.mean(), y.size)
    return Dataset(y=y, X=X, coords=domain.coords, test_mask=np.zeros(domain.n, dtype=bool), domain=domain,
                   linear_component=scenario.linear_component, kappa=scenario.kappa,
                   label=str(scenario.replicate_seed))


def join_count(y, A) -> int:
    """Number of neighboring pairs that share a class."""
    y = np.asarray(y)
    A = np.asarray(A)
    same = y[:, None] == y[None, :]
    return int(np.sum(np.triu(A * same, k=1) > 0))


# ---------- splits ----------

def clustered_test_split(domain: GridDomain, n_seeds: int = CLUSTER_SEEDS, per_seed: int = CLUSTER_PER_SEED,
                         rng=None) -> np.ndarray:
    """
    Held-out mask built from random seed cells plus `per_seed` of each seed's
    eight neighbors. Neighbors are drawn as if the lattice continued past
    its edge; those falling outside are dropped, as are repeats.
    """
    if domain.rows < 3 or domain.cols < 3:
        raise ValidationError(f"clustered split needs a grid of at least 3x3, got {domain.rows}x{domain.cols}")
    if not 1 <= n_seeds <= domain.n:
        raise ValidationError(f"n_seeds must lie in [1, {domain.n}], got {n_seeds}")
    if not 0 <= per_seed <= len(QUEEN_OFFSETS):
        raise ValidationError(f"per_seed must lie in [0, 8], got {per_seed}")
    gen, _ = as_generator(rng)
    mask = np.zeros(domain.n, dtype=bool)
    for s in gen.choice(domain.n, size=n_seeds, replace=False):
        r, c = divmod(int(s), domain.cols)
        mask[s] = True
        for k in gen.choice(len(QUEEN_OFFSETS), size=per_seed, replace=False):
            dr, dc = QUEEN_OFFSETS[k]
            if domain.contains(r + dr, c + dc):
                mask[domain.index(r + dr, c + dc)] = True
    log.debug("clustered split: %d of %d sites held out (%.3f)", mask.sum(), domain.n, mask.mean())
    return mask


def random_test_split(n: int, test_fraction: float = 0.25, rng=None) -> np.ndarray:
    if not 0.0 <= test_fraction < 1.0:
        raise ValidationError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    gen, _ = as_generator(rng)
    mask = np.zeros(n, dtype=bool)
    mask[gen.choice(n, size=int(round(test_fraction * n)), replace=False)] = True
    return mask


def apply_split(data: Dataset, split: str, rng=None, test_fraction: float = 0.25) -> Dataset:
    """Dataset with a fresh held-out mask; 'none' keeps the current one."""
    if split == "none":
        return data
    if split == "clustered":
        domain = data.domain or GridDomain(int(data.coords[:, 0].max()) + 1, int(data.coords[:, 1].max()) + 1)
        if domain.n != data.n:
            raise ValidationError("clustered split needs data on a full grid")
        # grid mask, reindexed to the data's row order
        mask = clustered_test_split(domain, rng=rng)[domain.index(data.coords[:, 0], data.coords[:, 1])]
    elif split == "random":
        mask = random_test_split(data.n, test_fraction, rng)
    else:
        raise ValidationError(f"unknown split {split!r}")
    # genuinely unobserved cells stay held out
    return data.with_test_mask(mask | (data.y < 0))


# ---------- error rates ----------

def test_error(predictions, truth) -> float:
    """Fraction of disagreements."""
    p = np.asarray(predictions).ravel()
    t = np.asarray(truth).ravel()
    if p.shape != t.shape:
        raise ValidationError(f"{p.size} predictions for {t.size} labels")
    if p.size == 0:
        raise ValidationError("no labels to compare")
    return float(np.mean(p != t))


def _artifacts(samples: PosteriorSamples, artifacts: Optional[FitArtifacts]) -> FitArtifacts:
    art = artifacts or samples.artifacts
    if art is None:
        raise ValidationError("posterior samples carry no fit artifacts")
    if samples.n_draws == 0:
        raise EmptyChainError("no retained draws")
    return art


def _eval_index(n_draws: int, eval_draws: Optional[int]) -> np.ndarray:
    if eval_draws is None or n_draws <= eval_draws:
        return np.arange(n_draws)
    return np.unique(np.linspace(0, n_draws - 1, eval_draws).round().astype(int))


def _vote_error(hits: np.ndarray, n_draws: int, y: np.ndarray) -> float:
    y_hat = (hits / n_draws > 0.5).astype(int)
    return float(np.mean(y_hat != y))


def _training_cache(art: FitArtifacts) -> Optional[CovarianceCache]:
    if not art.spatial:
        return None
    return CovarianceCache(art.weights, art.train_idx, art.test_idx, maxsize=64)


def one_at_a_time_training_error(samples: PosteriorSamples, artifacts: Optional[FitArtifacts] = None,
                                 rng=None, eval_draws: Optional[int] = DEFAULT_EVAL_DRAWS) -> float:
    """
    Each training latent is redrawn from its conditional given the other
    training latents of the same iteration, and each site is classified by
    the fraction of positive redraws.
    """
    art = _artifacts(samples, artifacts)
    if samples.z_train is None:
        raise ValidationError("one-at-a-time training error needs stored training latents")
    gen, _ = as_generator(rng)
    tr = art.train_idx
    X_t, y_t = art.X[tr], art.y[tr]
    rho, kappa = samples.rho_draws(), samples.kappa_draws()
    cache = _training_cache(art)
    idx = _eval_index(samples.n_draws, eval_draws)
    hits = np.zeros(tr.size)
    for t in idx:
        m = X_t @ samples.beta[t]
        if cache is None:
            mu, var = m, 1.0
        else:
            cm, var = cache.get(rho[t], kappa[t]).loo_moments(samples.z_train[t] - m)
            mu = m + cm
        hits += (mu + np.sqrt(var) * gen.standard_normal(tr.size)) > 0
    return _vote_error(hits, idx.size, y_t)


def joint_training_error(samples: PosteriorSamples, artifacts: Optional[FitArtifacts] = None,
                         rng=None, eval_draws: Optional[int] = DEFAULT_EVAL_DRAWS) -> float:
    """Training latents redrawn jointly from N(X beta, Sigma*) per iteration, ignoring the observed labels."""
    art = _artifacts(samples, artifacts)
    gen, _ = as_generator(rng)
    tr = art.train_idx
    X_t, y_t = art.X[tr], art.y[tr]
    rho, kappa = samples.rho_draws(), samples.kappa_draws()
    cache = _training_cache(art)
    idx = _eval_index(samples.n_draws, eval_draws)
    hits = np.zeros(tr.size)
    for t in idx:
        m = X_t @ samples.beta[t]
        noise = gen.standard_normal(tr.size) if cache is None else cache.get(rho[t], kappa[t]).draw(gen)
        hits += (m + noise) > 0
    return _vote_error(hits, idx.size, y_t)


def posterior_mean_training_error(samples: PosteriorSamples, artifacts: Optional[FitArtifacts] = None) -> float:
    """One-at-a-time training error of the plug-in rule at the posterior mean."""
    art = _artifacts(samples, artifacts)
    tr = art.train_idx
    m = art.X[tr] @ samples.beta.mean(axis=0)
    if art.spatial:
        if samples.z_train is None:
            raise ValidationError("spatial plug-in training error needs stored training latents")
        lc = _training_cache(art).get(float(samples.rho_draws().mean()), float(samples.kappa_draws().mean()))
        cm, var = lc.loo_moments(samples.z_train.mean(axis=0) - m)
        p1 = ndtr((m + cm) / np.sqrt(var))
    else:
        p1 = ndtr(m)
    return float(np.mean((p1 > 0.5).astype(int) != art.y[tr]))


# ---------- cross-validation ----------

def stratified_folds(y, k: int, rng: np.random.Generator) -> np.ndarray:
    """Fold label per observation, dealing each class round-robin after a shuffle."""
    y = np.asarray(y)
    order = np.concatenate([rng.permutation(np.flatnonzero(y == c)) for c in np.unique(y)])
    folds = np.empty(y.size, dtype=int)
    folds[order] = np.arange(y.size) % k
    return folds


def _param_key(params: Dict[str, Any]) -> Tuple:
    return tuple(v for _, v in sorted(params.items()))


def kfold_cv_tune(family: str, grid: Sequence[Dict[str, Any]], train_data: Dataset, k: int = CV_FOLDS,
                  rng=None, workers: Optional[int] = None, **build_kwargs) -> Tuple[Dict[str, Any], float]:
    """
    Stratified k-fold cross-validation error for every grid point of a
    classifier family; returns the minimizer (smallest parameters on ties)
    and its error.
    """
    grid = [dict(p) for p in grid]
    if not grid:
        raise ValidationError("tuning grid is empty")
    tr = train_data.train_idx
    if not 2 <= k <= tr.size:
        raise ValidationError(f"k must lie in [2, {tr.size}], got {k}")
    gen, _ = as_generator(rng)
    y = train_data.y
    folds = stratified_folds(y[tr], k, gen)
    usable = []
    for f in range(k):
        held, keep = tr[folds == f], tr[folds != f]
        if np.unique(y[held]).size < 2 or np.unique(y[keep]).size < 2:
            log.warning("%s: fold %d has a single class and is skipped", family, f)
            continue
        mask = np.ones(train_data.n, dtype=bool)
        mask[keep] = False
        usable.append((f, held, train_data.with_test_mask(mask)))
    if not usable:
        raise ValidationError(f"{family}: every cross-validation fold has a single class")
    gens = _generators(gen, len(grid))

    def cve(j: int) -> float:
        errors = []
        for f, held, sub in usable:
            try:
                clf = build_classifier(family, **grid[j], **build_kwargs).fit(sub, rng=gens[j])
                pred = clf.predict(sub, held, rng=gens[j])
            except SpatialClassifyError as e:
                log.warning("%s %s: fold %d skipped (%s)", family, grid[j], f, e)
                continue
            errors.append(float(np.mean(pred != y[held])))
            log.debug("%s %s fold %d: %.4f", family, grid[j], f, errors[-1])
        return float(np.mean(errors)) if errors else math.nan

    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        cves = list(pool.map(cve, range(len(grid))))
    finite = [j for j in range(len(grid)) if np.isfinite(cves[j])]
    if not finite:
        raise ValidationError(f"{family}: no grid point could be cross-validated")
    best = min(finite, key=lambda j: (cves[j], _param_key(grid[j])))
    log.info("%s tuned to %s (CVE %.4f)", family, grid[best], cves[best])
    return grid[best], cves[best]


# ---------- evaluation ----------

def _tuning_grid(tag: str, settings: RunConfig, data: Dataset) -> Optional[List[Dict[str, Any]]]:
    grid = settings.tuning.get(tag, TUNING_GRIDS.get(tag))
    if grid is None:
        return None
    if isinstance(grid, dict):
        return [grid]
    if tag.startswith("knn"):
        # every fold keeps about (k-1)/k of the training sites
        cap = data.n_train * (CV_FOLDS - 1) // CV_FOLDS
        grid = [p for p in grid if p["k"] <= cap] or [{"k": 1}]
    return list(grid)


def fit_classifier(tag: str, data: Dataset, settings: RunConfig, rng=None,
                   neighbors: Optional[NeighborhoodMatrix] = None) -> Tuple[ClassifierInterface, Dict[str, Any]]:
    """Build, tune (when the family has a grid) and fit one classifier on the training part of `data`."""
    gen, _ = as_generator(rng)
    meta: Dict[str, Any] = {}
    if tag in BAYESIAN_TAGS:
        kwargs = dict(mcmc=settings.mcmc(), priors=settings.prior_spec(data.X.shape[1]))
        if tag != "probit":
            kwargs["neighbors"] = neighbors
        clf = build_classifier(tag, **kwargs)
    elif tag == "switzer":
        clf = build_classifier(tag, neighbors=neighbors)
    elif tag == "press":
        clf = build_classifier(tag, **settings.tuning.get("press", {}))
    else:
        grid = _tuning_grid(tag, settings, data)
        params: Dict[str, Any] = {}
        if grid and len(grid) > 1:
            params, cve = kfold_cv_tune(tag, grid, data, rng=gen, workers=settings.threads)
            meta.update(tuned=params, cve=cve)
        elif grid:
            params = grid[0]
            meta.update(tuned=params)
        clf = build_classifier(tag, **params)
    clf.fit(data, rng=gen)
    return clf, meta


def evaluate_fitted(clf: ClassifierInterface, data: Dataset, rng=None,
                    eval_draws: Optional[int] = DEFAULT_EVAL_DRAWS) -> ErrorReport:
    """Training and test error rates of a fitted classifier on `data`."""
    gen, _ = as_generator(rng)
    tr, te = data.train_idx, data.test_idx
    te = te[data.y[te] >= 0]
    report = ErrorReport(classifier=clf.tag, n_train=int(tr.size), n_test=int(te.size),
                         linear_component=data.linear_component, dataset=data.label, kappa=data.kappa)
    if isinstance(clf, BayesianClassifier):
        samples = clf.samples
        if samples.z_train is not None:
            report.training_error_oaat = one_at_a_time_training_error(samples, rng=gen, eval_draws=eval_draws)
        report.training_error_joint = joint_training_error(samples, rng=gen, eval_draws=eval_draws)
        report.training_error = posterior_mean_training_error(samples)
        report.geweke_flags = list(samples.meta.get("geweke_flagged", []))
        report.metadata.update(acceptance=samples.meta.get("acceptance", {}),
                               geweke=samples.meta.get("geweke", {}))
    else:
        report.training_error = test_error(clf.predict(data, tr, rng=gen), data.y[tr])
        flagged = getattr(getattr(clf, "fitted", None), "flagged", None)
        if flagged:
            report.geweke_flags = list(flagged)
    if te.size:
        report.test_error = test_error(clf.predict(data, te, rng=gen), data.y[te])
    return report


def evaluate_classifiers(dataset: Dataset, tags: Sequence[str], settings: RunConfig, rng=None,
                         neighbors: Optional[NeighborhoodMatrix] = None) -> List[ErrorReport]:
    """Fit and score every tagged classifier; a classifier that cannot be fitted is logged and left out."""
    tags = resolve_tags(tags)
    gens = _generators(rng, len(tags))
    reports = []
    for tag, gen in zip(tags, gens):
        started = time.perf_counter()
        try:
            clf, meta = fit_classifier(tag, dataset, settings, gen, neighbors)
            report = evaluate_fitted(clf, dataset, gen, settings.eval_draws)
        except SpatialClassifyError as e:
            log.warning("%s skipped on dataset %s: %s", tag, dataset.label or "?", e)
            continue
        report.wall_time = time.perf_counter() - started
        report.metadata.update(meta)
        reports.append(report)
        log.info("%s: training %.4f, test %s", tag, report.training_error,
                 "n/a" if report.test_error is None else f"{report.test_error:.4f}")
    return reports


def _replicate_task(task: Tuple[str, float, int, Sequence[str], RunConfig, RngStream]) -> List[ErrorReport]:
    component, kappa, rep, tags, settings, stream = task
    scenario = Scenario(component, kappa, rho=settings.rho, rows=settings.rows, cols=settings.cols,
                        replicate_seed=rep)
    data = simulate_dataset(scenario, stream.child(0))
    data = apply_split(data, settings.split, stream.child(1), settings.test_fraction)
    data.label = str(rep + 1)
    if settings.standardize:
        data = data.standardized()
    return evaluate_classifiers(data, tags, settings, stream.child(2))


def run_replicate_study(components: Sequence[str], kappas: Sequence[float], replicates: int,
                        tags: Sequence[str], settings: RunConfig, seed: int = 0,
                        workers: Optional[int] = None) -> List[ErrorReport]:
    """Simulate, split and evaluate every (component, kappa, replicate); reports come back in task order."""
    tags = resolve_tags(tags)
    base = RngStream(seed)
    tasks = []
    for component in components:
        for kappa in kappas:
            for rep in range(replicates):
                tasks.append((component, float(kappa), rep, tags, settings, base.child(len(tasks))))
    n_workers = min(worker_count(workers), len(tasks)) or 1
    log.info("replicate study: %d datasets on %d workers", len(tasks), n_workers)
    if n_workers == 1:
        results = [_replicate_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_replicate_task, tasks))
    return [r for batch in results for r in batch]
