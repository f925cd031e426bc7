"""
Classifier interface layer for spatial_classify.
This module gives every classifier the same fit / score / serialize surface
so the evaluation harness and the command line can drive them by tag.
"""
from __future__ import annotations

import logging
from functools import partial
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from spatial_classify.classifiers import (
    classify,
    decision_da,
    decision_glm,
    fit_dlda,
    fit_glm_mle,
    fit_lda,
    fit_qda,
    knn_c,
    knn_g,
    posterior_mean_classifier,
    posterior_predictive_classifier,
    svm_decision,
    svm_fit,
)
from spatial_classify.data_models import (
    Dataset,
    DecisionScore,
    DiscriminantParams,
    GlmFit,
    MardiaParams,
    McmcSettings,
    NeighborhoodMatrix,
    PosteriorSamples,
    PressModel,
    PriorSpec,
    SpatialLdaParams,
    SvmModel,
)
from spatial_classify.errors import ValidationError
from spatial_classify.sglm_sglmm import FITTERS, predict_latent
from spatial_classify.spatial_alt import (
    mardia_decision,
    mardia_fit,
    press_classify,
    press_fit,
    site_lookup,
    spatial_lda_basis,
    spatial_lda_decision,
    spatial_lda_fit,
    switzer_decision,
    switzer_fit,
    window_covariates,
)
from spatial_classify.spatial_core import neighbors_from_coords

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

BAYESIAN_TAGS = ("sglm", "sglmm", "probit", "lowrank")
GLM_TAGS = ("glm-logit", "glm-probit")
DA_TAGS = ("lda", "dlda", "qda")
SVM_TAGS = ("svm-linear", "svm-cubic", "svm-radial")
KNN_TAGS = ("knn-c", "knn-g")
SPATIAL_TAGS = ("switzer", "mardia", "spatial-lda", "press")
ALL_TAGS = BAYESIAN_TAGS + GLM_TAGS + DA_TAGS + SVM_TAGS + KNN_TAGS + SPATIAL_TAGS

# five-fold CV grids for the tuned families
TUNING_GRIDS: Dict[str, List[Dict[str, Any]]] = {
    "svm-linear": [{"lam": lam} for lam in (0.1, 0.25, 0.5, 1.0, 2.0)],
    "svm-cubic": [{"lam": lam} for lam in (0.1, 0.25, 0.5, 1.0, 2.0)],
    "svm-radial": [{"lam": lam, "u": u} for lam in (0.25, 0.5, 1.0, 2.0) for u in (0.5, 1.0, 5.0, 10.0)],
    "knn-c": [{"k": k} for k in (1, 3, 5, 7, 9, 12, 15)],
    "knn-g": [{"k": k} for k in (1, 3, 5, 7, 9, 12, 15)],
}


def _arr(x) -> Any:
    return None if x is None else np.asarray(x).tolist()


def _check_payload(payload: Dict[str, Any], tag: str) -> Dict[str, Any]:
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(f"unsupported model schema version {version!r}")
    if payload.get("tag") != tag:
        raise ValidationError(f"model file holds {payload.get('tag')!r}, expected {tag!r}")
    return payload


# === classifier interface ===
def labels_from_scores(scores: Sequence[DecisionScore], rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Labels for already computed scores; random ties draw from `rng`."""
    gen = rng if rng is not None else np.random.default_rng(0)
    return np.array([classify(s, rng=gen) for s in scores], dtype=int)


class ClassifierInterface:
    tag: str = ""
    bayesian: bool = False

    def fit(self, data: Dataset, rng: Optional[np.random.Generator] = None) -> "ClassifierInterface": ...
    def score(self, data: Dataset, sites: Sequence[int],
              rng: Optional[np.random.Generator] = None) -> List[DecisionScore]: ...
    def to_json(self) -> Dict[str, Any]: ...
    @classmethod
    def from_json(cls, payload: Dict[str, Any]) -> "ClassifierInterface": ...

    def predict(self, data: Dataset, sites: Sequence[int], rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Labels for `sites`; scores with the random tie rule draw from `rng`."""
        gen = rng if rng is not None else np.random.default_rng(0)
        return labels_from_scores(self.score(data, sites, rng=gen), gen)

    @property
    def params(self) -> Dict[str, Any]:
        return {}


# === Bayesian latent models ===
class BayesianClassifier(ClassifierInterface):
    """Posterior predictive (or posterior mean) decisions from a latent probit fit."""
    bayesian = True

    def __init__(self, tag: str, mcmc: Optional[McmcSettings] = None, priors: Optional[PriorSpec] = None,
                 neighbors: Optional[NeighborhoodMatrix] = None, decision: str = "predictive",
                 **fit_kwargs):
        if tag not in BAYESIAN_TAGS:
            raise ValidationError(f"{tag!r} is not a latent probit model")
        if decision not in ("predictive", "mean"):
            raise ValidationError(f"decision must be 'predictive' or 'mean', got {decision!r}")
        self.tag = tag
        self.mcmc = mcmc
        self.priors = priors
        self.neighbors = neighbors
        self.decision = decision
        self.fit_kwargs = fit_kwargs
        self.samples: Optional[PosteriorSamples] = None

    @classmethod
    def from_samples(cls, samples: PosteriorSamples, decision: str = "predictive") -> "BayesianClassifier":
        out = cls(samples.model, decision=decision)
        out.samples = samples
        return out

    def fit(self, data, rng=None):
        kwargs = dict(self.fit_kwargs)
        if self.tag != "probit":
            kwargs["neighbors"] = self.neighbors
        self.samples = FITTERS[self.tag](data, priors=self.priors, mcmc=self.mcmc, rng=rng, **kwargs)
        return self

    def _fitted(self) -> PosteriorSamples:
        if self.samples is None:
            raise ValidationError(f"{self.tag} has not been fitted")
        return self.samples

    def score(self, data, sites, rng=None):
        samples = self._fitted()
        sites = np.asarray(sites, dtype=int)
        if self.decision == "mean":
            return [posterior_mean_classifier(samples, focal=int(i)) for i in sites]
        test_col = {int(i): k for k, i in enumerate(samples.artifacts.test_idx)}
        out: List[Optional[DecisionScore]] = [None] * sites.size
        fresh = [k for k, i in enumerate(sites) if int(i) not in test_col]
        for k, i in enumerate(sites):
            if int(i) in test_col:
                out[k] = posterior_predictive_classifier(z0_draws=samples.z_test[:, test_col[int(i)]])
        if fresh:
            draws = predict_latent(samples, sites[fresh], rng=rng)
            for col, k in enumerate(fresh):
                out[k] = posterior_predictive_classifier(z0_draws=draws[:, col])
        return out

    def to_json(self):
        samples = self._fitted()
        return {"schema_version": SCHEMA_VERSION, "tag": self.tag, "decision": self.decision,
                "meta": samples.meta}

    @classmethod
    def from_json(cls, payload):
        raise ValidationError("latent model fits are reloaded from their chains together with the data")


# === GLM ===
class GlmClassifier(ClassifierInterface):
    def __init__(self, link: str = "logit"):
        self.link = link
        self.tag = f"glm-{link}"
        self.fitted: Optional[GlmFit] = None

    def fit(self, data, rng=None):
        tr = data.train_idx
        self.fitted = fit_glm_mle(data.y[tr], data.X[tr], self.link)
        return self

    def score(self, data, sites, rng=None):
        return [decision_glm(data.X[i], self.fitted.beta, self.link) for i in sites]

    def to_json(self):
        f = self.fitted
        return {"schema_version": SCHEMA_VERSION, "tag": self.tag, "beta": _arr(f.beta), "cov": _arr(f.cov),
                "link": f.link, "iterations": f.iterations, "deviance": f.deviance}

    @classmethod
    def from_json(cls, payload):
        out = cls(payload.get("link", "logit"))
        _check_payload(payload, out.tag)
        out.fitted = GlmFit(beta=np.asarray(payload["beta"]), cov=np.asarray(payload["cov"]), link=payload["link"],
                            iterations=int(payload["iterations"]), deviance=float(payload["deviance"]))
        return out


# === discriminant analysis ===
_DA_FITTERS = {"lda": fit_lda, "dlda": fit_dlda, "qda": fit_qda}


def _da_to_json(p: DiscriminantParams) -> Dict[str, Any]:
    return {"kind": p.kind, "pi": [p.pi0, p.pi1], "mu": [_arr(p.mu0), _arr(p.mu1)],
            "lambda": [_arr(p.lambda0), _arr(p.lambda1)]}


def _da_from_json(d: Dict[str, Any]) -> DiscriminantParams:
    return DiscriminantParams(d["kind"], float(d["pi"][0]), float(d["pi"][1]),
                              np.asarray(d["mu"][0], dtype=float), np.asarray(d["mu"][1], dtype=float),
                              np.atleast_2d(np.asarray(d["lambda"][0], dtype=float)),
                              np.atleast_2d(np.asarray(d["lambda"][1], dtype=float)))


def _require_covariates(data: Dataset, tag: str) -> np.ndarray:
    if data.covariates.shape[1] == 0:
        raise ValidationError(f"{tag} needs at least one covariate")
    return data.covariates


class DiscriminantClassifier(ClassifierInterface):
    def __init__(self, kind: str = "lda"):
        if kind not in _DA_FITTERS:
            raise ValidationError(f"unknown discriminant rule {kind!r}")
        self.tag = kind
        self.fitted: Optional[DiscriminantParams] = None

    def fit(self, data, rng=None):
        tr = data.train_idx
        self.fitted = _DA_FITTERS[self.tag](data.y[tr], _require_covariates(data, self.tag)[tr])
        return self

    def score(self, data, sites, rng=None):
        return [decision_da(self.fitted, data.covariates[i]) for i in sites]

    def to_json(self):
        return {"schema_version": SCHEMA_VERSION, "tag": self.tag, **_da_to_json(self.fitted)}

    @classmethod
    def from_json(cls, payload):
        out = cls(payload.get("tag", "lda"))
        _check_payload(payload, out.tag)
        out.fitted = _da_from_json(payload)
        return out


# === support vector machine ===
_SVM_KERNELS = {"svm-linear": ("linear", 1), "svm-cubic": ("poly", 3), "svm-radial": ("radial", 1)}


class SvmClassifier(ClassifierInterface):
    def __init__(self, tag: str = "svm-linear", lam: float = 1.0, u: float = 1.0):
        if tag not in _SVM_KERNELS:
            raise ValidationError(f"unknown SVM variant {tag!r}")
        self.tag = tag
        self.lam = float(lam)
        self.u = float(u)
        self.fitted: Optional[SvmModel] = None

    @property
    def params(self):
        return {"lam": self.lam, "u": self.u} if self.tag == "svm-radial" else {"lam": self.lam}

    def fit(self, data, rng=None):
        kernel, degree = _SVM_KERNELS[self.tag]
        tr = data.train_idx
        self.fitted = svm_fit(data.y[tr], _require_covariates(data, self.tag)[tr], kernel=kernel,
                              lam=self.lam, degree=degree, u=self.u)
        return self

    def score(self, data, sites, rng=None):
        return [svm_decision(self.fitted, data.covariates[i]) for i in sites]

    def to_json(self):
        m = self.fitted
        return {"schema_version": SCHEMA_VERSION, "tag": self.tag, "kernel": m.kernel, "lam": m.lam,
                "zeta": _arr(m.zeta), "beta0": m.beta0, "support_indices": _arr(m.support_indices),
                "y_star": _arr(m.y_star), "X_train": _arr(m.X_train), "x_mean": _arr(m.x_mean),
                "x_sd": _arr(m.x_sd), "degree": m.degree, "u": m.u, "iterations": m.iterations}

    @classmethod
    def from_json(cls, payload):
        out = cls(payload.get("tag", "svm-linear"), payload.get("lam", 1.0), payload.get("u", 1.0))
        _check_payload(payload, out.tag)
        out.fitted = SvmModel(
            kernel=payload["kernel"], lam=float(payload["lam"]), zeta=np.asarray(payload["zeta"], dtype=float),
            beta0=float(payload["beta0"]), support_indices=np.asarray(payload["support_indices"], dtype=int),
            y_star=np.asarray(payload["y_star"], dtype=float),
            X_train=np.atleast_2d(np.asarray(payload["X_train"], dtype=float)),
            x_mean=np.asarray(payload["x_mean"], dtype=float), x_sd=np.asarray(payload["x_sd"], dtype=float),
            degree=int(payload["degree"]), u=float(payload["u"]), iterations=int(payload["iterations"]))
        return out


# === nearest neighbours ===
class KnnClassifier(ClassifierInterface):
    """kNN over covariates (knn-c) or grid coordinates (knn-g); fitting stores the training set."""

    def __init__(self, tag: str = "knn-g", k: int = 5):
        if tag not in KNN_TAGS:
            raise ValidationError(f"unknown kNN variant {tag!r}")
        self.tag = tag
        self.k = int(k)
        self.train_features: Optional[np.ndarray] = None
        self.train_y: Optional[np.ndarray] = None

    @property
    def params(self):
        return {"k": self.k}

    def _features(self, data: Dataset) -> np.ndarray:
        if self.tag == "knn-g":
            return data.coords.astype(float)
        return _require_covariates(data, self.tag)

    def fit(self, data, rng=None):
        tr = data.train_idx
        if not 1 <= self.k <= tr.size:
            raise ValidationError(f"k must lie in [1, {tr.size}], got {self.k}")
        self.train_features = self._features(data)[tr]
        self.train_y = data.y[tr].astype(float)
        return self

    def score(self, data, sites, rng=None):
        feats = self._features(data)
        rule = knn_g if self.tag == "knn-g" else knn_c
        return [rule(feats[i], self.train_features, self.train_y, self.k) for i in sites]

    def to_json(self):
        return {"schema_version": SCHEMA_VERSION, "tag": self.tag, "k": self.k,
                "train_features": _arr(self.train_features), "train_y": _arr(self.train_y)}

    @classmethod
    def from_json(cls, payload):
        out = cls(payload.get("tag", "knn-g"), payload.get("k", 5))
        _check_payload(payload, out.tag)
        out.train_features = np.atleast_2d(np.asarray(payload["train_features"], dtype=float))
        out.train_y = np.asarray(payload["train_y"], dtype=float)
        return out


# === spatial discriminant rules ===
class SwitzerClassifier(ClassifierInterface):
    tag = "switzer"

    def __init__(self, neighbors: Optional[NeighborhoodMatrix] = None):
        self.neighbors = neighbors
        self.star: Optional[DiscriminantParams] = None
        self.plain: Optional[DiscriminantParams] = None

    def _nb(self, data: Dataset) -> NeighborhoodMatrix:
        if self.neighbors is not None and self.neighbors.n == data.n:
            return self.neighbors
        return neighbors_from_coords(data.coords, "second")

    def fit(self, data, rng=None):
        X_all = _require_covariates(data, self.tag)
        tr = data.train_idx
        self.star, self.plain = switzer_fit(data.y[tr], X_all, self._nb(data).weights, tr)
        return self

    def score(self, data, sites, rng=None):
        A = self._nb(data).adjacency
        X_all = data.covariates
        return [switzer_decision(X_all[i], X_all[A[i] > 0], self.star, self.plain) for i in sites]

    def to_json(self):
        return {"schema_version": SCHEMA_VERSION, "tag": self.tag,
                "augmented": _da_to_json(self.star), "plain": _da_to_json(self.plain)}

    @classmethod
    def from_json(cls, payload):
        _check_payload(payload, cls.tag)
        out = cls()
        out.star, out.plain = _da_from_json(payload["augmented"]), _da_from_json(payload["plain"])
        return out


class MardiaClassifier(ClassifierInterface):
    tag = "mardia"

    def __init__(self, shared_cov: bool = False, window_radius: int = 1):
        self.shared_cov = shared_cov
        self.window_radius = window_radius
        self.fitted: Optional[MardiaParams] = None

    def fit(self, data, rng=None):
        tr = data.train_idx
        self.fitted = mardia_fit(data.y[tr], _require_covariates(data, self.tag)[tr], data.coords[tr],
                                 shared_cov=self.shared_cov, window_radius=self.window_radius)
        return self

    def score(self, data, sites, rng=None):
        lookup = site_lookup(data.coords)
        return [mardia_decision(self.fitted, window_covariates(data.coords[i], lookup, data.covariates,
                                                               self.fitted.fill, self.fitted.window_radius))
                for i in sites]

    def to_json(self):
        p = self.fitted
        return {"schema_version": SCHEMA_VERSION, "tag": self.tag, "mu": _arr(p.mu), "lambdas": _arr(p.lambdas),
                "thetas": _arr(p.thetas), "pi": _arr(p.pi), "fill": _arr(p.fill),
                "window_radius": p.window_radius, "identity": p.identity}

    @classmethod
    def from_json(cls, payload):
        _check_payload(payload, cls.tag)
        out = cls(window_radius=int(payload["window_radius"]))
        out.fitted = MardiaParams(
            mu=np.atleast_2d(np.asarray(payload["mu"], dtype=float)),
            lambdas=np.asarray(payload["lambdas"], dtype=float), thetas=np.asarray(payload["thetas"], dtype=float),
            pi=np.asarray(payload["pi"], dtype=float), fill=np.asarray(payload["fill"], dtype=float),
            window_radius=int(payload["window_radius"]), identity=bool(payload["identity"]))
        return out


class SpatialLdaClassifier(ClassifierInterface):
    tag = "spatial-lda"

    def __init__(self, u_basis: str = "coords"):
        self.u_basis = u_basis
        self.fitted: Optional[SpatialLdaParams] = None

    def fit(self, data, rng=None):
        tr = data.train_idx
        rows = data.domain.rows if data.domain is not None else None
        cols = data.domain.cols if data.domain is not None else None
        self.fitted = spatial_lda_fit(data.y[tr], _require_covariates(data, self.tag)[tr], data.coords[tr],
                                      u_basis=self.u_basis, rows=rows, cols=cols)
        return self

    def score(self, data, sites, rng=None):
        p = self.fitted
        U = spatial_lda_basis(data.coords, p.u_basis, p.rows, p.cols)
        return [spatial_lda_decision(p, data.covariates[i], U[i]) for i in sites]

    def to_json(self):
        p = self.fitted
        return {"schema_version": SCHEMA_VERSION, "tag": self.tag, "B0": _arr(p.B0), "B1": _arr(p.B1),
                "sigma": _arr(p.sigma), "theta0": p.theta0, "theta1": p.theta1, "pi0": p.pi0, "pi1": p.pi1,
                "u_basis": p.u_basis, "rows": p.rows, "cols": p.cols}

    @classmethod
    def from_json(cls, payload):
        _check_payload(payload, cls.tag)
        out = cls(payload["u_basis"])
        out.fitted = SpatialLdaParams(
            B0=np.atleast_2d(np.asarray(payload["B0"], dtype=float)),
            B1=np.atleast_2d(np.asarray(payload["B1"], dtype=float)),
            sigma=np.atleast_2d(np.asarray(payload["sigma"], dtype=float)),
            theta0=float(payload["theta0"]), theta1=float(payload["theta1"]),
            pi0=float(payload["pi0"]), pi1=float(payload["pi1"]), u_basis=payload["u_basis"],
            rows=int(payload["rows"]), cols=int(payload["cols"]))
        return out


class PressClassifier(ClassifierInterface):
    tag = "press"

    def __init__(self, iters: int = 2000, burn_in: int = 1000, pooled: bool = False, progress: bool = False):
        self.iters = iters
        self.burn_in = burn_in
        self.pooled = pooled
        self.progress = progress
        self.fitted: Optional[PressModel] = None

    def fit(self, data, rng=None):
        tr = data.train_idx
        X_all = _require_covariates(data, self.tag)
        self.fitted = press_fit(data.y[tr], X_all[tr], data.coords[tr], X_all, rng=rng, iters=self.iters,
                                burn_in=self.burn_in, pooled=self.pooled, progress=self.progress)
        return self

    def score(self, data, sites, rng=None):
        if self.fitted.preclass.size != data.n:
            raise ValidationError("Press preclassification was made for a different set of locations")
        return [press_classify(self.fitted, int(i), data.coords, data.covariates, rng=rng) for i in sites]

    def to_json(self):
        m = self.fitted
        return {"schema_version": SCHEMA_VERSION, "tag": self.tag, "mu": [_arr(v) for v in m.mu],
                "theta": [_arr(v) for v in m.theta], "lambdas": [_arr(v) for v in m.lambdas],
                "pi": _arr(m.pi), "preclass": _arr(m.preclass), "pooled": m.pooled, "identity": m.identity,
                "geweke": m.geweke, "flagged": list(m.flagged)}

    @classmethod
    def from_json(cls, payload):
        _check_payload(payload, cls.tag)
        out = cls(pooled=bool(payload.get("pooled", False)))
        out.fitted = PressModel(
            mu=[np.asarray(v, dtype=float) for v in payload["mu"]],
            theta=[np.asarray(v, dtype=float) for v in payload["theta"]],
            lambdas=[np.asarray(v, dtype=float) for v in payload["lambdas"]],
            pi=np.asarray(payload["pi"], dtype=float), preclass=np.asarray(payload["preclass"], dtype=int),
            pooled=bool(payload.get("pooled", False)), identity=bool(payload["identity"]),
            geweke=dict(payload.get("geweke", {})), flagged=list(payload.get("flagged", [])))
        return out


# === registry ===
_BUILDERS: Dict[str, Callable[..., ClassifierInterface]] = {
    **{tag: partial(BayesianClassifier, tag) for tag in BAYESIAN_TAGS},
    "glm-logit": partial(GlmClassifier, "logit"),
    "glm-probit": partial(GlmClassifier, "probit"),
    **{tag: partial(DiscriminantClassifier, tag) for tag in DA_TAGS},
    **{tag: partial(SvmClassifier, tag) for tag in SVM_TAGS},
    **{tag: partial(KnnClassifier, tag) for tag in KNN_TAGS},
    "switzer": SwitzerClassifier,
    "mardia": MardiaClassifier,
    "spatial-lda": SpatialLdaClassifier,
    "press": PressClassifier,
}

_LOADERS: Dict[str, Callable[[Dict[str, Any]], ClassifierInterface]] = {
    **{tag: GlmClassifier.from_json for tag in GLM_TAGS},
    **{tag: DiscriminantClassifier.from_json for tag in DA_TAGS},
    **{tag: SvmClassifier.from_json for tag in SVM_TAGS},
    **{tag: KnnClassifier.from_json for tag in KNN_TAGS},
    "switzer": SwitzerClassifier.from_json,
    "mardia": MardiaClassifier.from_json,
    "spatial-lda": SpatialLdaClassifier.from_json,
    "press": PressClassifier.from_json,
}


def resolve_tags(tags: Sequence[str]) -> List[str]:
    """Expand 'all' and check every tag is known."""
    out: List[str] = []
    for tag in tags:
        tag = tag.strip().lower()
        if tag == "all":
            out.extend(t for t in ALL_TAGS if t not in out)
            continue
        if tag not in _BUILDERS:
            raise ValidationError(f"unknown classifier {tag!r}; known: {', '.join(ALL_TAGS)}")
        if tag not in out:
            out.append(tag)
    return out


def build_classifier(tag: str, **params) -> ClassifierInterface:
    builder = _BUILDERS.get(tag)
    if builder is None:
        raise ValidationError(f"unknown classifier {tag!r}; known: {', '.join(ALL_TAGS)}")
    return builder(**params)


def load_classifier(payload: Dict[str, Any]) -> ClassifierInterface:
    tag = payload.get("tag")
    loader = _LOADERS.get(tag)
    if loader is None:
        raise ValidationError(f"no model loader for {tag!r}")
    return loader(payload)
