"""
Data models for spatial_classify.
These records define the structure of data passed between the fitting,
classification and evaluation modules.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from spatial_classify.errors import InvalidBoundError, ValidationError

# ---------- spatial structure ----------


@dataclass(frozen=True)
class GridDomain:
    """Represents a rectangular lattice of locations in row-major order."""
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValidationError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def coords(self) -> np.ndarray:
        r, c = np.divmod(np.arange(self.n), self.cols)
        return np.column_stack([r, c])

    def index(self, row: int, col: int) -> int:
        return row * self.cols + col

    def contains(self, row: int, col: int) -> bool:
        return 0 <= row < self.rows and 0 <= col < self.cols


@dataclass(frozen=True)
class NeighborhoodMatrix:
    """Represents a binary adjacency and its row-standardized weights."""
    adjacency: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]


@dataclass(frozen=True)
class CovarianceSpec:
    """Represents the latent covariance family and its parameters."""
    kind: str = "CAR"  # 'CAR', 'exponential', 'identity'
    rho: float = 0.0
    theta: float = 1.0  # exponential range
    kappa: float = 1.0
    gamma2: float = 1.0

    def __post_init__(self):
        if self.kind not in ("CAR", "exponential", "identity"):
            raise ValidationError(f"unknown covariance kind {self.kind!r}")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValidationError(f"kappa must lie in [0, 1], got {self.kappa}")
        if self.gamma2 <= 0:
            raise ValidationError(f"gamma2 must be positive, got {self.gamma2}")
        if self.kind == "CAR" and not 0.0 <= self.rho < 1.0:
            raise ValidationError(f"rho must lie in [0, 1), got {self.rho}")
        if self.kind == "exponential" and self.theta <= 0:
            raise ValidationError(f"theta must be positive, got {self.theta}")


# ---------- random streams / MCMC state ----------


@dataclass(frozen=True)
class RngStream:
    """Represents a reproducible random stream keyed by (seed, stream_id)."""
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if self.seed < 0 or self.stream_id < 0:
            raise ValidationError("seed and stream_id must be non-negative")

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,)))

    def child(self, k: int) -> "RngStream":
        return RngStream(self.seed, (self.stream_id << 16) + k + 1)


@dataclass(frozen=True)
class MetropolisState:
    """Represents one random-walk Metropolis coordinate."""
    current: float
    proposal_sd: float
    accepts: int = 0
    attempts: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepts / self.attempts if self.attempts else 0.0


@dataclass(frozen=True)
class McmcSettings:
    """Represents run-length and proposal settings for a Gibbs sampler."""
    iters: int = 20000
    burn_in: int = 10000
    thin: int = 1
    tau_rho: float = 0.05
    tau_kappa: float = 0.1
    adapt: bool = True
    adapt_every: int = 100
    progress: bool = False
    store_latent: bool = True

    def __post_init__(self):
        if self.iters < 1 or self.thin < 1:
            raise ValidationError("iters and thin must be positive")
        if not 0 <= self.burn_in < self.iters:
            raise ValidationError(f"burn_in must lie in [0, iters), got {self.burn_in}")
        if self.tau_rho < 0 or self.tau_kappa < 0:
            raise ValidationError("proposal sds must be non-negative")

    @property
    def n_retained(self) -> int:
        return math.ceil((self.iters - self.burn_in) / self.thin)


# ---------- data ----------


@dataclass
class Dataset:
    """Represents binary responses on a lattice with covariates and a hold-out mask."""
    y: np.ndarray  # 0/1, -1 where genuinely unobserved
    X: np.ndarray  # intercept in column 0
    coords: np.ndarray
    test_mask: np.ndarray
    domain: Optional[GridDomain] = None
    covariate_names: List[str] = field(default_factory=list)
    linear_component: str = ""
    kappa: Optional[float] = None
    label: str = ""

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=int)
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.coords = np.asarray(self.coords, dtype=int).reshape(-1, 2)
        self.test_mask = np.asarray(self.test_mask, dtype=bool)
        n = self.y.shape[0]
        if self.X.shape[0] != n or self.coords.shape[0] != n or self.test_mask.shape[0] != n:
            raise ValidationError("y, X, coords and test_mask must have one row per location")
        if not np.all(np.isfinite(self.X)):
            raise ValidationError("design matrix contains non-finite values")
        if not np.all(np.isin(self.y, (-1, 0, 1))):
            raise ValidationError("responses must be 0 or 1 (or missing)")
        if np.any((self.y < 0) & ~self.test_mask):
            raise ValidationError("unobserved responses must be marked as test locations")
        if not self.covariate_names:
            self.covariate_names = [f"x{j}" for j in range(1, self.X.shape[1])]

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def train_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.test_mask)

    @property
    def test_idx(self) -> np.ndarray:
        return np.flatnonzero(self.test_mask)

    @property
    def n_train(self) -> int:
        return int(np.sum(~self.test_mask))

    @property
    def n_test(self) -> int:
        return int(np.sum(self.test_mask))

    @property
    def covariates(self) -> np.ndarray:
        """Design matrix without the intercept column."""
        return self.X[:, 1:]

    def standardized(self) -> "Dataset":
        """Copy with covariate columns centered and scaled over all locations."""
        X = self.X.copy()
        if X.shape[1] > 1:
            mean = X[:, 1:].mean(axis=0)
            sd = X[:, 1:].std(axis=0, ddof=1) if self.n > 1 else np.ones(X.shape[1] - 1)
            sd = np.where(sd > 0, sd, 1.0)
            X[:, 1:] = (X[:, 1:] - mean) / sd
        return replace(self, X=X)

    def with_test_mask(self, test_mask: np.ndarray) -> "Dataset":
        return replace(self, test_mask=np.asarray(test_mask, dtype=bool))


@dataclass(frozen=True)
class PriorSpec:
    """Represents prior settings for the latent probit models."""
    beta_cov: np.ndarray
    gamma_df: float = 3.0
    gamma_scale: float = 3.0
    rho_bounds: Tuple[float, float] = (0.0, 1.0)
    kappa_uniform: bool = True
    basis_var: float = 100.0  # Moran coefficient prior variance

    def __post_init__(self):
        V = np.atleast_2d(np.asarray(self.beta_cov, dtype=float))
        object.__setattr__(self, "beta_cov", V)
        if V.shape[0] != V.shape[1]:
            raise ValidationError("beta_cov must be square")
        if not np.allclose(V, V.T) or np.any(np.linalg.eigvalsh(V) <= 0):
            raise ValidationError("beta_cov must be symmetric positive definite")
        if self.gamma_df <= 0 or self.gamma_scale <= 0:
            raise ValidationError("gamma_df and gamma_scale must be positive")
        lo, hi = self.rho_bounds
        if not 0.0 <= lo < hi <= 1.0:
            raise InvalidBoundError(f"rho bounds must satisfy 0 <= a < b <= 1, got {self.rho_bounds}")
        if self.basis_var <= 0:
            raise ValidationError("basis_var must be positive")

    @classmethod
    def default(cls, n_coef: int, beta_var: float = 10.0, **kwargs) -> "PriorSpec":
        return cls(beta_cov=beta_var * np.eye(n_coef), **kwargs)


@dataclass
class FitArtifacts:
    """Represents what a latent-model fit needs to recompute conditional moments."""
    model: str  # 'sglm', 'sglmm', 'probit', 'lowrank'
    X: np.ndarray  # full design over all locations (with Moran basis for lowrank)
    y: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    coords: np.ndarray
    weights: Optional[np.ndarray] = None
    fixed_kappa: Optional[float] = None
    n_covariates: int = 0  # columns of X before the Moran basis

    @property
    def spatial(self) -> bool:
        return self.model in ("sglm", "sglmm")


@dataclass
class PosteriorSamples:
    """Represents retained draws of a latent probit model."""
    model: str
    beta: np.ndarray  # (T, l), identified scale
    gamma2: np.ndarray  # (T,)
    z_test: np.ndarray  # (T, n_test)
    rho: Optional[np.ndarray] = None
    kappa: Optional[np.ndarray] = None
    z_train: Optional[np.ndarray] = None  # (T, n_train)
    meta: Dict[str, Any] = field(default_factory=dict)
    artifacts: Optional[FitArtifacts] = None

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]

    def kappa_draws(self) -> np.ndarray:
        """Kappa per draw, filling the fixed value for models without a kappa chain."""
        if self.kappa is not None:
            return self.kappa
        fixed = 1.0 if self.model == "sglm" else 0.0
        if self.artifacts is not None and self.artifacts.fixed_kappa is not None:
            fixed = self.artifacts.fixed_kappa
        return np.full(self.n_draws, fixed)

    def rho_draws(self) -> np.ndarray:
        return self.rho if self.rho is not None else np.zeros(self.n_draws)


# ---------- classifiers ----------


@dataclass(frozen=True)
class DecisionScore:
    """Represents a decision value delta and the class-1 probability behind it."""
    delta: float
    p1: Optional[float]
    source: str
    tie_rule: str = "zero"  # 'zero' or 'random'

    def __post_init__(self):
        if self.delta is None or np.isnan(self.delta):
            raise ValidationError(f"{self.source}: decision value is NaN")
        if self.delta < 0:
            raise ValidationError(f"{self.source}: decision value must be non-negative")


@dataclass(frozen=True)
class GlmFit:
    """Represents a maximum likelihood GLM fit."""
    beta: np.ndarray
    cov: np.ndarray
    link: str
    iterations: int
    deviance: float

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


@dataclass(frozen=True)
class DiscriminantParams:
    """Represents class priors, means and covariances of a discriminant rule."""
    kind: str  # 'lda', 'dlda', 'qda'
    pi0: float
    pi1: float
    mu0: np.ndarray
    mu1: np.ndarray
    lambda0: np.ndarray
    lambda1: np.ndarray

    @property
    def lam(self) -> np.ndarray:
        """Shared covariance of LDA/DLDA."""
        return self.lambda0


@dataclass(frozen=True)
class SvmModel:
    """Represents a fitted soft-margin SVM in dual form."""
    kernel: str  # 'linear', 'poly', 'radial'
    lam: float
    zeta: np.ndarray
    beta0: float
    support_indices: np.ndarray
    y_star: np.ndarray
    X_train: np.ndarray  # standardized
    x_mean: np.ndarray
    x_sd: np.ndarray
    degree: int = 3
    u: float = 1.0
    iterations: int = 0


@dataclass(frozen=True)
class MardiaParams:
    """Represents per-class means, covariances and spatial ranges for windowed scoring."""
    mu: np.ndarray  # (2, l)
    lambdas: np.ndarray  # (2, l, l)
    thetas: np.ndarray  # (2,)
    pi: np.ndarray  # (2,)
    fill: np.ndarray  # covariate means for out-of-grid window cells
    window_radius: int = 1
    identity: bool = False

    @property
    def n_star(self) -> int:
        side = 2 * self.window_radius + 1
        return side * side - 1


@dataclass(frozen=True)
class SpatialLdaParams:
    """Represents class-wise location regressions and a pooled covariance."""
    B0: np.ndarray  # (q, l)
    B1: np.ndarray
    sigma: np.ndarray
    theta0: float
    theta1: float
    pi0: float
    pi1: float
    u_basis: str = "coords"  # or 'intercept'
    rows: int = 1
    cols: int = 1


@dataclass
class PressModel:
    """Represents per-class posterior draws and preclassified labels."""
    mu: List[np.ndarray]  # per class (T, l)
    theta: List[np.ndarray]  # per class (T,)
    lambdas: List[np.ndarray]  # per class (T, l, l)
    pi: np.ndarray
    preclass: np.ndarray  # (n,)
    pooled: bool = False  # one chain shared by both classes
    identity: bool = False
    geweke: Dict[str, float] = field(default_factory=dict)
    flagged: List[str] = field(default_factory=list)


# ---------- evaluation ----------

LINEAR_COMPONENTS = ("Intercept", "Simple1", "Simple2", "Multiple", "Confounded")


@dataclass(frozen=True)
class Scenario:
    """Represents one simulation setting of the linear component and dependence."""
    linear_component: str
    kappa: float
    rho: float = 0.99
    gamma2: float = 1.0
    rows: int = 20
    cols: int = 20
    replicate_seed: int = 0

    def __post_init__(self):
        if self.linear_component not in LINEAR_COMPONENTS:
            raise ValidationError(
                f"unknown linear component {self.linear_component!r}; expected one of {', '.join(LINEAR_COMPONENTS)}")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValidationError(f"kappa must lie in [0, 1], got {self.kappa}")
        if not 0.0 <= self.rho < 1.0:
            raise ValidationError(f"rho must lie in [0, 1), got {self.rho}")
        if self.gamma2 <= 0:
            raise ValidationError("gamma2 must be positive")

    @property
    def beta(self) -> np.ndarray:
        b1 = -math.sqrt(8.0) if self.linear_component == "Simple2" else -math.sqrt(2.0)
        if self.linear_component == "Intercept":
            return np.array([0.1])
        if self.linear_component == "Multiple":
            return np.array([0.1, b1, 2.0, 2.0])
        return np.array([0.1, b1])

    @property
    def domain(self) -> GridDomain:
        return GridDomain(self.rows, self.cols)

    @property
    def covariance(self) -> CovarianceSpec:
        return CovarianceSpec("CAR", rho=self.rho, kappa=self.kappa, gamma2=self.gamma2)


METRICS = ("training_oaat", "training_joint", "training", "test")


@dataclass
class ErrorReport:
    """Represents training and test error rates of one fitted classifier."""
    classifier: str
    training_error_oaat: Optional[float] = None
    training_error_joint: Optional[float] = None
    training_error: Optional[float] = None
    test_error: Optional[float] = None
    n_train: int = 0
    n_test: int = 0
    geweke_flags: List[str] = field(default_factory=list)
    wall_time: float = 0.0
    linear_component: str = ""
    dataset: str = ""
    kappa: Optional[float] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("training_error_oaat", "training_error_joint", "training_error", "test_error"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")

    def rates(self) -> Dict[str, float]:
        out = {
            "training_oaat": self.training_error_oaat,
            "training_joint": self.training_error_joint,
            "training": self.training_error,
            "test": self.test_error,
        }
        return {k: float(v) for k, v in out.items() if v is not None}

    def to_rows(self) -> List[Dict[str, Any]]:
        """Flat rows: linear_component, dataset, kappa, model_fit, metric, rate."""
        return [
            {
                "linear_component": self.linear_component,
                "dataset": self.dataset,
                "kappa": self.kappa,
                "model_fit": self.classifier,
                "metric": metric,
                "rate": rate,
            }
            for metric, rate in self.rates().items()
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "classifier": self.classifier,
            "training_error_oaat": self.training_error_oaat,
            "training_error_joint": self.training_error_joint,
            "training_error": self.training_error,
            "test_error": self.test_error,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "geweke_flags": list(self.geweke_flags),
            "wall_time": self.wall_time,
            "linear_component": self.linear_component,
            "dataset": self.dataset,
            "kappa": self.kappa,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ErrorReport":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


# ---------- command line ----------

SPLITS = ("clustered", "random", "none")


@dataclass
class RunConfig:
    """Represents a resolved command-line run."""
    command: str
    data: Optional[str] = None
    model: Optional[str] = None
    fit_dir: Optional[str] = None
    scenario: Optional[str] = None
    kappa: Optional[float] = None
    rho: float = 0.99
    seed: int = 0
    iters: int = 20000
    burn_in: Optional[int] = None
    thin: int = 1
    classifiers: List[str] = field(default_factory=list)
    out: str = "."
    adjacency: Optional[str] = None
    standardize: bool = False
    split: str = "clustered"
    test_fraction: float = 0.25
    plot: bool = False
    progress: bool = False
    threads: Optional[int] = None
    replicates: int = 3
    components: List[str] = field(default_factory=list)
    kappas: List[float] = field(default_factory=list)
    rows: int = 20
    cols: int = 20
    beta_var: float = 10.0
    gamma_df: float = 3.0
    gamma_scale: float = 3.0
    rho_bounds: Tuple[float, float] = (0.0, 1.0)
    tau_rho: float = 0.05
    tau_kappa: float = 0.1
    adapt: bool = True
    eval_draws: Optional[int] = 2000
    tuning: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"split must be one of {', '.join(SPLITS)}, got {self.split!r}")
        if self.iters <= 0 or self.thin <= 0 or self.replicates <= 0:
            raise ValidationError("iters, thin and replicates must be positive")
        if self.rows < 3 or self.cols < 3:
            raise ValidationError("the simulation grid must be at least 3x3")
        self.rho_bounds = tuple(float(v) for v in self.rho_bounds)

    @classmethod
    def from_mapping(cls, data: Dict[str, Any]) -> "RunConfig":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValidationError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**data)

    def prior_spec(self, n_coef: int) -> PriorSpec:
        return PriorSpec.default(n_coef, beta_var=self.beta_var, gamma_df=self.gamma_df,
                                 gamma_scale=self.gamma_scale, rho_bounds=tuple(self.rho_bounds))

    def resolved_burn_in(self) -> int:
        return self.iters // 2 if self.burn_in is None else self.burn_in

    def mcmc(self, progress: Optional[bool] = None) -> McmcSettings:
        return McmcSettings(
            iters=self.iters,
            burn_in=self.resolved_burn_in(),
            thin=self.thin,
            tau_rho=self.tau_rho,
            tau_kappa=self.tau_kappa,
            adapt=self.adapt,
            progress=self.progress if progress is None else progress,
        )

    def to_dict(self) -> Dict[str, Any]:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["rho_bounds"] = list(self.rho_bounds)
        return out
