"""
Neighborhood and dependence matrices, and the Gaussian conditioning used by
every spatial classifier.
"""
import logging
import math
from collections import OrderedDict
from typing import Optional, Tuple

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import linalg as sparse_linalg
from scipy.spatial.distance import cdist
from scipy.stats._multivariate import multivariate_normal_frozen

from spatial_classify.data_models import CovarianceSpec, GridDomain, NeighborhoodMatrix
from spatial_classify.errors import SingularMatrixError, ValidationError

log = logging.getLogger(__name__)

QUEEN_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


# ---------- neighborhoods ----------

def _row_standardize(A: np.ndarray) -> np.ndarray:
    deg = A.sum(axis=1)
    W = np.zeros_like(A, dtype=float)
    has = deg > 0
    W[has] = A[has] / deg[has, None]
    return W


def neighbors_from_coords(coords, order: str = "second") -> NeighborhoodMatrix:
    """Rook ('first') or queen ('second') adjacency between the given lattice cells, in their given order."""
    if order not in ("first", "second"):
        raise ValidationError(f"order must be 'first' or 'second', got {order!r}")
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    metric = "cityblock" if order == "first" else "chebyshev"
    A = (cdist(coords, coords, metric=metric) == 1.0).astype(float)
    return NeighborhoodMatrix(adjacency=A, weights=_row_standardize(A))


def build_grid_neighbors(domain: GridDomain, order: str = "second") -> NeighborhoodMatrix:
    """Neighbors on a full grid; cells outside the grid do not exist."""
    return neighbors_from_coords(domain.coords, order)


def domain_from_coords(coords) -> GridDomain:
    coords = np.asarray(coords, dtype=int).reshape(-1, 2)
    if coords.size == 0 or coords.min() < 0:
        raise ValidationError("coordinates must be non-negative grid indices")
    return GridDomain(int(coords[:, 0].max()) + 1, int(coords[:, 1].max()) + 1)


def neighbors_from_adjacency(A) -> NeighborhoodMatrix:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValidationError(f"adjacency must be square, got shape {A.shape}")
    if not np.all(np.isin(A, (0.0, 1.0))):
        raise ValidationError("adjacency must be binary")
    if not np.array_equal(A, A.T):
        raise ValidationError("adjacency must be symmetric")
    if np.any(np.diag(A) != 0):
        raise ValidationError("adjacency must have a zero diagonal")
    return NeighborhoodMatrix(adjacency=A, weights=_row_standardize(A))


# ---------- dependence ----------

def _check_rho(rho: float):
    if rho < 0:
        raise ValidationError(f"rho must be non-negative, got {rho}")
    if rho >= 1:
        raise SingularMatrixError(f"I - rho*W is singular for rho={rho}")


def car_dependence(W: np.ndarray, rho: float) -> np.ndarray:
    """Symmetrized (I - rho W)^-1."""
    _check_rho(rho)
    n = W.shape[0]
    try:
        K = linalg.solve(np.eye(n) - rho * W, np.eye(n))
    except (linalg.LinAlgError, ValueError) as e:
        raise SingularMatrixError(f"car_dependence: {e}") from e
    return 0.5 * (K + K.T)


def car_precision(W: np.ndarray, rho: float) -> np.ndarray:
    """Inverse of car_dependence(W, rho) from the sparse factor M = I - rho W."""
    _check_rho(rho)
    n = W.shape[0]
    M = sparse.identity(n, format="csc") - rho * sparse.csc_matrix(W)
    try:
        lu = sparse_linalg.splu((M + M.T).tocsc())
        Q = 2.0 * (M.T @ lu.solve(M.toarray()))
    except RuntimeError as e:
        raise SingularMatrixError(f"car_precision: {e}") from e
    Q = np.asarray(Q)
    return 0.5 * (Q + Q.T)


def assemble_sigma_star(K: np.ndarray, kappa: float, gamma2: float = 1.0) -> np.ndarray:
    if not 0.0 <= kappa <= 1.0:
        raise ValidationError(f"kappa must lie in [0, 1], got {kappa}")
    if gamma2 <= 0:
        raise ValidationError(f"gamma2 must be positive, got {gamma2}")
    return gamma2 * ((1.0 - kappa) * np.eye(K.shape[0]) + kappa * K)


def exponential_correlation(coords, theta: float) -> np.ndarray:
    if theta <= 0:
        raise ValidationError(f"theta must be positive, got {theta}")
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    return np.exp(-cdist(coords, coords) / theta)


def covariance_from_spec(spec: CovarianceSpec, W: Optional[np.ndarray] = None, coords=None) -> np.ndarray:
    """Sigma* for a covariance family: CAR needs W, exponential needs coords."""
    if spec.kind == "CAR":
        if W is None:
            raise ValidationError("a CAR covariance needs the weight matrix W")
        K = car_dependence(W, spec.rho)
    elif spec.kind == "exponential":
        if coords is None:
            raise ValidationError("an exponential covariance needs coordinates")
        K = exponential_correlation(coords, spec.theta)
    else:
        if W is None and coords is None:
            raise ValidationError("an identity covariance needs W or coordinates")
        n = W.shape[0] if W is not None else np.asarray(coords).reshape(-1, 2).shape[0]
        K = np.eye(n)
    return assemble_sigma_star(K, spec.kappa, spec.gamma2)


def _cholesky(S: np.ndarray, what: str) -> np.ndarray:
    try:
        return linalg.cholesky(S, lower=True)
    except linalg.LinAlgError as e:
        raise SingularMatrixError(f"{what}: matrix is not positive definite") from e


def conditional_normal(mean, cov, observed) -> Tuple[float, float]:
    """Moments of component 0 of N(mean, cov) given components 1..n equal `observed`."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    z = np.asarray(observed, dtype=float)
    if cov.shape != (mean.size, mean.size) or z.size != mean.size - 1:
        raise ValidationError("conditional_normal: mean, cov and observed sizes disagree")
    if z.size == 0:
        return float(mean[0]), float(cov[0, 0])
    L = _cholesky(cov[1:, 1:], "conditional_normal")
    s = cov[1:, 0]
    w = linalg.cho_solve((L, True), s)
    mu = mean[0] + w @ (z - mean[1:])
    var = cov[0, 0] - s @ w
    if var < -1e-10 * max(cov[0, 0], 1.0):
        raise SingularMatrixError("conditional_normal: covariance is not positive definite")
    return float(mu), float(max(var, 0.0))


# ---------- Moran eigenvectors ----------

def moran_operator(X, A, r_frac: float = 0.10) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """P A P with P the projection off the columns of X, and its ceil(r_frac * n) leading eigenvectors.

    Eigenvectors are computed inside the orthogonal complement of X so that
    they stay orthogonal to X even on zero or repeated eigenvalues.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if X.shape[0] != n:
        raise ValidationError("moran_operator: X and A disagree on the number of sites")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SingularMatrixError("moran_operator: X'X is singular (design is rank deficient)")
    if not 0.0 <= r_frac <= 1.0:
        raise ValidationError(f"r_frac must lie in [0, 1], got {r_frac}")
    XtX = _cholesky(X.T @ X, "moran_operator")
    P = np.eye(n) - X @ linalg.cho_solve((XtX, True), X.T)
    M = P @ A @ P
    M = 0.5 * (M + M.T)

    basis = linalg.null_space(X.T)
    r = min(math.ceil(r_frac * n - 1e-9), basis.shape[1])
    if r == 0:
        return M, np.zeros((n, 0)), np.zeros(0)
    vals, vecs = linalg.eigh(basis.T @ A @ basis)
    order = np.argsort(-vals, kind="stable")[:r]
    return M, basis @ vecs[:, order], vals[order]


# ---------- orthant probabilities ----------

def _positive_orthant(cov: np.ndarray, mean: np.ndarray) -> float:
    # P(Z > 0) = P(-Z < 0)
    dist = multivariate_normal_frozen(mean=-mean, cov=cov, seed=0, abseps=1e-7, releps=1e-7)
    return float(dist.cdf(np.zeros(cov.shape[0])))


def sameness_probability(cov, mean=None) -> float:
    """P(all sites share a class) for latent N(mean, cov)."""
    cov = np.asarray(cov, dtype=float)
    mean = np.zeros(cov.shape[0]) if mean is None else np.asarray(mean, dtype=float)
    return _positive_orthant(cov, mean) + _positive_orthant(cov, -mean)


def odd_one_out_probability(cov, odd_index: int, mean=None) -> float:
    """P(every site but odd_index shares a class and odd_index has the other)."""
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    if not 0 <= odd_index < n:
        raise ValidationError(f"odd_index {odd_index} out of range for {n} sites")
    mean = np.zeros(n) if mean is None else np.asarray(mean, dtype=float)
    s = np.ones(n)
    s[odd_index] = -1.0
    return sameness_probability(cov * np.outer(s, s), mean * s)


# ---------- factorization cache ----------

class LatentCovariance:
    """
    Training/held-out split of a latent covariance Sigma*(rho, kappa) with gamma2 = 1.

    Stores the training-block precision Q and its Cholesky factor, plus the
    linear map and variances of each held-out site given the training block.
    """

    def __init__(self, precision: np.ndarray, test_map: np.ndarray, test_var: np.ndarray):
        self.precision = 0.5 * (precision + precision.T)
        self.chol = _cholesky(self.precision, "training precision")
        self.test_map = test_map
        self.test_var = np.maximum(test_var, 0.0)
        self.diag = np.diag(self.precision).copy()

    @classmethod
    def from_covariance(cls, sigma: np.ndarray, train_idx, test_idx) -> "LatentCovariance":
        S_tt = sigma[np.ix_(train_idx, train_idx)]
        L = _cholesky(S_tt, "training covariance")
        Q = linalg.cho_solve((L, True), np.eye(len(train_idx)))
        S_0t = sigma[np.ix_(test_idx, train_idx)]
        test_map = S_0t @ Q
        test_var = np.diag(sigma)[test_idx] - np.einsum("ij,ij->i", test_map, S_0t)
        return cls(Q, test_map, test_var)

    @classmethod
    def from_precision(cls, Q_full: np.ndarray, train_idx, test_idx) -> "LatentCovariance":
        Q_tt = Q_full[np.ix_(train_idx, train_idx)]
        if len(test_idx) == 0:
            return cls(Q_tt, np.zeros((0, len(train_idx))), np.zeros(0))
        Q_00 = Q_full[np.ix_(test_idx, test_idx)]
        Q_0t = Q_full[np.ix_(test_idx, train_idx)]
        C = _cholesky(Q_00, "held-out precision")
        Q_00_inv = linalg.cho_solve((C, True), np.eye(len(test_idx)))
        test_map = -Q_00_inv @ Q_0t
        return cls(Q_tt + Q_0t.T @ test_map, test_map, np.diag(Q_00_inv))

    @property
    def logdet(self) -> float:
        """log |Sigma_TT|."""
        return -2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def quad(self, r: np.ndarray) -> float:
        v = self.chol.T @ r
        return float(v @ v)

    def site_moments(self, r: np.ndarray, i: int) -> Tuple[float, float]:
        """Conditional mean and variance of r_i given the other training residuals."""
        q = self.diag[i]
        return float(r[i] - (self.precision[i] @ r) / q), float(1.0 / q)

    def loo_moments(self, r: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """site_moments for every training site at once; r may be (n,) or (T, n)."""
        return r - (r @ self.precision) / self.diag, 1.0 / self.diag

    def test_moments(self, z_train: np.ndarray, m_train: np.ndarray, m_test: np.ndarray):
        return m_test + self.test_map @ (z_train - m_train), self.test_var

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        u = rng.standard_normal(self.diag.size)
        return linalg.solve_triangular(self.chol, u, lower=True, trans="T")


class CovarianceCache:
    """LRU cache of LatentCovariance keyed by (rho, kappa) for a CAR field."""

    def __init__(self, W: np.ndarray, train_idx, test_idx, maxsize: int = 8, precision_path: bool = True):
        self.W = W
        self.train_idx = np.asarray(train_idx, dtype=int)
        self.test_idx = np.asarray(test_idx, dtype=int)
        self.maxsize = maxsize
        # held-out sets overlapping the training set need the covariance path
        self.precision_path = precision_path
        self._entries: "OrderedDict[Tuple[float, float], LatentCovariance]" = OrderedDict()
        self._K: Optional[Tuple[float, np.ndarray]] = None
        self.misses = 0

    def dependence(self, rho: float) -> np.ndarray:
        if self._K is None or self._K[0] != rho:
            self._K = (rho, car_dependence(self.W, rho))
        return self._K[1]

    def get(self, rho: float, kappa: float) -> LatentCovariance:
        key = (float(rho), float(kappa))
        hit = self._entries.get(key)
        if hit is not None:
            self._entries.move_to_end(key)
            return hit
        self.misses += 1
        if kappa == 1.0 and self.precision_path:
            entry = LatentCovariance.from_precision(car_precision(self.W, rho), self.train_idx, self.test_idx)
        else:
            sigma = assemble_sigma_star(self.dependence(rho), kappa)
            entry = LatentCovariance.from_covariance(sigma, self.train_idx, self.test_idx)
        self._entries[key] = entry
        if len(self._entries) > self.maxsize:
            self._entries.popitem(last=False)
        return entry

    def full_sigma(self, rho: float, kappa: float) -> np.ndarray:
        return assemble_sigma_star(self.dependence(rho), kappa)
