"""
Stochastic kernels shared by the Gibbs samplers, and the Geweke diagnostic.

All functions take an explicit numpy Generator; none keeps state between calls.
"""
import logging
import math
from dataclasses import replace
from typing import Callable, Dict, List, Mapping, Tuple

import numpy as np
from scipy import linalg
from scipy.special import ndtr, ndtri

from spatial_classify.data_models import MetropolisState, RngStream
from spatial_classify.errors import (
    DegenerateChainError,
    InvalidBoundError,
    SingularMatrixError,
    ValidationError,
)

log = logging.getLogger(__name__)

TAIL_START = 4.0  # standardized bound beyond which inverse-CDF loses precision


# ---------- truncated normal ----------

def _robert_alpha(a):
    return 0.5 * (a + np.sqrt(a * a + 4.0))


def _tail_draws(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Standard normal on (a, b) with a >= TAIL_START; exponential proposal, or uniform when (a, b) is narrow."""
    out = np.empty_like(a)
    pending = np.arange(a.size)
    narrow = (b - a) < 1.0 / a
    alpha = _robert_alpha(a)
    while pending.size:
        ap, bp = a[pending], b[pending]
        nar = narrow[pending]
        z = np.where(nar,
                     ap + (bp - ap) * rng.random(pending.size),
                     ap + rng.exponential(1.0 / alpha[pending]))
        log_ratio = np.where(nar, 0.5 * (ap * ap - z * z), -0.5 * (z - alpha[pending]) ** 2)
        ok = (np.log(rng.random(pending.size)) <= log_ratio) & (z < bp)
        out[pending[ok]] = z[ok]
        pending = pending[~ok]
    return out


def _standard_tn(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # reflect so every interval leans right of zero
    flip = (a + b) < 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    z = np.empty_like(lo)

    free = np.isneginf(lo) & np.isposinf(hi)
    tail = ~free & (lo >= TAIL_START)
    central = ~free & ~tail
    if free.any():
        z[free] = rng.standard_normal(int(free.sum()))
    if central.any():
        s_lo, s_hi = ndtr(-lo[central]), ndtr(-hi[central])
        u = rng.random(int(central.sum()))
        z[central] = -ndtri(s_lo - u * (s_lo - s_hi))
    if tail.any():
        z[tail] = _tail_draws(lo[tail], hi[tail], rng)
    return np.where(flip, -z, z)


def truncated_normal_draws(mu, sd, lower, upper, rng: np.random.Generator) -> np.ndarray:
    """Vectorized N(mu, sd^2) restricted to (lower, upper); arguments broadcast."""
    mu, sd, lower, upper = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mu, sd, lower, upper)))
    if np.any(lower >= upper):
        raise InvalidBoundError("truncation bounds need lower < upper")
    if np.any(sd <= 0):
        raise ValidationError("truncated normal sd must be positive")
    with np.errstate(invalid="ignore"):
        a = (lower - mu) / sd
        b = (upper - mu) / sd
    x = mu + sd * _standard_tn(a.ravel(), b.ravel(), rng).reshape(mu.shape)
    return np.clip(x, np.nextafter(lower, np.inf), np.nextafter(upper, -np.inf))


def _scalar_tn(a: float, b: float, rng: np.random.Generator) -> float:
    flip = a + b < 0
    if flip:
        a, b = -b, -a
    if math.isinf(a) and math.isinf(b):
        z = rng.standard_normal()
    elif a < TAIL_START:
        s_lo, s_hi = ndtr(-a), ndtr(-b)
        z = -ndtri(s_lo - rng.random() * (s_lo - s_hi))
    else:
        z = float(_tail_draws(np.array([a]), np.array([b]), rng)[0])
    return -z if flip else z


def truncated_normal_sample(mu: float, sigma2: float, lower: float, upper: float,
                            rng: np.random.Generator) -> float:
    """One draw from N(mu, sigma2) truncated to the open interval (lower, upper)."""
    if not lower < upper:
        raise InvalidBoundError(f"truncation bounds need lower < upper, got ({lower}, {upper})")
    if not sigma2 > 0:
        raise ValidationError(f"sigma2 must be positive, got {sigma2}")
    sd = math.sqrt(sigma2)
    x = mu + sd * _scalar_tn((lower - mu) / sd, (upper - mu) / sd, rng)
    return min(max(x, math.nextafter(lower, math.inf)), math.nextafter(upper, -math.inf))


# ---------- conjugate kernels ----------

def scaled_inv_chisq_sample(a: float, b: float, rng: np.random.Generator, size=None):
    """b / chi2_a."""
    if a <= 0 or b <= 0:
        raise ValidationError(f"scaled inverse chi-square needs a, b > 0, got ({a}, {b})")
    return b / rng.chisquare(a, size)


def mvn_sample(mean, cov, rng: np.random.Generator, size=None) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    try:
        L = linalg.cholesky(np.asarray(cov, dtype=float), lower=True)
    except linalg.LinAlgError as e:
        raise SingularMatrixError("mvn_sample: covariance is not positive definite") from e
    shape = (mean.size,) if size is None else (size, mean.size)
    u = rng.standard_normal(shape)
    return mean + u @ L.T


def inv_wishart_sample(df: float, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-Wishart(df, scale) through a Bartlett draw of Wishart(df, scale^-1)."""
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    p = scale.shape[0]
    if df <= p - 1:
        raise ValidationError(f"inverse-Wishart df must exceed {p - 1}, got {df}")
    try:
        C = linalg.cholesky(linalg.inv(scale), lower=True)
    except linalg.LinAlgError as e:
        raise SingularMatrixError("inv_wishart_sample: scale is not positive definite") from e
    A = np.tril(rng.standard_normal((p, p)), -1)
    A[np.diag_indices(p)] = np.sqrt(rng.chisquare(df - np.arange(p)))
    CA = C @ A
    out = linalg.inv(CA @ CA.T)
    return 0.5 * (out + out.T)


# ---------- Metropolis ----------

def rw_metropolis_step(state: MetropolisState, log_target: Callable[[float], float],
                       lower: float, upper: float, rng: np.random.Generator) -> MetropolisState:
    """One Gaussian random-walk step; proposals outside (lower, upper) or with non-finite target are rejected."""
    proposal = state.current + state.proposal_sd * rng.standard_normal()
    log_u = math.log(rng.random() or 1e-300)
    accepted = False
    if lower < proposal < upper:
        new = log_target(proposal)
        if np.isfinite(new):
            old = log_target(state.current)
            accepted = not np.isfinite(old) or log_u < new - old
    return replace(
        state,
        current=proposal if accepted else state.current,
        accepts=state.accepts + int(accepted),
        attempts=state.attempts + 1,
    )


def adapt_proposal(state: MetropolisState, window_accepts: int, window_attempts: int) -> float:
    if window_attempts == 0:
        return state.proposal_sd
    rate = window_accepts / window_attempts
    if rate > 0.5:
        return state.proposal_sd * 1.2
    if rate < 0.3:
        return state.proposal_sd * 0.8
    return state.proposal_sd


# ---------- convergence ----------

def _spectral_variance(x: np.ndarray) -> float:
    """Bartlett lag-window estimate of the spectral density at zero."""
    n = x.size
    lags = int(math.floor(math.sqrt(n)))
    d = x - x.mean()
    acov = np.array([d[: n - k] @ d[k:] / n for k in range(lags + 1)])
    w = 1.0 - np.arange(1, lags + 1) / (lags + 1)
    return float(acov[0] + 2.0 * np.sum(w * acov[1:]))


def geweke_z(chain, first_frac: float = 0.1, last_frac: float = 0.5) -> float:
    chain = np.asarray(chain, dtype=float).ravel()
    n = chain.size
    if n < 100:
        raise ValidationError(f"geweke_z needs at least 100 draws, got {n}")
    if not 0 < first_frac < 1 or not 0 < last_frac < 1 or first_frac + last_frac > 1:
        raise ValidationError("geweke_z fractions must be in (0, 1) and sum to at most 1")
    first = chain[: int(first_frac * n)]
    last = chain[n - int(last_frac * n):]
    if np.ptp(first) == 0 or np.ptp(last) == 0:
        raise DegenerateChainError("geweke_z: a chain segment has zero variance")
    se2 = _spectral_variance(first) / first.size + _spectral_variance(last) / last.size
    return float((first.mean() - last.mean()) / math.sqrt(se2))


def geweke_flags(chains: Mapping[str, np.ndarray], threshold: float = 4.0) -> Tuple[Dict[str, float], List[str]]:
    """z per chain and the names with |z| > threshold; degenerate chains are flagged with z = NaN."""
    zs: Dict[str, float] = {}
    flagged: List[str] = []
    for name, chain in chains.items():
        try:
            z = geweke_z(chain)
        except DegenerateChainError:
            zs[name] = float("nan")
            flagged.append(name)
            continue
        except ValidationError as e:
            log.debug("geweke skipped for %s: %s", name, e)
            continue
        zs[name] = z
        if abs(z) > threshold:
            flagged.append(name)
    if flagged:
        log.warning("Geweke diagnostic flagged %s", ", ".join(flagged))
    return zs, flagged


# ---------- random streams ----------

def as_generator(rng=None) -> Tuple[np.random.Generator, Dict[str, int]]:
    """Generator for an RngStream, a seed or a Generator, plus the provenance to record."""
    if isinstance(rng, np.random.Generator):
        return rng, {}
    if rng is None:
        rng = RngStream(0)
    elif isinstance(rng, (int, np.integer)):
        rng = RngStream(int(rng))
    if not isinstance(rng, RngStream):
        raise ValidationError(f"cannot build a random generator from {type(rng).__name__}")
    return rng.generator(), {"seed": rng.seed, "stream_id": rng.stream_id}
