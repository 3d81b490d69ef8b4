"""Exponential-family emission models.

Every family writes the emission density of state ``x`` as

    log g(y | x) = log h(x, y) + <psi(theta), s(x, y)> - A(theta)

with a closed-form complete-data maximiser of ``<psi(theta), S> - A(theta)``.
Three families are provided:

``gaussian-known-var``
    Means ``m_1..m_k``, fixed known variance.  ``s = (y 1[x=j], 1[x=j])_j``.
``gaussian-shared-var``
    Means ``m_1..m_k`` and one unknown shared variance.  Natural
    coordinates ``eta = -1/(2 sigma^2)``, ``theta_j = m_j / sigma^2`` and
    ``s = (y^2, (y 1[x=j])_j, (1[x=j])_j)`` so ``D = 2k + 1``.
``poisson``
    Means ``m_1..m_k > 0``.  ``s = (y 1[x=j], 1[x=j])_j``.

In all three the per-state log-partition is folded into ``psi`` (the weight
block of ``s``), so the global ``A`` is identically zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import DegenerateVariance, DomainError, EmptyState, InvalidArgs

log = logging.getLogger(__name__)

FAMILIES = ("gaussian-known-var", "gaussian-shared-var", "poisson")
WEIGHT_FLOOR = 1e-10
VARIANCE_FLOOR = 1e-12
LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class EmissionParams:
    """Per-state means plus the (shared or known) variance for Gaussian families."""

    family: str
    means: np.ndarray
    variance: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidArgs(f"unknown emission family {self.family!r}")
        means = np.array(self.means, dtype=float).ravel()
        means.setflags(write=False)
        object.__setattr__(self, "means", means)
        if self.family == "poisson":
            if np.any(means <= 0):
                raise DomainError("Poisson means must be positive")
            object.__setattr__(self, "variance", None)
        else:
            if self.variance is None or not self.variance > 0:
                raise DomainError(f"variance must be positive, got {self.variance}")
            object.__setattr__(self, "variance", float(self.variance))
        if not np.all(np.isfinite(means)):
            raise DomainError("means must be finite")

    @property
    def k(self) -> int:
        return self.means.size

    @property
    def eta(self) -> float:
        """Shared natural parameter ``-1/(2 sigma^2)`` (Gaussian families)."""
        return -0.5 / self.variance

    @property
    def theta(self) -> np.ndarray:
        """Per-state natural parameters ``m_j / sigma^2`` (Gaussian families)."""
        return self.means / self.variance

    @classmethod
    def from_natural(cls, eta: float, theta, family: str = "gaussian-shared-var") -> "EmissionParams":
        if not eta < 0:
            raise DomainError(f"eta must be negative, got {eta}")
        variance = -0.5 / eta
        return cls(family, np.asarray(theta, dtype=float) * variance, variance)

    def natural_vector(self) -> np.ndarray:
        """Coordinates used for the EM stopping rule."""
        if self.family == "gaussian-shared-var":
            return np.concatenate([[self.eta], self.theta])
        return self.means.copy()

    def permuted(self, sigma) -> "EmissionParams":
        """Parameters after relabelling state ``x`` as ``sigma[x]``."""
        means = np.empty_like(self.means)
        means[list(sigma)] = self.means
        return EmissionParams(self.family, means, self.variance)

    def to_json(self) -> dict:
        out = {"family": self.family, "means": [float(m) for m in self.means]}
        if self.variance is not None:
            out["variance"] = self.variance
        return out

    @classmethod
    def from_json(cls, data: dict) -> "EmissionParams":
        return cls(data["family"], data["means"], data.get("variance"))


@dataclass(frozen=True)
class EmissionStats:
    """Time-averaged expected sufficient statistic (layout in the module docs)."""

    family: str
    k: int
    vector: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return self.vector[-self.k:]


@dataclass
class MLEResult:
    params: EmissionParams
    flags: list[str] = field(default_factory=list)


def _check_y(family: str, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise DomainError("observations must be finite")
    if family == "poisson" and (np.any(y < 0) or np.any(y != np.round(y))):
        raise DomainError("Poisson observations must be non-negative integers")
    return y


def log_density_matrix(params: EmissionParams, y) -> np.ndarray:
    """``out[i, x] = log g(y_i | x)``, shape (n, k)."""
    y = _check_y(params.family, y)[:, None]
    m = params.means[None, :]
    if params.family == "poisson":
        return y * np.log(m) - m - gammaln(y + 1)
    v = params.variance
    return -0.5 * (LOG_2PI + np.log(v)) - (y - m) ** 2 / (2 * v)


def log_density(params: EmissionParams, x: int, y: float) -> float:
    """Log emission density of the scalar ``y`` in state ``x``."""
    return float(log_density_matrix(params, [y])[0, x])


def sample(params: EmissionParams, x, rng) -> np.ndarray | float:
    """Draw emissions for the state (or array of states) ``x``."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    x = np.asarray(x)
    m = params.means[x]
    if params.family == "poisson":
        out = rng.poisson(m).astype(float)
    else:
        out = m + np.sqrt(params.variance) * rng.standard_normal(m.shape)
    return float(out) if out.ndim == 0 else out


def identifiability_guard(params: EmissionParams, tol: float = 1e-9) -> bool:
    """True iff all per-state parameters are pairwise distinct."""
    m = np.sort(params.means)
    return bool(np.all(np.diff(m) > tol))


# exponential-family decomposition


def suff_dim(family: str, k: int) -> int:
    return 2 * k + 1 if family == "gaussian-shared-var" else 2 * k


def sufficient_statistic(family: str, k: int, x: int, y: float) -> np.ndarray:
    """``s(x, y)`` as a length-D vector."""
    s = np.zeros(suff_dim(family, k))
    off = 1 if family == "gaussian-shared-var" else 0
    if off:
        s[0] = y * y
    s[off + x] = y
    s[off + k + x] = 1.0
    return s


def log_h(params: EmissionParams, x: int, y: float) -> float:
    if params.family == "gaussian-shared-var":
        return -0.5 * LOG_2PI
    if params.family == "gaussian-known-var":
        return -0.5 * (LOG_2PI + np.log(params.variance)) - y * y / (2 * params.variance)
    return -float(gammaln(y + 1))


def psi(params: EmissionParams) -> np.ndarray:
    if params.family == "gaussian-shared-var":
        eta, theta = params.eta, params.theta
        return np.concatenate([[eta], theta, -gaussian_log_partition(eta, theta)])
    if params.family == "gaussian-known-var":
        m, v = params.means, params.variance
        return np.concatenate([m / v, -m * m / (2 * v)])
    m = params.means
    return np.concatenate([np.log(m), -m])


def log_partition(params: EmissionParams) -> float:
    """Global ``A(theta)``; zero for every family here (see module docs)."""
    return 0.0


def gaussian_log_partition(eta, theta):
    """Per-state ``A(eta, theta_j) = -theta_j^2 / (4 eta) - log(-2 eta) / 2``."""
    theta = np.asarray(theta, dtype=float)
    return -theta ** 2 / (4 * eta) - 0.5 * np.log(-2 * eta)


def expected_stats(family: str, y, weights) -> EmissionStats:
    """Average of ``s(x, y_i)`` under per-time state weights ``weights[i, x]``."""
    y = _check_y(family, y)
    w = np.asarray(weights, dtype=float)
    n, k = w.shape
    parts = [w.T @ y / n, w.sum(axis=0) / n]
    if family == "gaussian-shared-var":
        parts.insert(0, [np.dot(y, y) / n])
    return EmissionStats(family, k, np.concatenate(parts))


def hard_stats(family: str, y, x, k: int) -> EmissionStats:
    x = np.asarray(x, dtype=np.int64)
    return expected_stats(family, y, np.eye(k)[x])


def mle_from_stats(
    stats: EmissionStats,
    previous: EmissionParams | None = None,
    variance: float | None = None,
) -> MLEResult:
    """Closed-form maximiser of ``<psi(theta), S> - A(theta)``.

    Without ``previous`` an empty state raises EmptyState and a collapsed
    variance raises DegenerateVariance.  With ``previous`` (the EM setting)
    empty states keep their previous mean and the variance is floored; both
    events are reported in ``flags``.  ``variance`` is the known variance of
    ``gaussian-known-var`` (taken from ``previous`` when omitted).
    """
    family, k, S = stats.family, stats.k, stats.vector
    off = 1 if family == "gaussian-shared-var" else 0
    sums, weights = S[off:off + k], S[off + k:off + 2 * k]
    flags = []
    empty = weights < WEIGHT_FLOOR
    if np.any(empty):
        if previous is None:
            raise EmptyState(f"states {np.flatnonzero(empty).tolist()} have weight below {WEIGHT_FLOOR}")
        flags.append(f"empty-state:{np.flatnonzero(empty).tolist()}")
        log.debug("keeping previous means for empty states %s", np.flatnonzero(empty))
    safe = np.where(empty, 1.0, weights)
    means = np.where(empty, previous.means if previous is not None else 0.0, sums / safe)

    if family == "gaussian-shared-var":
        # residual variance = E[y^2] - sum_j (sum_j y)^2 / n_j
        var = S[0] - np.sum(np.where(empty, 0.0, sums ** 2 / safe))
        if var < VARIANCE_FLOOR:
            if previous is None:
                raise DegenerateVariance(f"variance estimate {var:.3g} is below {VARIANCE_FLOOR}")
            flags.append("variance-floored")
            var = VARIANCE_FLOOR
        return MLEResult(EmissionParams(family, means, var), flags)
    if family == "gaussian-known-var":
        if variance is None:
            if previous is None:
                raise InvalidArgs("gaussian-known-var needs the known variance")
            variance = previous.variance
        return MLEResult(EmissionParams(family, means, variance), flags)
    if np.any(means <= 0):
        bad = means <= 0
        if previous is None:
            raise DomainError("Poisson MLE has a zero mean (all observations 0 in a state)")
        flags.append("poisson-mean-floored")
        means = np.where(bad, VARIANCE_FLOOR, means)
    return MLEResult(EmissionParams(family, means), flags)
