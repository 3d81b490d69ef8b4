"""Krichevsky-Trofimov mixtures and numeric checks of the likelihood bounds.

``KT_tau(y) = sum_x KT_{tau,t}(x) KT_e(y | x)`` mixes the likelihood over a
Dirichlet(1/2, ..., 1/2) prior on every transition row and a conjugate prior
on the emission parameters.  Both factors have closed forms, evaluated here
with log-Gamma throughout.

Two harnesses compare the mixture with the maximum likelihood:

* :func:`check_prop1` fuzzes the inequality
  ``log g_theta(y) - log KT_tau(y) <= max_x [log prod g - log KT_e]
  + (k-1)/2 |tau| log n + D`` on small instances where every sum and max over
  hidden paths is done by enumeration.
* :func:`check_prop4` tracks ``sup_theta max_x [log prod g - log KT_e] / log n``
  for the shared-variance Gaussian family.  The max over paths is taken over
  interval partitions of the sorted observations: these contain the minimiser
  of the residual variance, which is what the asymptotic argument needs, but
  the reported value is only a lower bound of the max over all paths.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .emissions import FAMILIES, EmissionParams, log_density_matrix, sample
from .errors import BudgetExceeded, DomainError, InvalidArgs, PriorNotIntegrable, SequenceTooShort
from .inference import FullParams, loglik
from .tree import ContextTree, enumerate_complete_trees, window_leaf_map
from .vlmc import TransitionParams, simulate_states

LOG_2PI = np.log(2 * np.pi)
MAX_ENUMERATED_N = 12


# transition mixture


def _as_paths(x, k: int) -> np.ndarray:
    """Integer array of shape (N, n) from one path or a batch of paths."""
    if isinstance(x, str):
        x = [int(c) for c in x]
    X = np.asarray(x, dtype=np.int64)
    if X.ndim == 1:
        X = X[None, :]
    if X.size and (X.min() < 0 or X.max() >= k):
        raise InvalidArgs(f"symbols must lie in 0..{k - 1}")
    return X


def transition_counts(tree: ContextTree, x) -> np.ndarray:
    """``a[s, x]``: transitions into ``x`` from context ``s`` for positions ``d(tau)+1 .. n``.

    ``x`` may be a batch of equal-length paths, giving shape (N, |tau|, k).
    """
    k, d = tree.k, tree.depth
    X = _as_paths(x, k)
    N, n = X.shape
    if n < d:
        raise SequenceTooShort(f"a path of length {n} is shorter than the tree depth {d}")
    counts = np.zeros((N, tree.size, k))
    if n == d:
        return counts
    if d == 0:
        for sym in range(k):
            counts[:, 0, sym] = (X == sym).sum(axis=1)
        return counts
    codes = np.zeros((N, n - d), dtype=np.int64)
    for j in range(d):
        codes = codes * k + X[:, j:n - d + j]
    leaf = window_leaf_map(tree, d)[codes]
    rows = np.broadcast_to(np.arange(N)[:, None], leaf.shape)
    np.add.at(counts, (rows, leaf, X[:, d:]), 1.0)
    return counts


def _kt_from_counts(counts: np.ndarray, k: int, d: int) -> np.ndarray:
    per_leaf = (
        gammaln(counts + 0.5).sum(axis=-1)
        - k * gammaln(0.5)
        - gammaln(counts.sum(axis=-1) + k / 2)
        + gammaln(k / 2)
    )
    return -d * np.log(k) + per_leaf.sum(axis=-1)


def kt_transition_logprob(tree: ContextTree, x) -> float | np.ndarray:
    """``log KT_{tau,t}(x_1:n)``: ``(1/k)^d(tau)`` times a Dirichlet(1/2) mixture per context.

    A 2-D ``x`` is treated as a batch of paths and returns an array.
    """
    counts = transition_counts(tree, x)
    out = _kt_from_counts(counts, tree.k, tree.depth)
    if isinstance(x, str) or np.ndim(x) == 1:
        return float(out[0])
    return out


# emission mixtures


@dataclass(frozen=True)
class ConjugatePriorParams:
    """Conjugate prior on the emission parameters.

    ``gaussian-known-var``: means i.i.d. N(0, ``prior_variance``); the emission
        variance ``variance`` is known.
    ``poisson``: means i.i.d. Gamma(shape ``shape``, rate ``rate``).
    ``gaussian-shared-var``: density proportional to
        ``exp(alpha1 eta + sum_j alpha2_j theta_j - sum_j beta_j A(eta, theta_j))``
        in the natural coordinates ``eta = -1/(2 sigma^2)``, ``theta_j = m_j / sigma^2``.
    """

    family: str
    k: int
    prior_variance: float | None = None
    variance: float | None = None
    shape: float | None = None
    rate: float = 0.5
    alpha1: float | None = None
    alpha2: tuple[float, ...] | None = None
    beta: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidArgs(f"unknown emission family {self.family!r}")
        if self.k < 1:
            raise InvalidArgs("k must be positive")
        if self.family == "gaussian-known-var":
            if not (self.prior_variance and self.prior_variance > 0 and self.variance and self.variance > 0):
                raise DomainError("gaussian-known-var needs positive prior_variance and variance")
        elif self.family == "poisson":
            if not (self.shape and self.shape > 0 and self.rate > 0):
                raise DomainError("poisson needs a positive Gamma shape and rate")
        else:
            if self.alpha1 is None or self.alpha2 is None or self.beta is None:
                raise InvalidArgs("gaussian-shared-var needs alpha1, alpha2 and beta")
            a2 = tuple(float(v) for v in self.alpha2)
            b = tuple(float(v) for v in self.beta)
            if len(a2) != self.k or len(b) != self.k:
                raise InvalidArgs("alpha2 and beta need one entry per state")
            if min(b) <= 0:
                raise DomainError("beta must be positive")
            object.__setattr__(self, "alpha2", a2)
            object.__setattr__(self, "beta", b)
            if not self.alpha1 - sum(a * a / bb for a, bb in zip(a2, b)) > 0:
                raise PriorNotIntegrable(
                    f"need alpha1 > sum alpha2^2 / beta, got alpha1={self.alpha1}, "
                    f"sum={sum(a * a / bb for a, bb in zip(a2, b))}"
                )

    @classmethod
    def default(cls, family: str, k: int, n: int, variance: float | None = None) -> "ConjugatePriorParams":
        """Sample-size dependent defaults.

        Known variance: ``prior_variance = 5 variance k log(n) / 2``.  Poisson:
        Gamma(1, rate 1/2).  Shared variance: ``beta_j = 1/n``,
        ``alpha2_j = sqrt(beta_j) = 1/sqrt(n)``, ``alpha1 = k + 1``.
        """
        if n < 1:
            raise InvalidArgs("n must be positive")
        if family == "gaussian-known-var":
            if variance is None:
                raise InvalidArgs("gaussian-known-var needs the emission variance")
            return cls(family, k, prior_variance=5 * variance * k * np.log(max(n, 2)) / 2, variance=variance)
        if family == "poisson":
            return cls(family, k, shape=1.0)
        return cls(family, k, alpha1=k + 1.0, alpha2=(1 / np.sqrt(n),) * k, beta=(1.0 / n,) * k)

    def permuted(self, sigma) -> "ConjugatePriorParams":
        """Prior for relabelled states (state ``x`` becomes ``sigma[x]``)."""
        if self.family != "gaussian-shared-var":
            return self
        a2, b = np.empty(self.k), np.empty(self.k)
        a2[list(sigma)] = self.alpha2
        b[list(sigma)] = self.beta
        return ConjugatePriorParams(self.family, self.k, alpha1=self.alpha1, alpha2=tuple(a2), beta=tuple(b))


def log_normaliser(alpha1: float, alpha2, beta) -> float:
    """``B(alpha1, alpha2, beta)``: log of the integral of the unnormalised shared-variance prior."""
    alpha2 = np.asarray(alpha2, dtype=float)
    beta = np.asarray(beta, dtype=float)
    k = beta.size
    c = alpha1 - np.sum(alpha2 ** 2 / beta)
    if not c > 0:
        raise PriorNotIntegrable(f"alpha1 - sum alpha2^2/beta = {c} is not positive")
    a = (beta.sum() + k + 2) / 2
    return float((k + beta.sum() / 2) * np.log(2) + k / 2 * np.log(np.pi) + gammaln(a)
                 - 0.5 * np.log(beta).sum() - a * np.log(c))


def _state_sums(y: np.ndarray, X: np.ndarray, k: int):
    onehot = X[:, :, None] == np.arange(k)[None, None, :]
    n_j = onehot.sum(axis=1).astype(float)
    s_j = np.einsum("Nik,i->Nk", onehot, y)
    q_j = np.einsum("Nik,i->Nk", onehot, y * y)
    return n_j, s_j, q_j


def kt_emission_logprob(family: str, prior: ConjugatePriorParams, y, x_assign) -> float | np.ndarray:
    """``log KT_e(y | x)``: marginal log-likelihood of ``y`` under the conjugate prior.

    A 2-D ``x_assign`` is a batch of assignments and returns an array.
    """
    if prior.family != family:
        raise InvalidArgs(f"prior is for {prior.family!r}, not {family!r}")
    y = np.asarray(y, dtype=float).ravel()
    batch = np.ndim(x_assign) == 2
    X = _as_paths(x_assign, prior.k) if y.size else np.zeros((1, 0), dtype=np.int64)
    if X.shape[1] != y.size:
        raise InvalidArgs("y and x_assign lengths differ")
    if not np.all(np.isfinite(y)):
        raise DomainError("observations must be finite")
    if family == "poisson" and (np.any(y < 0) or np.any(y != np.round(y))):
        raise DomainError("Poisson observations must be non-negative integers")
    k = prior.k
    n_j, s_j, q_j = _state_sums(y, X, k)
    if family == "gaussian-known-var":
        v, t2 = prior.variance, prior.prior_variance
        per_state = (
            -0.5 * n_j * (LOG_2PI + np.log(v))
            - 0.5 * np.log1p(n_j * t2 / v)
            - q_j / (2 * v)
            + t2 * s_j ** 2 / (2 * v * (v + n_j * t2))
        )
        out = per_state.sum(axis=1)
    elif family == "poisson":
        t, r = prior.shape, prior.rate
        per_state = t * np.log(r) - gammaln(t) + gammaln(t + s_j) - (t + s_j) * np.log(r + n_j)
        out = per_state.sum(axis=1) - gammaln(y + 1).sum()
    else:
        a2 = np.asarray(prior.alpha2)
        b = np.asarray(prior.beta)
        prior_B = log_normaliser(prior.alpha1, a2, b)
        post_a1 = prior.alpha1 + np.dot(y, y)
        post_a2 = a2[None, :] + s_j
        post_b = b[None, :] + n_j
        c = post_a1 - np.sum(post_a2 ** 2 / post_b, axis=1)
        ap = (post_b.sum(axis=1) + k + 2) / 2
        post_B = ((k + post_b.sum(axis=1) / 2) * np.log(2) + k / 2 * np.log(np.pi) + gammaln(ap)
                  - 0.5 * np.log(post_b).sum(axis=1) - ap * np.log(c))
        out = -0.5 * y.size * LOG_2PI + post_B - prior_B
    return out if batch else float(out[0])


# Proposition-1 style check


def tree_constant(tree: ContextTree) -> float:
    """``D(tau) = -(k-1)/2 |tau| log |tau| + |tau| log k + d(tau) log k``."""
    k, t = tree.k, tree.size
    return -(k - 1) / 2 * t * np.log(t) + t * np.log(k) + tree.depth * np.log(k)


def kt_constant(k: int = 2, max_leaves: int = 10) -> float:
    """Largest ``D(tau)`` over complete trees with at most ``max_leaves`` leaves."""
    return max(tree_constant(t) for t in enumerate_complete_trees(k, max_leaves))


def _all_paths(k: int, n: int) -> np.ndarray:
    if n > MAX_ENUMERATED_N:
        raise BudgetExceeded(f"enumerating {k}^{n} paths exceeds the budget (n <= {MAX_ENUMERATED_N})")
    return np.array(list(itertools.product(range(k), repeat=n)), dtype=np.int64).reshape(-1, n)


def complete_loglik(emissions: EmissionParams, y, X: np.ndarray) -> np.ndarray:
    """``log prod_i g(y_i | x_i)`` for every path in the batch ``X``."""
    le = log_density_matrix(emissions, y)
    return le[np.arange(le.shape[0])[None, :], X].sum(axis=1)


def log_kt_mixture(tree: ContextTree, prior: ConjugatePriorParams, y) -> float:
    """``log KT_tau(y)`` by summing over every hidden path."""
    y = np.asarray(y, dtype=float).ravel()
    X = _all_paths(tree.k, y.size)
    terms = kt_transition_logprob(tree, X) + kt_emission_logprob(prior.family, prior, y, X)
    top = terms.max()
    return float(top + np.log(np.exp(terms - top).sum()))


@dataclass
class Prop1Result:
    n: int
    loglik: float
    log_kt: float
    path_term: float
    tree_term: float
    constant: float
    margin: float
    mixture_gap: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def _plug_in_candidates(tree: ContextTree, emissions: EmissionParams, y, X, scores, top: int):
    """Parameters fitted to the ``top`` best-scoring complete paths (for the mixture bound)."""
    k = tree.k
    out = []
    for i in np.argsort(scores)[::-1][:top]:
        x = X[i]
        counts = transition_counts(tree, x)[0] if x.size >= tree.depth else np.zeros((tree.size, k))
        den = counts.sum(axis=1, keepdims=True)
        rows = np.where(den > 0, counts / np.where(den > 0, den, 1.0), 1.0 / k)
        rows /= rows.sum(axis=1, keepdims=True)
        means = np.array([y[x == j].mean() if np.any(x == j) else y.mean() for j in range(k)])
        if emissions.family == "poisson":
            em = EmissionParams("poisson", np.maximum(means, 1e-3))
        elif emissions.family == "gaussian-known-var":
            em = EmissionParams(emissions.family, means, emissions.variance)
        else:
            var = float(np.mean((y - means[x]) ** 2))
            em = EmissionParams(emissions.family, means, max(var, 1e-6))
        out.append(FullParams(TransitionParams(tree, rows), em))
    return out


def prop1_margin(
    tree: ContextTree,
    params: FullParams,
    y,
    prior: ConjugatePriorParams | None = None,
    constant: float | None = None,
    fitted_candidates: int = 8,
) -> Prop1Result:
    """Both sides of the inequality for one instance, evaluated at ``params``.

    The left side uses ``log g`` at the supplied parameters, a lower bound of
    the supremum, so a valid inequality must still show a non-negative margin.
    ``mixture_gap`` is ``(best log-likelihood found) - log KT_tau(y)``, which
    must be non-negative because the mixture never exceeds the maximum.
    """
    if params.tree != tree:
        raise InvalidArgs("parameters belong to a different tree")
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    if n < 1:
        raise InvalidArgs("need at least one observation")
    k = tree.k
    if prior is None:
        prior = ConjugatePriorParams.default(params.emissions.family, k, n, params.emissions.variance)
    D = max(kt_constant(k) if constant is None else constant, tree_constant(tree))
    X = _all_paths(k, n)
    complete = complete_loglik(params.emissions, y, X)
    kt_e = kt_emission_logprob(prior.family, prior, y, X)
    kt_t = kt_transition_logprob(tree, X)
    terms = kt_t + kt_e
    top = terms.max()
    log_kt = float(top + np.log(np.exp(terms - top).sum()))
    ll = loglik(params, y)
    path_term = float(np.max(complete - kt_e))
    tree_term = (k - 1) / 2 * tree.size * np.log(n)
    margin = path_term + tree_term + D - (ll - log_kt)
    best = ll
    for cand in _plug_in_candidates(tree, params.emissions, y, X, complete + kt_t, fitted_candidates):
        best = max(best, loglik(cand, y))
    return Prop1Result(n, ll, log_kt, path_term, tree_term, D, float(margin), float(best - log_kt))


def random_instance(rng, k: int = 2, max_leaves: int = 4, max_n: int = 10, family: str | None = None):
    """A random (tree, parameters, observations, prior) tuple for the fuzz harness."""
    trees = [t for t in enumerate_complete_trees(k, max_leaves)]
    tree = trees[rng.integers(len(trees))]
    family = FAMILIES[rng.integers(len(FAMILIES))] if family is None else family
    rows = rng.dirichlet(np.ones(k), size=tree.size)
    transitions = TransitionParams(tree, rows / rows.sum(axis=1, keepdims=True))
    if family == "poisson":
        emissions = EmissionParams(family, np.sort(rng.uniform(0.5, 6.0, size=k)))
    else:
        emissions = EmissionParams(family, np.sort(rng.normal(0, 3, size=k)), float(rng.uniform(0.3, 2.0)))
    params = FullParams(transitions, emissions)
    n = int(rng.integers(max(1, tree.depth), max_n + 1))
    x = simulate_states(transitions, n, rng, init="uniform")
    y = np.atleast_1d(sample(emissions, x, rng))
    prior = ConjugatePriorParams.default(family, k, n, emissions.variance)
    return tree, params, y, prior


def check_prop1(trials: int = 100, seed=0, k: int = 2, max_leaves: int = 4, max_n: int = 10) -> dict:
    """Fuzz the inequality on ``trials`` random instances; report the smallest margins."""
    if max_n > MAX_ENUMERATED_N:
        raise BudgetExceeded(f"max_n={max_n} exceeds the enumeration budget {MAX_ENUMERATED_N}")
    rng = np.random.default_rng(seed)
    D = kt_constant(k)
    margins, gaps = [], []
    for _ in range(trials):
        tree, params, y, prior = random_instance(rng, k, max_leaves, max_n)
        res = prop1_margin(tree, params, y, prior, D)
        margins.append(res.margin)
        gaps.append(res.mixture_gap)
    return {
        "instances": trials,
        "min_margin": float(min(margins)) if margins else None,
        "negative_margins": int(sum(m < 0 for m in margins)),
        "min_mixture_gap": float(min(gaps)) if gaps else None,
        "mixture_violations": int(sum(g < 0 for g in gaps)),
        "constant_D": float(D),
        "seed": seed if isinstance(seed, int) else None,
    }


# Proposition-4 style check


def _interval_assignments(y: np.ndarray) -> np.ndarray:
    """The ``n + 1`` threshold splits of the sorted sample, in both label orders."""
    n = y.size
    order = np.argsort(y, kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)
    X = (ranks[None, :] >= np.arange(n + 1)[:, None]).astype(np.int64)
    return np.vstack([X, 1 - X])


def _shared_var_prior(y: np.ndarray, prior: ConjugatePriorParams | None) -> ConjugatePriorParams:
    if y.size < 2:
        raise InvalidArgs("need at least two observations")
    prior = ConjugatePriorParams.default("gaussian-shared-var", 2, y.size) if prior is None else prior
    if prior.family != "gaussian-shared-var" or prior.k != 2:
        raise InvalidArgs("the interval reduction is implemented for the two-state shared-variance family")
    return prior


def interval_discrepancy(y, prior: ConjugatePriorParams | None = None) -> float:
    """``sup_theta [log prod g - log KT_e(y | x)]`` maximised over interval assignments, k = 2.

    The shared-variance likelihood is maximised in closed form for each
    assignment.  Interval assignments contain the minimiser of the residual
    variance but not necessarily the maximiser of the discrepancy, so this is
    a lower bound of the maximum over all assignments; see
    :func:`discrepancy_upper_bound` for a (loose) upper bound.
    """
    y = np.asarray(y, dtype=float).ravel()
    prior = _shared_var_prior(y, prior)
    n = y.size
    X = _interval_assignments(y)
    n_j, s_j, _ = _state_sums(y, X, 2)
    means = np.where(n_j > 0, s_j / np.where(n_j > 0, n_j, 1.0), 0.0)
    rss = np.dot(y, y) - np.sum(np.where(n_j > 0, s_j * means, 0.0), axis=1)
    var = np.maximum(rss / n, 1e-300)
    sup_ll = -n / 2 * np.log(2 * np.pi * var) - n / 2
    return float(np.max(sup_ll - kt_emission_logprob(prior.family, prior, y, X)))


def discrepancy_upper_bound(y, prior: ConjugatePriorParams | None = None) -> float:
    """Upper bound of ``sup_theta max_x [log prod g - log KT_e(y | x)]``, k = 2.

    Bounds each assignment-dependent piece separately: the residual variance
    from below by its minimum over interval partitions, the posterior
    quadratic form ``alpha1 + sum y^2 - sum_j (alpha2_j + s_j)^2 / (beta_j + n_j)``
    from above by Cauchy-Schwarz, and ``sum_j log(beta_j + n_j)`` from above
    by concavity.  The first two bounds are attained by different
    assignments, so the result exceeds the maximum by a term of order ``n``.
    """
    y = np.asarray(y, dtype=float).ravel()
    prior = _shared_var_prior(y, prior)
    n, k = y.size, 2
    X = _interval_assignments(y)
    n_j, s_j, _ = _state_sums(y, X, 2)
    rss = np.dot(y, y) - np.sum(np.where(n_j > 0, s_j ** 2 / np.where(n_j > 0, n_j, 1.0), 0.0), axis=1)
    rss_min = max(float(rss.min()), 1e-300)
    a2, b = np.asarray(prior.alpha2), np.asarray(prior.beta)
    total_b = n + b.sum()
    c_max = prior.alpha1 + np.dot(y, y) - (a2.sum() + y.sum()) ** 2 / total_b
    ap = (total_b + k + 2) / 2
    post_B_min = ((k + total_b / 2) * np.log(2) + k / 2 * np.log(np.pi) + gammaln(ap)
                  - 0.5 * k * np.log(total_b / k) - ap * np.log(c_max))
    prior_B = log_normaliser(prior.alpha1, a2, b)
    sup_ll = -n / 2 * np.log(2 * np.pi * rss_min / n) - n / 2
    return float(sup_ll + n / 2 * LOG_2PI - post_B_min + prior_B)


def check_prop4(
    n_grid=(50, 100, 200, 400),
    seeds=range(8),
    params: FullParams | None = None,
    eps: float = 0.5,
) -> dict:
    """Ratio of the emission discrepancy to ``log n`` on a grid of sample sizes.

    Each grid point averages the ratio over the simulated samples of every
    seed.  The default model is a two-state chain with means (0, 3) and unit
    variance.
    """
    if params is None:
        tree = ContextTree.from_leaves(["0", "1"], 2)
        params = FullParams(
            TransitionParams(tree, [[0.7, 0.3], [0.4, 0.6]]),
            EmissionParams("gaussian-shared-var", [0.0, 3.0], 1.0),
        )
    if params.emissions.family != "gaussian-shared-var" or params.k != 2:
        raise InvalidArgs("check_prop4 needs a two-state shared-variance model")
    k = params.k
    sigma2 = params.emissions.variance
    seeds = list(seeds)
    mean_ratio, max_ratio, max_sq_ok = {}, {}, {}
    for n in n_grid:
        ratios, ok = [], []
        for s in seeds:
            rng = np.random.default_rng([s, n])
            x = simulate_states(params.transitions, n, rng)
            y = sample(params.emissions, x, rng)
            ratios.append(interval_discrepancy(y) / np.log(n))
            ok.append(bool(np.max(y ** 2) <= 5 * sigma2 * np.log(n)))
        mean_ratio[n] = float(np.mean(ratios))
        max_ratio[n] = float(np.max(ratios))
        max_sq_ok[n] = float(np.mean(ok))
    bound = (k + 1 + eps) / 2
    largest = max(n_grid)
    return {
        "instances": len(seeds) * len(list(n_grid)),
        "n_grid": list(n_grid),
        "mean_ratio_by_n": {str(n): v for n, v in mean_ratio.items()},
        "max_ratio_by_n": {str(n): v for n, v in max_ratio.items()},
        "bound": bound,
        "exceeds_bound_at_largest_n": bool(mean_ratio[largest] > bound),
        "max_square_within_5_sigma2_log_n": {str(n): v for n, v in max_sq_ok.items()},
    }
