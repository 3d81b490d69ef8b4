"""Likelihood, smoothing and EM for a VLHMM seen as an HMM on windows.

The hidden chain is lifted to the window chain ``W_t = (X_{t-M+1}, ..., X_t)``
on ``k**M`` states, ``M >= max(1, depth)``.  The unobserved window ``W_0``
preceding the first observation has law ``init`` (uniform by default), which
reproduces the likelihood

    g(y_1:n) = sum_{x_{-M+1:n}} init(x_{-M+1:0}) prod_i P_{ctx, x_i} g(y_i | x_i)

and makes it independent of ``M`` for a uniform ``init``.  Because ``W_0`` is
part of the model, the transition statistic averages the ``n`` window
transitions ``W_0 -> W_1, ..., W_{n-1} -> W_n``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .emissions import (
    EmissionParams,
    EmissionStats,
    expected_stats,
    hard_stats,
    log_density_matrix,
    mle_from_stats,
)
from .errors import (
    DegenerateClustering,
    DepthTooSmall,
    InvalidArgs,
    NonFiniteInput,
    StateCapExceeded,
    VLHMMError,
)
from .tree import DEFAULT_STATE_CAP, ContextTree, permute, permute_string, window_leaf_map
from .vlmc import TransitionParams

log = logging.getLogger(__name__)


def state_cap() -> int:
    """Cap on ``k**M``; the VLHMM_STATE_CAP environment variable overrides the default."""
    raw = os.environ.get("VLHMM_STATE_CAP")
    if raw is None:
        return DEFAULT_STATE_CAP
    try:
        cap = int(raw)
    except ValueError:
        raise InvalidArgs(f"VLHMM_STATE_CAP must be an integer, got {raw!r}") from None
    if cap < 2:
        raise InvalidArgs("VLHMM_STATE_CAP must be at least 2")
    return cap


def default_depth(n: int, k: int, cap: int | None = None) -> tuple[int, list[str]]:
    """``M = floor(log n)`` (natural log), at least 1, reduced until ``k**M <= cap``."""
    cap = state_cap() if cap is None else cap
    M = max(1, int(np.floor(np.log(n)))) if n > 1 else 1
    warnings = []
    if k ** M > cap:
        reduced = M
        while reduced > 1 and k ** reduced > cap:
            reduced -= 1
        warnings.append(f"depth M reduced from {M} to {reduced} (state cap {cap})")
        log.warning(warnings[-1])
        M = reduced
    return M, warnings


@dataclass(frozen=True)
class FullParams:
    """Transition and emission parameters plus the pre-sample window law."""

    transitions: TransitionParams
    emissions: EmissionParams
    init: np.ndarray | None = None

    def __post_init__(self):
        if self.emissions.k != self.transitions.tree.k:
            raise InvalidArgs("emission and transition alphabets differ")

    @property
    def tree(self) -> ContextTree:
        return self.transitions.tree

    @property
    def k(self) -> int:
        return self.transitions.tree.k

    def permuted(self, sigma) -> "FullParams":
        """Same model with state ``x`` renamed ``sigma[x]``."""
        tree = self.tree
        new_tree = permute(tree, sigma)
        rows = np.empty((tree.size, tree.k))
        for s, row in zip(tree.leaves, self.transitions.rows):
            r = np.empty(tree.k)
            r[list(sigma)] = row
            rows[new_tree.index[permute_string(s, sigma)]] = r
        init = None
        if self.init is not None:
            M = _init_depth(self.init, tree.k)
            windows = [_window_string(w, M, tree.k) for w in range(self.init.size)]
            init = np.empty_like(self.init)
            for w, s in enumerate(windows):
                init[int(permute_string(s, sigma), tree.k)] = self.init[w]
        return FullParams(TransitionParams(new_tree, rows), self.emissions.permuted(sigma), init)

    def to_json(self) -> dict:
        out = {"transitions": self.transitions.to_json(), "emissions": self.emissions.to_json()}
        if self.init is not None:
            out["init"] = [float(v) for v in self.init]
        return out

    @classmethod
    def from_json(cls, data: dict) -> "FullParams":
        init = data.get("init")
        return cls(
            TransitionParams.from_json(data["transitions"]),
            EmissionParams.from_json(data["emissions"]),
            None if init is None else np.asarray(init, dtype=float),
        )


def _window_string(w: int, M: int, k: int) -> str:
    return "".join(str((w // k ** (M - 1 - j)) % k) for j in range(M))


def _init_depth(init: np.ndarray, k: int) -> int:
    M = int(round(np.log(init.size) / np.log(k)))
    if k ** M != init.size:
        raise InvalidArgs("init length is not a power of k")
    return M


@dataclass
class PosteriorMarginals:
    """Smoothed window marginals.

    ``single[t]`` is the law of ``W_t`` given ``y`` for t = 0..n (row 0 is the
    pre-sample window) and ``pairs[t, w, x]`` the probability of
    ``W_t = w, W_{t+1} = w_{2:M} x``.
    """

    depth: int
    k: int
    single: np.ndarray
    pairs: np.ndarray
    loglik: float

    @property
    def state_marginals(self) -> np.ndarray:
        """``P(X_t = x | y)`` for t = 1..n, shape (n, k)."""
        n = self.single.shape[0] - 1
        return self.single[1:].reshape(n, -1, self.k).sum(axis=1)


@dataclass
class SufficientStats:
    """``S_t[w, x]``: average posterior count of ``w -> w_{2:M} x``; ``S_e``: emission statistic."""

    depth: int
    k: int
    n: int
    S_t: np.ndarray
    S_e: EmissionStats
    loglik: float


def _prepare(params: FullParams, y, M: int | None, cap: int | None):
    y = np.asarray(y, dtype=float).ravel()
    if y.size < 1:
        raise InvalidArgs("need at least one observation")
    if not np.all(np.isfinite(y)):
        raise NonFiniteInput("observations contain NaN or infinity")
    tree = params.tree
    k = tree.k
    if M is None:
        M = max(1, tree.depth) if params.init is None else _init_depth(params.init, k)
    if M < max(1, tree.depth):
        raise DepthTooSmall(f"window depth {M} is below max(1, tree depth {tree.depth})")
    cap = state_cap() if cap is None else cap
    if k ** M > cap:
        raise StateCapExceeded(f"k**M = {k ** M} exceeds the state cap {cap}")
    if params.init is None:
        init = np.full(k ** M, 1.0 / k ** M)
    else:
        if params.init.size != k ** M:
            raise InvalidArgs(f"init has {params.init.size} entries, expected {k ** M}")
        init = np.asarray(params.init, dtype=float)
    rows = np.ascontiguousarray(params.transitions.window_rows(M))
    le = log_density_matrix(params.emissions, y)
    shift = le.max(axis=1)
    e = np.exp(le - shift[:, None])
    return y, M, rows, e, init, float(shift.sum())


def loglik(params: FullParams, y, M: int | None = None, cap: int | None = None) -> float:
    """Exact log-likelihood of ``y`` (forward recursion on the window chain)."""
    _, _, rows, e, init, shift = _prepare(params, y, M, cap)
    return float(_kernels.forward_loglik(rows, e, init)) + shift


def posteriors(params: FullParams, y, M: int | None = None, cap: int | None = None) -> PosteriorMarginals:
    """One- and two-slice smoothed marginals (stores ``O(n k**M)`` floats)."""
    y, M, rows, e, init, shift = _prepare(params, y, M, cap)
    ll, _, _, single, pairs = _kernels.forward_backward(rows, e, init, True, True)
    if not np.isfinite(ll):
        raise VLHMMError("observations have zero likelihood under these parameters")
    return PosteriorMarginals(M, params.k, single, pairs, float(ll) + shift)


def sufficient_stats(params: FullParams, y, M: int | None = None, cap: int | None = None) -> SufficientStats:
    """E-step: transition and emission sufficient statistics under ``params``."""
    y, M, rows, e, init, shift = _prepare(params, y, M, cap)
    ll, weights, pair_sums, _, _ = _kernels.forward_backward(rows, e, init, False, False)
    if not np.isfinite(ll):
        raise VLHMMError("observations have zero likelihood under these parameters")
    n = y.size
    S_e = expected_stats(params.emissions.family, y, weights)
    return SufficientStats(M, params.k, n, pair_sums / n, S_e, float(ll) + shift)


def transition_mstep(stats: SufficientStats, tree: ContextTree) -> TransitionParams:
    """Rows ``P_s = sum_{w: s postfix of w} S_t[w, .]`` normalised; unvisited contexts are uniform."""
    if tree.depth > stats.depth:
        raise DepthTooSmall(f"tree depth {tree.depth} exceeds the statistic depth {stats.depth}")
    leaf_of = window_leaf_map(tree, stats.depth)
    num = np.zeros((tree.size, tree.k))
    np.add.at(num, leaf_of, stats.S_t)
    den = num.sum(axis=1, keepdims=True)
    rows = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0 / tree.k)
    # renormalise so rounding never trips the row-sum check
    rows /= rows.sum(axis=1, keepdims=True)
    return TransitionParams(tree, rows)


# k-means initialisation


@dataclass
class KMeansResult:
    assignments: np.ndarray
    means: np.ndarray
    within_var: float
    trace: list[float] = field(default_factory=list)


def _lloyd(y: np.ndarray, centers: np.ndarray, max_iter: int) -> KMeansResult | None:
    k = centers.size
    assign = None
    trace = []
    for _ in range(max_iter):
        new = np.argmin(np.abs(y[:, None] - centers[None, :]), axis=1)
        counts = np.bincount(new, minlength=k)
        if np.any(counts == 0):
            return None
        centers = np.bincount(new, weights=y, minlength=k) / counts
        trace.append(float(np.mean((y - centers[new]) ** 2)))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
    order = np.argsort(centers, kind="stable")
    relabel = np.empty(k, dtype=np.int64)
    relabel[order] = np.arange(k)
    return KMeansResult(relabel[assign], centers[order], trace[-1], trace)


def kmeans_1d(y, k: int, seed=None, n_init: int = 10, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm on the line, best of ``n_init`` k-means++ starts.

    Clusters are relabelled by increasing mean.  Starts that lose a cluster
    are retried with jittered centres (at most 10 times per start).
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size < k:
        raise InvalidArgs(f"need at least k={k} observations, got {y.size}")
    if np.unique(y).size < k:
        raise DegenerateClustering(f"fewer than {k} distinct values")
    rng = np.random.default_rng(seed)
    scale = np.std(y) or 1.0
    best = None
    for _ in range(n_init):
        result = None
        for attempt in range(11):
            centers = _kmeanspp(y, k, rng)
            if attempt:
                centers = centers + 1e-3 * scale * rng.standard_normal(k)
            result = _lloyd(y, centers, max_iter)
            if result is not None:
                break
        if result is None:
            raise DegenerateClustering("k-means kept producing empty clusters")
        if best is None or result.within_var < best.within_var - 1e-15:
            best = result
    return best


def _kmeanspp(y: np.ndarray, k: int, rng) -> np.ndarray:
    centers = [y[rng.integers(y.size)]]
    for _ in range(1, k):
        d2 = np.min((y[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(y[rng.integers(y.size)])
        else:
            centers.append(y[rng.choice(y.size, p=d2 / total)])
    return np.sort(np.array(centers))


def count_transitions(x, tree: ContextTree, M: int) -> TransitionParams:
    """Empirical context rows of a state path, using windows of ``M`` symbols.

    ``P_{s,x} = #{i: window x_{i:i+M-1} has context s, x_{i+M} = x} / #{...}``;
    unvisited contexts get uniform rows.
    """
    x = np.asarray(x, dtype=np.int64)
    k = tree.k
    n = x.size
    counts = np.zeros((tree.size, k))
    if n > M:
        codes = np.zeros(n - M, dtype=np.int64)
        for j in range(M):
            codes = codes * k + x[j:n - M + j]
        leaf_of = window_leaf_map(tree, M)
        np.add.at(counts, (leaf_of[codes], x[M:]), 1.0)
    den = counts.sum(axis=1, keepdims=True)
    rows = np.where(den > 0, counts / np.where(den > 0, den, 1.0), 1.0 / k)
    return TransitionParams(tree, rows)


def init_params(
    y,
    k: int,
    tree: ContextTree,
    family: str,
    seed=None,
    M: int | None = None,
    variance: float | None = None,
) -> FullParams:
    """Starting point for EM: k-means clusters give the emissions and a pseudo state path."""
    y = np.asarray(y, dtype=float).ravel()
    M = max(1, tree.depth) if M is None else M
    km = kmeans_1d(y, k, seed)
    emissions = mle_from_stats(hard_stats(family, y, km.assignments, k), variance=variance).params
    transitions = count_transitions(km.assignments, tree, M)
    return FullParams(transitions, emissions)


# EM


@dataclass
class EMResult:
    params: FullParams
    stats: SufficientStats
    loglik_trace: list[float]
    iterations: int
    converged: bool
    warnings: list[str] = field(default_factory=list)


def param_change(a: FullParams, b: FullParams) -> float:
    """Sup-norm distance over transition entries and natural emission coordinates."""
    dt = np.abs(a.transitions.rows - b.transitions.rows).max()
    de = np.abs(a.emissions.natural_vector() - b.emissions.natural_vector()).max()
    return float(max(dt, de))


def em_step(params: FullParams, y, tree: ContextTree, M: int, cap: int | None = None):
    """One E+M update; returns ``(new_params, stats_at_old_params, flags)``."""
    stats = sufficient_stats(params, y, M, cap)
    mle = mle_from_stats(stats.S_e, previous=params.emissions)
    new = FullParams(transition_mstep(stats, tree), mle.params, params.init)
    return new, stats, mle.flags


def em_fit(
    y,
    tree: ContextTree,
    M: int | None = None,
    family: str = "gaussian-shared-var",
    t_em: float = 1e-3,
    max_iters: int = 500,
    seed=0,
    init: FullParams | None = None,
    variance: float | None = None,
    cap: int | None = None,
) -> EMResult:
    """EM restricted to ``tree`` on windows of ``M`` symbols.

    Stops when the sup-norm parameter change drops below ``t_em`` or after
    ``max_iters`` iterations, then runs one more E-step so that the returned
    statistics belong to the returned parameters.  ``loglik_trace[i]`` is the
    log-likelihood at the i-th iterate (the last entry at the final one).
    """
    if not t_em > 0:
        raise InvalidArgs("t_em must be positive")
    y = np.asarray(y, dtype=float).ravel()
    M = max(1, tree.depth) if M is None else M
    params = init if init is not None else init_params(y, tree.k, tree, family, seed, M, variance)
    if params.tree != tree:
        raise InvalidArgs("initial parameters live on a different tree")
    trace: list[float] = []
    warnings: list[str] = []
    converged = False
    it = 0
    while it < max_iters:
        it += 1
        new, stats, flags = em_step(params, y, tree, M, cap)
        trace.append(stats.loglik)
        for f in flags:
            if f not in warnings:
                warnings.append(f)
        change = param_change(params, new)
        params = new
        if change < t_em:
            converged = True
            break
    if not converged:
        warnings.append(f"em-max-iters: no convergence after {max_iters} iterations")
        log.warning(warnings[-1])
    stats = sufficient_stats(params, y, M, cap)
    trace.append(stats.loglik)
    return EMResult(params, stats, trace, it, converged, warnings)
