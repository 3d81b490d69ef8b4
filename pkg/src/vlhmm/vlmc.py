"""Variable length Markov chain transition parameters and their augmented chain."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DepthTooSmall, InvalidArgs, NotASubtree, NotIrreducible
from .tree import ContextTree, is_subtree, window_leaf_map

ROW_TOL = 1e-12


@dataclass(frozen=True)
class TransitionParams:
    """One probability row per leaf, ordered as ``tree.leaves``."""

    tree: ContextTree
    rows: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float)
        if rows.shape != (self.tree.size, self.tree.k):
            raise InvalidArgs(f"rows must have shape {(self.tree.size, self.tree.k)}, got {rows.shape}")
        if np.any(rows < 0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > ROW_TOL):
            raise InvalidArgs("transition rows must be non-negative and sum to 1")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @classmethod
    def from_mapping(cls, tree: ContextTree, rows: Mapping[str, "np.typing.ArrayLike"]) -> "TransitionParams":
        missing = set(tree.leaves) - set(rows)
        extra = set(rows) - set(tree.leaves)
        if missing or extra:
            raise InvalidArgs(f"rows do not match the leaves (missing {sorted(missing)}, extra {sorted(extra)})")
        return cls(tree, np.array([rows[s] for s in tree.leaves], dtype=float))

    @classmethod
    def uniform(cls, tree: ContextTree) -> "TransitionParams":
        return cls(tree, np.full((tree.size, tree.k), 1.0 / tree.k))

    def row(self, s: str) -> np.ndarray:
        return self.rows[self.tree.index[s]]

    def window_rows(self, depth: int) -> np.ndarray:
        """Transition rows of the depth-``depth`` augmented chain, shape (k**depth, k)."""
        return self.rows[window_leaf_map(self.tree, depth)]

    def to_json(self) -> dict:
        return {"tree": self.tree.to_json(), "rows": {s: [float(v) for v in r] for s, r in zip(self.tree.leaves, self.rows)}}

    @classmethod
    def from_json(cls, data: dict) -> "TransitionParams":
        return cls.from_mapping(ContextTree.from_json(data["tree"]), data["rows"])


@dataclass(frozen=True)
class AugmentedChain:
    """Sliding-window chain on ``k**depth`` states with its stationary law."""

    depth: int
    k: int
    rows: np.ndarray        # (S, k): probability of appending symbol x to window w
    stationary: np.ndarray  # (S,)

    @property
    def n_states(self) -> int:
        return self.k ** self.depth

    def successor(self, w: int, x: int) -> int:
        return (w * self.k) % self.n_states + x

    def matrix(self) -> np.ndarray:
        """Dense ``S x S`` transition matrix (only for small chains)."""
        S, k = self.n_states, self.k
        T = np.zeros((S, S))
        w = np.arange(S)
        for x in range(k):
            T[w, (w * k) % S + x] += self.rows[:, x]
        return T


def embed(params: TransitionParams, super_tree: ContextTree) -> TransitionParams:
    """Re-express ``params`` on a finer complete tree with identical transition law."""
    if not is_subtree(params.tree, super_tree):
        raise NotASubtree(f"{params.tree} is not a subtree of {super_tree}")
    rows = [params.row(next(u for u in params.tree.leaves if s.endswith(u))) for s in super_tree.leaves]
    return TransitionParams(super_tree, np.array(rows))


def _push(pi: np.ndarray, rows: np.ndarray, k: int) -> np.ndarray:
    # one step pi -> pi T using the shift structure of the window chain
    flow = pi[:, None] * rows
    return flow.reshape(k, -1, k).sum(axis=0).ravel()


def _check_single_recurrent_class(rows: np.ndarray, k: int) -> None:
    S = rows.shape[0]
    src = np.repeat(np.arange(S), k)
    dst = ((np.arange(S) * k) % S)[:, None] + np.arange(k)[None, :]
    mask = rows.ravel() > 0
    graph = csr_matrix((np.ones(mask.sum()), (src[mask], dst.ravel()[mask])), shape=(S, S))
    n_comp, labels = connected_components(graph, directed=True, connection="strong")
    if n_comp == 1:
        return
    closed = np.ones(n_comp, dtype=bool)
    leaving = labels[src[mask]] != labels[dst.ravel()[mask]]
    closed[np.unique(labels[src[mask]][leaving])] = False
    if closed.sum() > 1:
        raise NotIrreducible(f"the window chain has {int(closed.sum())} recurrent classes")


def augmented_chain(params: TransitionParams, d: int, tol: float = 1e-12, max_iter: int = 1_000_000) -> AugmentedChain:
    """Window chain of depth ``d`` and its stationary distribution.

    The stationary law is found by power iteration on the lazy chain
    ``(I + T) / 2`` (same fixed point, no periodicity issues).
    """
    if d < params.tree.depth:
        raise DepthTooSmall(f"depth {d} is smaller than the tree depth {params.tree.depth}")
    k = params.tree.k
    rows = params.window_rows(d)
    if d == 0:
        return AugmentedChain(0, k, rows, np.ones(1))
    _check_single_recurrent_class(rows, k)
    S = k ** d
    pi = np.full(S, 1.0 / S)
    for _ in range(max_iter):
        nxt = 0.5 * (pi + _push(pi, rows, k))
        nxt /= nxt.sum()
        if np.abs(nxt - pi).max() < tol:
            pi = nxt
            break
        pi = nxt
    else:
        raise NotIrreducible("power iteration did not converge")
    return AugmentedChain(d, k, rows, pi)


def initial_distribution(params: TransitionParams, d: int, init="stationary") -> np.ndarray:
    """Probabilities over windows of length ``d``: 'stationary', 'uniform' or an explicit array."""
    k = params.tree.k
    if isinstance(init, str):
        if init == "uniform":
            return np.full(k ** d, 1.0 / k ** d)
        if init == "stationary":
            return augmented_chain(params, d).stationary
        raise InvalidArgs(f"unknown initial distribution {init!r}")
    nu = np.asarray(init, dtype=float)
    if nu.shape != (k ** d,) or np.any(nu < 0) or abs(nu.sum() - 1) > 1e-10:
        raise InvalidArgs("explicit initial distribution must be a probability vector over k**d windows")
    return nu


def simulate_states(params: TransitionParams, n: int, seed=None, init="stationary") -> np.ndarray:
    """Draw ``n`` states: the first ``d`` from ``init``, the rest from the context rows.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if n < 1:
        raise InvalidArgs("n must be at least 1")
    rng = np.random.default_rng(seed)
    tree = params.tree
    k, d = tree.k, tree.depth
    x = np.empty(n, dtype=np.int64)
    start = min(d, n)
    if d > 0:
        nu = initial_distribution(params, d, init)
        w = int(rng.choice(k ** d, p=nu))
        block = [(w // k ** (d - 1 - j)) % k for j in range(d)]
        x[:start] = block[:start]
    else:
        w = 0
    if n <= d:
        return x
    cum = np.cumsum(params.window_rows(d), axis=1)
    cum[:, -1] = 1.0
    u = rng.random(n - d)
    S = k ** d
    for i in range(d, n):
        sym = int(np.searchsorted(cum[w], u[i - d], side="right"))
        x[i] = sym
        w = (w * k) % S + sym if d > 0 else 0
    return x
