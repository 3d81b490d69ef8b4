"""Penalised-likelihood selection of the hidden context tree.

The estimator minimises ``sc(tree) = -max loglik + pen(n, tree)`` over
complete trees.  :func:`prune_search` approximates it bottom-up: EM on the
full depth-``M`` tree yields one set of sufficient statistics, every
candidate tree gets plug-in parameters projected from those statistics, and
maximal nodes are collapsed while doing so lowers the score.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .emissions import FAMILIES, EmissionParams, mle_from_stats, sample
from .errors import BudgetExceeded, ConfigError, InvalidArgs, VLHMMError
from .inference import (
    EMResult,
    FullParams,
    SufficientStats,
    default_depth,
    em_fit,
    loglik,
    state_cap,
    transition_mstep,
)
from .tree import ContextTree, enumerate_complete_trees, equivalent, full_tree, maximal_nodes, prune_at
from .vlmc import TransitionParams, augmented_chain, simulate_states

log = logging.getLogger(__name__)

PENALTY_KINDS = ("alpha", "bic", "zero")


@dataclass(frozen=True)
class Penalty:
    """``alpha``: sum_{t=1}^{|tree|} ((k-1) t + alpha) / 2 * log n.
    ``bic``: (k-1)/2 * |tree| * log n.  ``zero`` is a test hook.
    """

    kind: str
    k: int = 2
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise InvalidArgs(f"unknown penalty kind {self.kind!r}")
        if self.kind == "alpha" and (self.alpha is None or not self.alpha > 0):
            raise InvalidArgs("the alpha penalty needs alpha > 0")
        if self.k < 2:
            raise InvalidArgs("k must be at least 2")

    @property
    def label(self) -> str:
        return f"alpha={self.alpha:g}" if self.kind == "alpha" else self.kind

    def __call__(self, n: int, tree_size: int) -> float:
        return penalty(self, n, tree_size)

    @classmethod
    def from_json(cls, data: dict, k: int) -> "Penalty":
        return cls(data["kind"], k, data.get("alpha"))

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.alpha is not None:
            out["alpha"] = self.alpha
        return out


def penalty(pen: Penalty, n: int, tree_size: int) -> float:
    if n < 2 or tree_size < 1:
        raise InvalidArgs(f"penalty needs n >= 2 and tree_size >= 1, got n={n}, size={tree_size}")
    t, k = tree_size, pen.k
    if pen.kind == "alpha":
        return (t * (t + 1) * (k - 1) / 4 + t * pen.alpha / 2) * np.log(n)
    if pen.kind == "bic":
        return (k - 1) / 2 * t * np.log(n)
    return 0.0


@dataclass
class ScoredTree:
    tree: ContextTree
    params: FullParams
    loglik: float
    penalty: float
    score: float
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"loglik": self.loglik, "penalty": self.penalty, "score": self.score}


def score(tree: ContextTree, params: FullParams, y, M: int | None, pen: Penalty) -> ScoredTree:
    """Penalised score at the given (plug-in) parameters."""
    if params.tree != tree:
        raise InvalidArgs("parameters belong to a different tree")
    y = np.asarray(y, dtype=float).ravel()
    ll = loglik(params, y, M)
    p = pen(y.size, tree.size)
    return ScoredTree(tree, params, ll, p, -ll + p)


def plug_in(stats: SufficientStats, tree: ContextTree, emissions: EmissionParams) -> FullParams:
    return FullParams(transition_mstep(stats, tree), emissions)


@dataclass
class Preliminary:
    """Output of the preliminary EM on the full depth-``M`` tree."""

    depth: int
    em: EMResult
    emissions: EmissionParams
    warnings: list[str]
    seconds: float

    @property
    def stats(self) -> SufficientStats:
        return self.em.stats


def preliminary_stats(
    y,
    k: int,
    family: str,
    t_em: float = 1e-3,
    seed=0,
    max_iters: int = 500,
    depth: int | None = None,
    cap: int | None = None,
    variance: float | None = None,
) -> Preliminary:
    """k-means start, then EM on ``full_tree(k, M)`` with ``M = floor(log n)`` unless given."""
    start = time.perf_counter()
    y = np.asarray(y, dtype=float).ravel()
    cap = state_cap() if cap is None else cap
    warnings: list[str] = []
    if depth is None:
        depth, warnings = default_depth(y.size, k, cap)
    tau_M = full_tree(k, depth, cap)
    em = em_fit(y, tau_M, depth, family, t_em, max_iters, seed, variance=variance, cap=cap)
    emissions = mle_from_stats(em.stats.S_e, previous=em.params.emissions).params
    return Preliminary(depth, em, emissions, warnings + em.warnings, time.perf_counter() - start)


def prune(prelim: Preliminary, y, pen: Penalty, refine_em: int = 0) -> ScoredTree:
    """Bottom-up pruning from the full depth-``M`` tree.

    Each sweep visits the maximal nodes of the tree as it was when the sweep
    started; a node is collapsed in the working tree when the plug-in score
    strictly decreases.  Sweeps repeat until one makes no change.
    """
    y = np.asarray(y, dtype=float).ravel()
    k = prelim.emissions.k
    tau_M = full_tree(k, prelim.depth, max(k ** prelim.depth, 2))
    stats = prelim.stats

    def candidate(tree: ContextTree) -> ScoredTree:
        params = plug_in(stats, tree, prelim.emissions)
        if refine_em > 0:
            params = em_fit(y, tree, prelim.depth, init=params, max_iters=refine_em, t_em=1e-12).params
        # the likelihood does not depend on the window depth, so use the smallest valid one
        return score(tree, params, y, None, pen)

    current = candidate(tau_M)
    tested, accepted = 1, 0
    change = True
    while change:
        change = False
        tau = current.tree
        for u in maximal_nodes(tau):
            if u not in maximal_nodes(current.tree):
                continue
            test = candidate(prune_at(current.tree, u))
            tested += 1
            if test.score < current.score:
                current = test
                accepted += 1
                change = True
    bound = (tau_M.size - 1) // (k - 1)
    assert accepted <= bound, f"{accepted} prunes exceed the bound {bound}"
    current.meta.update(
        depth=prelim.depth,
        tested=tested,
        accepted=accepted,
        warnings=list(prelim.warnings),
        em_iterations=prelim.em.iterations,
        em_converged=prelim.em.converged,
        loglik_trace=list(prelim.em.loglik_trace),
    )
    return current


def prune_search(
    y,
    k: int,
    family: str,
    pen: Penalty,
    t_em: float = 1e-3,
    seed=0,
    max_iters: int = 500,
    depth: int | None = None,
    refine_em: int = 0,
    cap: int | None = None,
    variance: float | None = None,
) -> ScoredTree:
    """Estimate the context tree by EM statistics plus bottom-up pruning."""
    prelim = preliminary_stats(y, k, family, t_em, seed, max_iters, depth, cap, variance)
    return prune(prelim, y, pen, refine_em)


@dataclass(frozen=True)
class EMConfig:
    t_em: float = 1e-3
    max_iters: int = 500
    seed: int = 0
    variance: float | None = None


def brute_force_select(
    y,
    k: int,
    max_leaves: int,
    max_depth: int,
    family: str,
    pen: Penalty,
    em_config: EMConfig = EMConfig(),
    budget: int = 512,
) -> ScoredTree:
    """Exhaustive minimiser of the score over small complete trees.

    Every tree is fitted by EM on windows of ``max(1, max_depth)`` symbols,
    started from parameters projected from an EM fit of the full tree of that
    depth.  Ties go to the smaller tree, then the lexicographically smaller
    leaf tuple.
    """
    y = np.asarray(y, dtype=float).ravel()
    trees = enumerate_complete_trees(k, max_leaves, max_depth)
    if len(trees) > budget:
        raise BudgetExceeded(f"{len(trees)} candidate trees exceed the budget {budget}")
    M = max(1, max_depth)
    prelim = preliminary_stats(y, k, family, em_config.t_em, em_config.seed, em_config.max_iters, M,
                               variance=em_config.variance)
    best = None
    scored = []
    for tree in trees:
        fit = em_fit(y, tree, M, family, em_config.t_em, em_config.max_iters,
                     init=plug_in(prelim.stats, tree, prelim.emissions))
        ll = fit.loglik_trace[-1]
        p = pen(y.size, tree.size)
        cand = ScoredTree(tree, fit.params, ll, p, -ll + p)
        scored.append(cand)
        if best is None or cand.score < best.score:
            best = cand
    best.meta.update(depth=M, candidates=len(trees), scores=[(c.tree.leaves, c.score) for c in scored])
    return best


# experiments

EXPERIMENT_COLUMNS = ("n", "m1", "penalty", "tree_size", "equivalent_to_truth", "score_diff", "runtime_ms")


def _field(data: dict, name: str, check, message: str, default=...):
    if name not in data:
        if default is ...:
            raise ConfigError(f"config.{name}: missing required field")
        return default
    value = data[name]
    try:
        ok = check(value)
    except (TypeError, ValueError):
        ok = False
    if not ok:
        raise ConfigError(f"config.{name}: {message}, got {value!r}")
    return value


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


@dataclass(frozen=True)
class ExperimentConfig:
    """Simulation study: true model, sample sizes, ``m1`` values, penalties and seeds.

    ``m1_grid`` overrides the mean of state 1 in ``emission_truth``; when it is
    empty the truth is used as given.
    """

    true_transitions: TransitionParams
    emission_truth: EmissionParams
    n_grid: tuple[int, ...]
    m1_grid: tuple[float, ...]
    penalties: tuple[Penalty, ...]
    replications: int
    seed: int
    t_em: float = 1e-3
    max_em_iters: int = 500
    state_cap: int | None = None
    refine_em: int = 0

    @property
    def true_tree(self) -> ContextTree:
        return self.true_transitions.tree

    @property
    def k(self) -> int:
        return self.true_tree.k

    @property
    def family(self) -> str:
        return self.emission_truth.family

    def truth(self, m1: float) -> FullParams:
        means = np.array(self.emission_truth.means)
        means[1] = m1
        return FullParams(self.true_transitions, EmissionParams(self.family, means, self.emission_truth.variance))

    @property
    def m1_values(self) -> tuple[float, ...]:
        return self.m1_grid or (float(self.emission_truth.means[1]),)

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object")
        known = {"true_tree", "true_transitions", "emission_family", "emission_truth", "n_grid", "m1_grid",
                 "penalties", "replications", "seed", "t_EM", "max_em_iters", "state_cap", "refine_em",
                 "description"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"config: unknown fields {unknown}")
        tree_data = _field(data, "true_tree", lambda v: isinstance(v, (dict, list)), "expected a tree object or leaf list")
        try:
            if isinstance(tree_data, list):
                tree = ContextTree.from_leaves(tree_data, 2)
            else:
                tree = ContextTree.from_json(tree_data)
        except (VLHMMError, KeyError, TypeError) as exc:
            raise ConfigError(f"config.true_tree: {exc}") from None
        rows = _field(data, "true_transitions", lambda v: isinstance(v, dict), "expected a mapping leaf -> row")
        try:
            transitions = TransitionParams.from_mapping(tree, rows)
            augmented_chain(transitions, max(1, tree.depth))
        except (VLHMMError, TypeError, ValueError) as exc:
            raise ConfigError(f"config.true_transitions: {exc}") from None
        family = _field(data, "emission_family", lambda v: v in FAMILIES, f"expected one of {list(FAMILIES)}")
        truth = _field(data, "emission_truth", lambda v: isinstance(v, dict) and "means" in v,
                       "expected an object with 'means' (and 'variance' for Gaussian families)")
        try:
            emissions = EmissionParams(family, truth["means"], truth.get("variance"))
        except (VLHMMError, TypeError, ValueError) as exc:
            raise ConfigError(f"config.emission_truth: {exc}") from None
        if emissions.k != tree.k:
            raise ConfigError(f"config.emission_truth: {emissions.k} means for an alphabet of size {tree.k}")
        n_grid = _field(data, "n_grid", lambda v: len(v) > 0 and all(_is_int(n) and n >= 2 for n in v),
                        "expected a non-empty list of integers >= 2")
        m1_grid = _field(data, "m1_grid", lambda v: all(_is_number(m) for m in v), "expected a list of numbers", [])
        pens = _field(data, "penalties", lambda v: len(v) > 0 and all(isinstance(p, dict) for p in v),
                      "expected a non-empty list of {kind, alpha?} objects")
        try:
            penalties = tuple(Penalty.from_json(p, tree.k) for p in pens)
        except (VLHMMError, KeyError) as exc:
            raise ConfigError(f"config.penalties: {exc}") from None
        reps = _field(data, "replications", lambda v: _is_int(v) and v >= 1, "expected an integer >= 1")
        seed = _field(data, "seed", lambda v: _is_int(v) and v >= 0, "expected a non-negative integer")
        t_em = _field(data, "t_EM", lambda v: _is_number(v) and v > 0, "expected a positive number", 1e-3)
        max_iters = _field(data, "max_em_iters", lambda v: _is_int(v) and v >= 1, "expected an integer >= 1", 500)
        cap = _field(data, "state_cap", lambda v: v is None or (_is_int(v) and v >= 2),
                     "expected an integer >= 2 or null", None)
        refine = _field(data, "refine_em", lambda v: _is_int(v) and v >= 0, "expected an integer >= 0", 0)
        if m1_grid and tree.k < 2:
            raise ConfigError("config.m1_grid: needs at least two states")
        return cls(transitions, emissions, tuple(n_grid), tuple(float(m) for m in m1_grid), penalties,
                   reps, seed, float(t_em), max_iters, cap, refine)

    def to_json(self) -> dict:
        return {
            "true_tree": self.true_tree.to_json(),
            "true_transitions": self.true_transitions.to_json()["rows"],
            "emission_family": self.family,
            "emission_truth": {k: v for k, v in self.emission_truth.to_json().items() if k != "family"},
            "n_grid": list(self.n_grid),
            "m1_grid": list(self.m1_grid),
            "penalties": [p.to_json() for p in self.penalties],
            "replications": self.replications,
            "seed": self.seed,
            "t_EM": self.t_em,
            "max_em_iters": self.max_em_iters,
            "state_cap": self.state_cap,
            "refine_em": self.refine_em,
        }


@dataclass(frozen=True)
class Cell:
    """One simulated data set: sample size, ``m1`` value and replication index."""

    n: int
    m1_index: int
    m1: float
    replication: int

    def seed(self, base: int) -> list[int]:
        return [base, self.n, self.replication, self.m1_index]


def experiment_plan(config: ExperimentConfig) -> list[Cell]:
    """Cells in output order: n, then m1, then replication."""
    return [
        Cell(n, i, m1, r)
        for n in config.n_grid
        for i, m1 in enumerate(config.m1_values)
        for r in range(config.replications)
    ]


@dataclass
class ExperimentRow:
    n: int
    m1: float
    replication: int
    penalty: str
    tree: ContextTree
    equivalent_to_truth: bool
    score_diff: float
    runtime_ms: float
    warnings: list[str]

    @property
    def tree_size(self) -> int:
        return self.tree.size

    def csv_row(self) -> tuple:
        return (self.n, self.m1, self.penalty, self.tree_size, self.equivalent_to_truth, self.score_diff,
                self.runtime_ms)


def run_cell(config: ExperimentConfig, cell: Cell) -> list[ExperimentRow]:
    """Simulate one data set, run the preliminary EM once and prune under every penalty."""
    truth = config.truth(cell.m1)
    rng = np.random.default_rng(cell.seed(config.seed))
    x = simulate_states(truth.transitions, cell.n, rng)
    y = np.atleast_1d(sample(truth.emissions, x, rng))
    cap = state_cap() if config.state_cap is None else config.state_cap
    prelim = preliminary_stats(y, config.k, config.family, config.t_em, cell.seed(config.seed) + [1],
                               config.max_em_iters, cap=cap, variance=truth.emissions.variance
                               if config.family == "gaussian-known-var" else None)
    true_ll = loglik(truth, y)
    rows = []
    for pen in config.penalties:
        start = time.perf_counter()
        best = prune(prelim, y, pen, config.refine_em)
        elapsed = prelim.seconds + time.perf_counter() - start
        true_score = -true_ll + pen(cell.n, config.true_tree.size)
        rows.append(ExperimentRow(cell.n, cell.m1, cell.replication, pen.label, best.tree,
                                  equivalent(best.tree, config.true_tree), best.score - true_score,
                                  round(1000 * elapsed, 3), list(best.meta["warnings"])))
    return rows


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: list[ExperimentRow]

    def csv_rows(self) -> list[tuple]:
        return [r.csv_row() for r in self.rows]

    def _groups(self):
        groups: dict[tuple, list[ExperimentRow]] = {}
        for r in self.rows:
            groups.setdefault((r.n, r.m1, r.penalty), []).append(r)
        return groups

    def summary(self) -> dict:
        cells = []
        for (n, m1, pen), rs in self._groups().items():
            cells.append({
                "n": n,
                "m1": m1,
                "penalty": pen,
                "replications": len(rs),
                "recovery_rate": sum(r.equivalent_to_truth for r in rs) / len(rs),
                "median_tree_size": float(np.median([r.tree_size for r in rs])),
                "median_score_diff": float(np.median([r.score_diff for r in rs])),
                "tree_sizes": [r.tree_size for r in rs],
                "trees": [list(r.tree.leaves) for r in rs],
            })
        return {"true_tree": list(self.config.true_tree.leaves), "recovery_rate_by_cell": cells}

    def table(self, value: str) -> tuple[list[str], list[list]]:
        """Wide table of per-cell medians, one row per n and one column per (penalty, m1).

        ``value`` is ``"tree_size"`` or ``"score_diff"``.
        """
        groups = self._groups()
        labels = [p.label for p in self.config.penalties]
        header = ["n"] + [f"{pen}|m1={m1:g}" for pen in labels for m1 in self.config.m1_values]
        table = []
        for n in self.config.n_grid:
            row = [n]
            for pen in labels:
                for m1 in self.config.m1_values:
                    rs = groups.get((n, m1, pen), [])
                    row.append(float(np.median([getattr(r, value) for r in rs])) if rs else "")
            table.append(row)
        return header, table

    def warnings(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            for w in r.warnings:
                msg = f"n={r.n} m1={r.m1:g} rep={r.replication}: {w}"
                if msg not in seen:
                    seen.append(msg)
        return seen


def _run_cell_args(args):
    return run_cell(*args)


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    """Run every cell of the plan; ``jobs > 1`` fans cells out to worker processes.

    Each cell draws from its own seed ``[seed, n, replication, m1_index]``, so
    the result does not depend on ``jobs`` or on scheduling.
    """
    plan = experiment_plan(config)
    if jobs > 1 and len(plan) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_args, [(config, c) for c in plan]))
    else:
        results = [run_cell(config, c) for c in plan]
    return ExperimentReport(config, [row for rows in results for row in rows])
