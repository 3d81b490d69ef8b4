import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlhmm.emissions import EmissionParams, sample
from vlhmm.errors import BudgetExceeded, ConfigError, InvalidArgs
from vlhmm.inference import FullParams, loglik
from vlhmm.selection import (
    EXPERIMENT_COLUMNS,
    EMConfig,
    ExperimentConfig,
    Penalty,
    brute_force_select,
    experiment_plan,
    penalty,
    preliminary_stats,
    prune,
    prune_search,
    run_cell,
    run_experiment,
    score,
)
from vlhmm.tree import ContextTree, enumerate_complete_trees, equivalent, is_subtree, permute
from vlhmm.vlmc import TransitionParams, simulate_states

BIC = Penalty("bic")
ALPHA = Penalty("alpha", alpha=5.1)
ORDER1 = ContextTree.from_leaves(["0", "1"], 2)
T3 = ContextTree.from_leaves(["00", "10", "1"], 2)


def simulate(rows, tree, means, n, seed, variance=1.0):
    params = FullParams(TransitionParams.from_mapping(tree, rows),
                        EmissionParams("gaussian-shared-var", means, variance))
    rng = np.random.default_rng(seed)
    x = simulate_states(params.transitions, n, rng)
    return params, np.asarray(sample(params.emissions, x, rng))


def small_config(**overrides):
    data = {
        "true_tree": ["00", "10", "1"],
        "true_transitions": {"00": [0.2, 0.8], "10": [0.8, 0.2], "1": [0.5, 0.5]},
        "emission_family": "gaussian-shared-var",
        "emission_truth": {"means": [0.0, 4.0], "variance": 1.0},
        "n_grid": [60, 80],
        "m1_grid": [3.0, 4.0],
        "penalties": [{"kind": "bic"}, {"kind": "alpha", "alpha": 5.1}],
        "replications": 2,
        "seed": 11,
    }
    data.update(overrides)
    return data


class TestPenalty:
    @pytest.mark.parametrize("pen, want", [(ALPHA, (21 / 2 + 15.3) * np.log(1000)), (BIC, 3 * np.log(1000))])
    def test_examples(self, pen, want):
        assert penalty(pen, 1000, 6) == pytest.approx(want, rel=1e-14)

    def test_example_magnitudes(self):
        assert penalty(ALPHA, 1000, 6) == pytest.approx(178.22, abs=5e-3)
        assert penalty(BIC, 1000, 6) == pytest.approx(20.72, abs=5e-3)

    @pytest.mark.parametrize("k", [2, 3, 5])
    @pytest.mark.parametrize("alpha", [0.5, 5.1, 12.0])
    def test_closed_form_matches_summation(self, k, alpha):
        pen = Penalty("alpha", k, alpha)
        for n in (2, 100, 20_000):
            for t in range(1, 101):
                oracle = sum(((k - 1) * s + alpha) / 2 for s in range(1, t + 1)) * np.log(n)
                assert penalty(pen, n, t) == pytest.approx(oracle, rel=1e-12)

    @pytest.mark.parametrize("pen", [BIC, ALPHA, Penalty("alpha", 3, 1.0)])
    def test_strictly_increasing_in_size(self, pen):
        values = [pen(50, t) for t in range(1, 30)]
        assert np.all(np.diff(values) > 0)

    def test_depends_only_on_size(self):
        tree = ContextTree.from_leaves(["0", "01", "11"], 2)
        assert ALPHA(500, permute(tree, [1, 0]).size) == ALPHA(500, tree.size)

    def test_zero_hook(self):
        assert Penalty("zero")(1000, 50) == 0.0

    @pytest.mark.parametrize("kind, alpha", [("alpha", None), ("alpha", 0.0), ("alpha", -1.0), ("aic", None)])
    def test_bad_penalties(self, kind, alpha):
        with pytest.raises(InvalidArgs):
            Penalty(kind, 2, alpha)

    @pytest.mark.parametrize("n, t", [(1, 3), (10, 0)])
    def test_bad_arguments(self, n, t):
        with pytest.raises(InvalidArgs):
            penalty(BIC, n, t)

    def test_labels_and_json(self):
        assert ALPHA.label == "alpha=5.1" and BIC.label == "bic"
        assert Penalty.from_json(ALPHA.to_json(), 2) == ALPHA


class TestScore:
    params, y = simulate({"0": [0.9, 0.1], "1": [0.2, 0.8]}, ORDER1, [0.0, 3.0], 120, 0)

    def test_score_is_negative_loglik_plus_penalty(self):
        s = score(ORDER1, self.params, self.y, None, ALPHA)
        ll = loglik(self.params, self.y)
        assert s.loglik == ll
        assert s.score == -ll + ALPHA(120, 2)

    def test_zero_penalty(self):
        s = score(ORDER1, self.params, self.y, None, Penalty("zero"))
        assert s.score == -loglik(self.params, self.y)

    def test_smaller_tree_wins_on_equal_likelihood(self):
        root = ContextTree.root(2)
        mixture = FullParams(TransitionParams(root, [[0.5, 0.5]]), self.params.emissions)
        embedded = FullParams(TransitionParams(ORDER1, [[0.5, 0.5], [0.5, 0.5]]), self.params.emissions)
        for pen in (BIC, ALPHA):
            small = score(root, mixture, self.y, None, pen)
            big = score(ORDER1, embedded, self.y, None, pen)
            assert small.loglik == pytest.approx(big.loglik, rel=1e-12)
            assert small.score < big.score

    def test_tree_mismatch(self):
        with pytest.raises(InvalidArgs):
            score(T3, self.params, self.y, None, BIC)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        params = FullParams(TransitionParams(T3, rng.dirichlet([1, 1], size=3)),
                            EmissionParams("gaussian-shared-var", rng.normal(0, 2, 2), rng.uniform(0.5, 2)))
        y = rng.normal(0, 2, 40)
        a = score(T3, params, y, None, ALPHA)
        b = score(permute(T3, [1, 0]), params.permuted([1, 0]), y, None, ALPHA)
        assert b.score == pytest.approx(a.score, rel=1e-10)


class TestBruteForceSelect:
    def test_iid_mixture_selects_root(self):
        rng = np.random.default_rng(3)
        x = rng.integers(0, 2, 400)
        y = sample(EmissionParams("gaussian-shared-var", [0.0, 6.0], 1.0), x, rng)
        best = brute_force_select(y, 2, 4, 2, "gaussian-shared-var", BIC)
        assert best.tree.leaves == ("",)

    def test_returns_the_minimum(self):
        _, y = simulate({"0": [0.9, 0.1], "1": [0.2, 0.8]}, ORDER1, [0.0, 4.0], 300, 4)
        best = brute_force_select(y, 2, 4, 2, "gaussian-shared-var", ALPHA)
        scores = [s for _, s in best.meta["scores"]]
        assert best.score == min(scores)
        assert len(scores) == len(enumerate_complete_trees(2, 4, 2))

    def test_budget(self):
        with pytest.raises(BudgetExceeded):
            brute_force_select(np.zeros(50), 2, 6, 3, "gaussian-shared-var", BIC, budget=5)

    def test_agrees_with_pruning_on_order_one_chain(self):
        _, y = simulate({"0": [0.9, 0.1], "1": [0.2, 0.8]}, ORDER1, [0.0, 4.0], 2000, 5)
        brute = brute_force_select(y, 2, 4, 2, "gaussian-shared-var", ALPHA, EMConfig(seed=1))
        pruned = prune_search(y, 2, "gaussian-shared-var", ALPHA, seed=1)
        assert equivalent(brute.tree, ORDER1)
        assert equivalent(pruned.tree, brute.tree)
        # pruning explores fewer trees and scores with plug-in parameters
        assert brute.score <= pruned.score + 1e-6 * y.size


class TestPruneSearch:
    def test_full_collapse(self):
        y = np.random.default_rng(6).normal(size=600)
        result = prune_search(y, 2, "gaussian-shared-var", BIC, seed=0)
        assert result.tree.size < 2 ** result.meta["depth"]
        assert result.tree.size <= 2

    def test_bookkeeping(self):
        _, y = simulate({"00": [0.2, 0.8], "10": [0.8, 0.2], "1": [0.5, 0.5]}, T3, [0.0, 4.0], 800, 7)
        result = prune_search(y, 2, "gaussian-shared-var", ALPHA, seed=0)
        M = result.meta["depth"]
        assert M == int(np.floor(np.log(800)))
        assert result.meta["accepted"] <= 2 ** M - 1
        assert result.meta["tested"] >= result.meta["accepted"] + 1
        assert is_subtree(result.tree, ContextTree.from_leaves([format(i, f"0{M}b") for i in range(2 ** M)], 2))
        assert result.score == pytest.approx(-result.loglik + ALPHA(800, result.tree.size), abs=0)
        trace = result.meta["loglik_trace"]
        assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[1:]).max())

    def test_sweep_without_acceptances_keeps_the_full_tree(self):
        # with no penalty every collapse of this instance loses likelihood, so one sweep ends the search
        _, y = simulate({"00": [0.2, 0.8], "10": [0.8, 0.2], "1": [0.5, 0.5]}, T3, [0.0, 4.0], 300, 8)
        prelim = preliminary_stats(y, 2, "gaussian-shared-var", depth=2)
        result = prune(prelim, y, Penalty("zero"))
        assert result.meta["accepted"] == 0
        assert result.tree.size == 4
        assert result.meta["tested"] == 1 + 2

    def test_deterministic(self):
        _, y = simulate({"00": [0.2, 0.8], "10": [0.8, 0.2], "1": [0.5, 0.5]}, T3, [0.0, 4.0], 500, 9)
        a = prune_search(y, 2, "gaussian-shared-var", BIC, seed=3)
        b = prune_search(y, 2, "gaussian-shared-var", BIC, seed=3)
        assert a.tree == b.tree and a.score == b.score

    def test_refine_em_improves_the_plug_in_score(self):
        _, y = simulate({"00": [0.2, 0.8], "10": [0.8, 0.2], "1": [0.5, 0.5]}, T3, [0.0, 4.0], 300, 8)
        prelim = preliminary_stats(y, 2, "gaussian-shared-var", depth=2)
        plain = prune(prelim, y, BIC)
        refined = prune(prelim, y, BIC, refine_em=5)
        assert refined.tree == plain.tree
        assert refined.score <= plain.score

    @pytest.mark.slow
    def test_recovers_three_leaf_tree_at_large_n(self):
        rows = {"00": [0.2, 0.8], "10": [0.8, 0.2], "1": [0.5, 0.5]}
        sizes = []
        for rep in range(10):
            _, y = simulate(rows, T3, [0.0, 4.0], 20_000, 100 + rep)
            tree = prune_search(y, 2, "gaussian-shared-var", BIC, seed=rep).tree
            sizes.append(tree.size if equivalent(tree, T3) else -tree.size)
        hits = sum(s > 0 for s in sizes)
        assert hits >= 8, f"BIC recovered {hits}/10; sizes (negative = wrong tree) {sizes}"


class TestExperimentConfig:
    def test_round_trip(self):
        cfg = ExperimentConfig.from_json(small_config())
        assert ExperimentConfig.from_json(json.loads(json.dumps(cfg.to_json()))).to_json() == cfg.to_json()

    @pytest.mark.parametrize(
        "field, value, needle",
        [
            ("n_grid", [], "config.n_grid"),
            ("n_grid", [1], "config.n_grid"),
            ("replications", 0, "config.replications"),
            ("seed", -1, "config.seed"),
            ("emission_family", "cauchy", "config.emission_family"),
            ("true_tree", ["0"], "config.true_tree"),
            ("true_transitions", {"00": [0.5, 0.6], "10": [1, 0], "1": [0, 1]}, "config.true_transitions"),
            ("penalties", [{"kind": "alpha"}], "config.penalties"),
            ("t_EM", 0, "config.t_EM"),
            ("emission_truth", {"means": [0, 1, 2], "variance": 1.0}, "config.emission_truth"),
        ],
    )
    def test_field_level_errors(self, field, value, needle):
        with pytest.raises(ConfigError, match=needle.replace(".", r"\.")):
            ExperimentConfig.from_json(small_config(**{field: value}))

    def test_missing_and_unknown_fields(self):
        data = small_config()
        del data["seed"]
        with pytest.raises(ConfigError, match="config.seed: missing"):
            ExperimentConfig.from_json(data)
        with pytest.raises(ConfigError, match="unknown"):
            ExperimentConfig.from_json(small_config(colour="red"))

    def test_reducible_truth(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json(small_config(true_tree=["0", "1"],
                                                    true_transitions={"0": [1.0, 0.0], "1": [0.0, 1.0]}))


class TestExperiment:
    cfg = ExperimentConfig.from_json(small_config())

    def test_plan_order_and_seeds(self):
        plan = experiment_plan(self.cfg)
        assert [(c.n, c.m1, c.replication) for c in plan[:4]] == [(60, 3.0, 0), (60, 3.0, 1), (60, 4.0, 0), (60, 4.0, 1)]
        assert len(plan) == 2 * 2 * 2
        assert len({tuple(c.seed(11)) for c in plan}) == len(plan)

    def test_run_cell_is_deterministic(self):
        cell = experiment_plan(self.cfg)[0]
        a = [r.csv_row()[:-1] for r in run_cell(self.cfg, cell)]
        b = [r.csv_row()[:-1] for r in run_cell(self.cfg, cell)]
        assert a == b
        assert [r[2] for r in a] == ["bic", "alpha=5.1"]

    def test_report(self):
        report = run_experiment(self.cfg)
        rows = report.csv_rows()
        assert len(rows) == 8 * 2 and all(len(r) == len(EXPERIMENT_COLUMNS) for r in rows)
        assert all(np.isfinite(r[5]) for r in rows)
        header, table = report.table("tree_size")
        assert header == ["n", "bic|m1=3", "bic|m1=4", "alpha=5.1|m1=3", "alpha=5.1|m1=4"]
        assert [row[0] for row in table] == [60, 80]
        summary = report.summary()
        assert summary["true_tree"] == ["00", "1", "10"]
        assert len(summary["recovery_rate_by_cell"]) == 8

    def test_jobs_do_not_change_results(self):
        one = [r[:-1] for r in run_experiment(self.cfg, jobs=1).csv_rows()]
        two = [r[:-1] for r in run_experiment(self.cfg, jobs=2).csv_rows()]
        assert one == two
