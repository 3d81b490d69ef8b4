import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import brute_force
from vlhmm.emissions import EmissionParams
from vlhmm.errors import DegenerateClustering, DepthTooSmall, InvalidArgs, NonFiniteInput, StateCapExceeded
from vlhmm.inference import (
    FullParams,
    SufficientStats,
    count_transitions,
    default_depth,
    em_fit,
    kmeans_1d,
    loglik,
    posteriors,
    state_cap,
    sufficient_stats,
    transition_mstep,
)
from vlhmm.tree import ContextTree, enumerate_complete_trees, full_tree, window_leaf_map
from vlhmm.vlmc import TransitionParams, embed, simulate_states

ORDER1 = ContextTree.from_leaves(["0", "1"], 2)
T3 = ContextTree.from_leaves(["00", "10", "1"], 2)
SMALL_TREES = [t for t in enumerate_complete_trees(2, 4) if t.depth <= 2]


def random_instance(rng, tree=None, family="gaussian-shared-var", n=None):
    tree = tree or SMALL_TREES[rng.integers(len(SMALL_TREES))]
    rows = rng.dirichlet(np.ones(2), size=tree.size)
    if family == "poisson":
        em = EmissionParams(family, rng.uniform(0.5, 5, 2))
    else:
        em = EmissionParams(family, rng.normal(0, 2, 2), rng.uniform(0.3, 2))
    n = n or int(rng.integers(1, 7))
    x = simulate_states(TransitionParams(tree, rows), n, rng, init="uniform")
    y = np.atleast_1d(
        rng.poisson(em.means[x]).astype(float) if family == "poisson" else rng.normal(em.means[x], 1.0)
    )
    return FullParams(TransitionParams(tree, rows), em), y


def oracle(params, y, M):
    rows = {s: r for s, r in zip(params.tree.leaves, params.transitions.rows)}
    em = params.emissions
    return brute_force(params.tree.leaves, rows, em.family, em.means, em.variance, y, M)


def decoding_instance(n=400, seed=0):
    """Means +-100: the hidden path can be read off the signs of y."""
    rng = np.random.default_rng(seed)
    trans = TransitionParams.from_mapping(T3, {"00": [0.3, 0.7], "10": [0.8, 0.2], "1": [0.4, 0.6]})
    x = simulate_states(trans, n, rng)
    em = EmissionParams("gaussian-shared-var", [-100.0, 100.0], 1.0)
    y = rng.normal(em.means[x], 1.0)
    return FullParams(trans, em), x, y


class TestLoglik:
    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), family=st.sampled_from(["gaussian-shared-var", "poisson"]))
    def test_matches_brute_force(self, seed, family):
        rng = np.random.default_rng(seed)
        params, y = random_instance(rng, family=family)
        M = max(1, params.tree.depth)
        ll, _, _ = oracle(params, y, M)
        assert loglik(params, y, M) == pytest.approx(ll, rel=1e-10)

    def test_order1_n8(self):
        rng = np.random.default_rng(4)
        params, y = random_instance(rng, ORDER1, n=8)
        assert loglik(params, y, 1) == pytest.approx(oracle(params, y, 1)[0], rel=1e-10)

    def test_single_observation(self):
        params = FullParams(TransitionParams.uniform(ORDER1), EmissionParams("gaussian-shared-var", [0.0, 2.0], 1.0))
        want = np.log(0.5 * stats.norm.pdf(0) + 0.5 * stats.norm.pdf(-2))
        assert loglik(params, [0.0]) == pytest.approx(want, rel=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_independent_of_window_depth(self, seed):
        rng = np.random.default_rng(seed)
        params, y = random_instance(rng, T3, n=40)
        values = [loglik(params, y, M) for M in (2, 3, 5)]
        np.testing.assert_allclose(values, values[0], rtol=1e-10)

    def test_label_permutation_invariance(self):
        rng = np.random.default_rng(5)
        params, y = random_instance(rng, T3, n=50)
        assert loglik(params.permuted([1, 0]), y, 3) == pytest.approx(loglik(params, y, 3), rel=1e-10)

    def test_long_sequence_is_finite(self):
        params, _, y = decoding_instance(n=20000)
        assert np.isfinite(loglik(params, y, 6))

    def test_errors(self):
        params = FullParams(TransitionParams.uniform(T3), EmissionParams("gaussian-shared-var", [0, 1], 1.0))
        with pytest.raises(DepthTooSmall):
            loglik(params, [0.0, 1.0], 1)
        with pytest.raises(NonFiniteInput):
            loglik(params, [0.0, np.nan])
        with pytest.raises(StateCapExceeded):
            loglik(params, [0.0], 13)
        with pytest.raises(InvalidArgs):
            loglik(params, [])


class TestPosteriors:
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_marginals_match_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        params, y = random_instance(rng)
        M = max(1, params.tree.depth)
        _, marg, S_t = oracle(params, y, M)
        np.testing.assert_allclose(posteriors(params, y, M).state_marginals, marg, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(sufficient_stats(params, y, M).S_t, S_t, rtol=1e-10, atol=1e-12)

    def test_normalisation_and_consistency(self):
        rng = np.random.default_rng(6)
        params, y = random_instance(rng, T3, n=60)
        post = posteriors(params, y, 3)
        np.testing.assert_allclose(post.single.sum(axis=1), 1.0, atol=1e-9)
        k, S = 2, 8
        # sum over the appended symbol gives W_t; summing over the dropped symbol gives W_{t+1}
        np.testing.assert_allclose(post.pairs.sum(axis=2), post.single[:-1], atol=1e-9)
        nxt = np.zeros_like(post.single[1:])
        w = np.arange(S)
        for x in range(k):
            np.add.at(nxt, (slice(None), (w * k) % S + x), post.pairs[:, :, x])
        np.testing.assert_allclose(nxt, post.single[1:], atol=1e-9)

    def test_near_deterministic_decoding(self):
        params, x, y = decoding_instance()
        marg = posteriors(params, y, 2).state_marginals
        assert np.all(marg[np.arange(x.size), (y > 0).astype(int)] >= 0.999)

    def test_transition_statistic(self):
        params, x, y = decoding_instance(n=4000)
        stats_ = sufficient_stats(params, y, 2)
        assert np.all(stats_.S_t >= 0)
        assert stats_.S_t.sum() == pytest.approx(1.0, abs=1e-9)
        counts = np.zeros((4, 2))
        np.add.at(counts, (2 * x[:-2] + x[1:-1], x[2:]), 1.0)
        # the statistic also counts the two transitions that start in the pre-sample window
        np.testing.assert_allclose(stats_.S_t * x.size, counts, atol=2.0)
        np.testing.assert_allclose(stats_.S_t, counts / x.size, atol=1e-3)


class TestTransitionMStep:
    def test_hand_count(self):
        x = np.array([0, 0, 1, 0, 0, 1])
        S_t = np.zeros((2, 2))
        np.add.at(S_t, (x[:-1], x[1:]), 1.0)
        n = S_t.sum()
        stats_ = SufficientStats(1, 2, int(n), S_t / n, None, 0.0)
        rows = transition_mstep(stats_, ORDER1)
        np.testing.assert_array_equal(rows.row("0"), [0.5, 0.5])
        np.testing.assert_array_equal(rows.row("1"), [1.0, 0.0])
        np.testing.assert_array_equal(count_transitions(x, ORDER1, 1).rows, rows.rows)

    def test_uniform_for_unvisited(self):
        stats_ = SufficientStats(1, 2, 1, np.array([[1.0, 0.0], [0.0, 0.0]]), None, 0.0)
        np.testing.assert_array_equal(transition_mstep(stats_, ORDER1).row("1"), [0.5, 0.5])

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_aggregation_consistency(self, seed):
        rng = np.random.default_rng(seed)
        params, y = random_instance(rng, full_tree(2, 3), n=80)
        stats_ = sufficient_stats(params, y, 3)
        coarse = transition_mstep(stats_, T3)
        fine = transition_mstep(stats_, full_tree(2, 3))
        leaf_mass = np.zeros(8)
        np.add.at(leaf_mass, window_leaf_map(full_tree(2, 3), 3), stats_.S_t.sum(axis=1))
        for s in T3.leaves:
            members = [i for i, f in enumerate(fine.tree.leaves) if f.endswith(s)]
            weights = leaf_mass[members]
            avg = weights @ fine.rows[members] / weights.sum()
            np.testing.assert_allclose(coarse.row(s), avg, atol=1e-10)

    def test_depth_check(self):
        stats_ = SufficientStats(1, 2, 1, np.full((2, 2), 0.25), None, 0.0)
        with pytest.raises(DepthTooSmall):
            transition_mstep(stats_, T3)


class TestKMeans:
    def test_beats_random_interval_partitions(self):
        rng = np.random.default_rng(8)
        y = np.sort(rng.normal(size=40))
        best = kmeans_1d(y, 2, seed=0).within_var
        for _ in range(200):
            cut = rng.integers(1, 40)
            wv = (np.sum((y[:cut] - y[:cut].mean()) ** 2) + np.sum((y[cut:] - y[cut:].mean()) ** 2)) / 40
            assert best <= wv + 1e-12

    def test_well_separated(self):
        rng = np.random.default_rng(9)
        x = rng.integers(0, 2, 1000)
        y = rng.normal(100.0 * x, 1.0)
        km = kmeans_1d(y, 2, seed=0)
        np.testing.assert_allclose(km.means, [0, 100], atol=0.1)
        np.testing.assert_array_equal(km.assignments, x)

    def test_monotone_trace(self):
        y = np.random.default_rng(10).normal(size=300)
        trace = kmeans_1d(y, 3, seed=1).trace
        assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))

    def test_degenerate(self):
        with pytest.raises(DegenerateClustering):
            kmeans_1d(np.ones(10), 2)


class TestEM:
    @pytest.mark.parametrize("seed", range(20))
    def test_ascent(self, seed):
        rng = np.random.default_rng(100 + seed)
        params, y = random_instance(rng, T3, n=200)
        fit = em_fit(y, T3, 2, t_em=1e-6, max_iters=60, seed=seed)
        assert np.all(np.diff(fit.loglik_trace) >= -1e-8)

    def test_recovers_decoded_path_frequencies(self):
        params, x, y = decoding_instance(n=2000)
        fit = em_fit(y, T3, 2, seed=0)
        empirical = count_transitions(x, T3, 2)
        np.testing.assert_allclose(fit.params.transitions.rows, empirical.rows, atol=0.05)
        np.testing.assert_allclose(fit.params.emissions.means, [-100, 100], atol=0.2)

    def test_max_iters_warning(self):
        params, y = random_instance(np.random.default_rng(3), T3, n=100)
        fit = em_fit(y, T3, 2, t_em=1e-14, max_iters=2)
        assert not fit.converged and fit.iterations == 2
        assert any(w.startswith("em-max-iters") for w in fit.warnings)

    def test_stats_belong_to_returned_params(self):
        params, y = random_instance(np.random.default_rng(12), T3, n=100)
        fit = em_fit(y, T3, 2)
        assert fit.stats.loglik == pytest.approx(loglik(fit.params, y, 2), rel=1e-12)
        assert fit.loglik_trace[-1] == fit.stats.loglik


class TestDepth:
    @pytest.mark.parametrize("n, M", [(2, 1), (100, 4), (1000, 6), (20000, 9)])
    def test_default_depth(self, n, M):
        assert default_depth(n, 2, 4096) == (M, [])

    def test_cap_reduces_depth(self):
        M, warnings = default_depth(20000, 3, 4096)
        assert M == 7 and warnings

    def test_env_override(self, monkeypatch):
        monkeypatch.setenv("VLHMM_STATE_CAP", "64")
        assert state_cap() == 64
        assert default_depth(20000, 2)[0] == 6
        monkeypatch.setenv("VLHMM_STATE_CAP", "lots")
        with pytest.raises(InvalidArgs):
            state_cap()


def test_embedding_preserves_stats_marginals():
    rng = np.random.default_rng(13)
    params, y = random_instance(rng, T3, n=50)
    big = FullParams(embed(params.transitions, full_tree(2, 3)), params.emissions)
    np.testing.assert_allclose(posteriors(params, y, 3).state_marginals, posteriors(big, y, 3).state_marginals,
                               atol=1e-12)
