from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from treecutoff.chain import ChainOperator
from treecutoff.hitting import hitting_second_moment
from treecutoff.mixing import mixing_time
from treecutoff.montecarlo import (MCConfig, Welford, _Arrays, _step, excursion_sampler,
                                   geometric_chisquare, moment_summary, sample_hitting_time,
                                   sample_path_local_times, simulate_coupling)
from treecutoff.topology import (PATH, TreeFamilySpec, TreeGraph, VertexRef, build_family_tree,
                                 path_graph, single_tree)

ZERO = VertexRef(PATH, 0)


def within(x, se, exact, k=3.0):
    return abs(x - exact) <= k * se


def test_config_validation():
    with pytest.raises(ValueError):
        MCConfig(0, 0)
    with pytest.raises(ValueError):
        MCConfig(-1, 10)
    with pytest.raises(ValueError):
        MCConfig(0, 10, max_steps=0)
    a = MCConfig(7, 3).stream(2).random(4)
    assert np.array_equal(a, MCConfig(7, 3).stream(2).random(4))
    assert not np.array_equal(a, MCConfig(7, 3).stream(1).random(4))


def test_welford_matches_numpy():
    x = np.random.default_rng(0).exponential(size=1000)
    acc = Welford()
    for v in x:
        acc.push(v)
    assert acc.mean == pytest.approx(x.mean(), rel=1e-12)
    assert acc.variance == pytest.approx(x.var(ddof=1), rel=1e-10)
    s = moment_summary(x)
    assert s["se_mean"] == pytest.approx(x.std(ddof=1) / np.sqrt(1000), rel=1e-10)


def test_start_equals_target():
    st = sample_hitting_time(ChainOperator(path_graph(3)), ZERO, ZERO, MCConfig(1, 50))
    assert not st.tau.any() and st.truncations == 0


def test_path_hitting_mean():
    c = ChainOperator(path_graph(4), 0.0)
    st = sample_hitting_time(c, VertexRef(PATH, 4), ZERO, MCConfig(3, 100_000))
    s = st.summary()
    assert hitting_second_moment(c, ZERO).mean[4] == pytest.approx(16.0)
    assert within(s["mean"], s["se_mean"], 16.0)
    assert s["truncations"] == 0 and st.check_decomposition()


def test_truncation_reported():
    c = ChainOperator(path_graph(8))
    st = sample_hitting_time(c, VertexRef(PATH, 8), ZERO, MCConfig(3, 20, max_steps=5))
    assert st.truncations == 20


def test_family_mc_decomposition(mc2, g2):
    assert mc2.truncations == 0
    assert mc2.check_decomposition()
    assert np.all(mc2.tau == mc2.S + mc2.D.sum(axis=1))
    # the walk starts at the root of the top tree
    assert np.all(mc2.L[:, mc2.regions.index("T2")] >= 1)


def test_family_mc_matches_exact(mc2, c2, g2):
    m = hitting_second_moment(c2, ZERO)
    x = g2.path_length
    s = mc2.summary()
    assert within(s["mean"], s["se_mean"], m.mean[x])
    assert within(s["var"], s["se_var"], m.variance[x])


def test_local_time_of_first_tree_is_geometric(mc2, g2):
    n1 = g2.spec.levels[1]
    L1 = mc2.L[:, mc2.regions.index("T1")]
    r = geometric_chisquare(L1, 1 / (2 * n1))
    assert r["p_value"] > 0.01


def test_delay_covariance_scaling(mc2, g2):
    N = g2.spec.N
    levels = g2.spec.levels
    idx = {name: i for i, name in enumerate(mc2.regions)}
    pairs = [(i, j) for i in levels for j in levels if i > j]
    for i, j in pairs:
        Di = mc2.D[:, idx[f"T{i}"]].astype(float)
        Dj = mc2.D[:, idx[f"T{j}"]].astype(float)
        cov = np.cov(Di, Dj)[0, 1]
        assert abs(cov) / (N * N * levels[j] / levels[i]) <= 64


def test_lower_bound_consistency(mc2, worst2, g2, c2):
    tq = mixing_time(worst2, 0.25)
    pi_t0 = c2.stationary()[g2.region_mask("T0")].sum()
    hit = mc2.tau < tq
    p = hit.mean()
    se = np.sqrt(p * (1 - p) / hit.size)
    assert worst2(tq) >= pi_t0 - p - 3 * se


def test_determinism_across_threads(c2, g2):
    a = sample_hitting_time(c2, VertexRef(PATH, 16), ZERO, MCConfig(9, 64, threads=1))
    b = sample_hitting_time(c2, VertexRef(PATH, 16), ZERO, MCConfig(9, 64, threads=8))
    c = sample_hitting_time(c2, VertexRef(PATH, 16), ZERO, MCConfig(9, 64, threads=8, block=4096))
    assert a.to_csv() == b.to_csv() == c.to_csv()


@pytest.mark.parametrize("graph", [path_graph(2), single_tree(7, leaf_self_loops=True),
                                   build_family_tree(TreeFamilySpec(1))])
def test_step_kernel_frequencies(graph):
    c = ChainOperator(graph)
    P = c.to_dense()
    A = _Arrays(graph)
    u = np.random.default_rng(4).random(20_000)
    worst = 1.0
    for x in range(graph.vertex_count):
        nxt = np.array([_step(x, ui, c.laziness, *A.args()) for ui in u])
        support = np.flatnonzero(P[x] > 0)
        assert set(np.unique(nxt)) <= set(support)
        obs = np.array([(nxt == y).sum() for y in support])
        worst = min(worst, stats.chisquare(obs, P[x, support] * u.size).pvalue)
    assert worst > 0.01 / graph.vertex_count


def test_excursion_sampler_n3():
    t3 = single_tree(3)
    e = excursion_sampler(t3, MCConfig(5, 20_000))
    assert within(e["mean"], e["se_mean"], 2.0)
    assert np.all(e["lengths"] % 2 == 0) and np.all(e["lengths"] >= 2)
    lazy = excursion_sampler(t3, MCConfig(6, 20_000), lazy=True)
    assert within(lazy["mean"], lazy["se_mean"], 4.0)


def test_excursion_sampler_matches_exact_conventions():
    from treecutoff.hitting import excursion_moments
    t = single_tree(15, leaf_self_loops=True)
    for lazy in (False, True):
        for ctx in ("isolated", "in_situ"):
            e = excursion_sampler(t, MCConfig(8, 20_000), lazy=lazy, root_context=ctx)
            exact = excursion_moments(15, lazy=lazy, leaf_self_loops=True, root_context=ctx)
            assert within(e["mean"], e["se_mean"], exact.mean)


def test_path_local_times():
    counts = sample_path_local_times(4, MCConfig(10, 20_000))
    assert np.all(counts >= 0)
    for site in (1, 4):
        assert geometric_chisquare(counts[:, site], 1 / (2 * site))["p_value"] > 0.01


def test_chisquare_rejects_wrong_law():
    x = np.random.default_rng(1).geometric(0.2, 20_000)
    assert geometric_chisquare(x, 0.2)["p_value"] > 0.01
    assert geometric_chisquare(x, 0.3)["p_value"] < 1e-6
    with pytest.raises(ValueError):
        geometric_chisquare(np.array([0, 1]), 0.5)


def test_coupling_same_start():
    g = build_family_tree(TreeFamilySpec(1))
    cs = simulate_coupling(ChainOperator(g), VertexRef(PATH, 2), MCConfig(1, 20),
                           y_start=VertexRef(PATH, 2))
    assert not cs.tau.any()


def test_coupling_two_state():
    two = TreeGraph.from_regions(1, [])
    cs = simulate_coupling(ChainOperator(two), VertexRef(PATH, 1), MCConfig(2, 20_000),
                           y_start=VertexRef(PATH, 0))
    t = np.arange(8)
    p, se = cs.survival(t)
    assert np.all(np.abs(p - 0.5**t) <= 3 * se + 1e-12)


def test_coupling_requires_perfect_trees():
    g = build_family_tree(TreeFamilySpec(1, tree_mode="exact_size"))
    with pytest.raises(ValueError):
        simulate_coupling(ChainOperator(g), VertexRef(PATH, 0), MCConfig(1, 2))


def test_coupling_small_family_dominates_distance():
    from treecutoff.mixing import start_profile
    g = build_family_tree(TreeFamilySpec(1))
    c = ChainOperator(g)
    cs = simulate_coupling(c, VertexRef(PATH, g.path_length), MCConfig(3, 4000))
    assert not cs.truncated.any() and cs.phases_ordered()
    assert "collision" in cs.metadata["note"]
    t = np.unique(np.geomspace(1, 2000, 40).astype(int))
    p, se = cs.survival(t)
    d = start_profile(c, (PATH, g.path_length)).distance(t)
    assert np.all(p >= d - 3 * se - 1e-12)
