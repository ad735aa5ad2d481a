from __future__ import annotations

import numpy as np
import pytest

from treecutoff.chain import ChainOperator
from treecutoff.spectral import (PowerIterationError, QuotientDisabled, RelaxationEstimator,
                                 block_spectrum, bottleneck_ratio, check_grounded,
                                 complement_poincare_check, dense_spectrum, expand_spectrum,
                                 poincare_csv, poincare_line_check, poincare_tree_check,
                                 power_iteration, quotient_validation, rayleigh_ratio,
                                 region_bottleneck, relaxation_time, tree_dirichlet_sup,
                                 validate_block_spectrum, variational_gap_check)
from treecutoff.topology import TreeFamilySpec, build_family_tree, path_graph, single_tree


def test_lazy_edge_relaxation():
    rep = relaxation_time(ChainOperator(path_graph(1)))
    assert rep.lambda_2 == pytest.approx(0.0, abs=1e-15)
    assert rep.t_rel == pytest.approx(1.0)


def test_three_path_lambda2():
    c = ChainOperator(path_graph(2))
    lam = np.sort(np.linalg.eigvals(c.to_dense()).real)
    assert relaxation_time(c).lambda_2 == pytest.approx(lam[-2], abs=1e-10)


def test_non_lazy_lambda_star_uses_min():
    rep = relaxation_time(ChainOperator(path_graph(2), 0.0))
    assert rep.lambda_min == pytest.approx(-1.0)
    assert rep.lambda_star == pytest.approx(1.0)
    assert rep.t_rel > 1e12  # periodic: no gap up to rounding


def test_family_relaxation_bands(c2, c3):
    r2 = relaxation_time(c2, bottleneck_sets=["T0"])
    r3 = relaxation_time(c3, bottleneck_sets=["T0"])
    assert r2.method == "dense" and r3.method == "quotient"
    q2 = r2.t_rel / c2.graph.spec.N
    q3 = r3.t_rel / c3.graph.spec.N
    assert 1 / 64 <= q2 <= 64 and 1 / 64 <= q3 <= 64
    assert max(q2, q3) / min(q2, q3) <= 4
    assert r2.cheeger_consistent() and r3.cheeger_consistent()


def test_quotient_equals_dense_at_k2(c2):
    assert relaxation_time(c2, "quotient").lambda_2 == pytest.approx(
        relaxation_time(c2, "dense").lambda_2, abs=1e-8)


@pytest.mark.parametrize("spec", [TreeFamilySpec(1), TreeFamilySpec(2),
                                  TreeFamilySpec(2, leaf_self_loops=True)])
@pytest.mark.parametrize("laziness", [0.5, 0.0])
def test_block_spectrum_matches_dense(spec, laziness):
    c = ChainOperator(build_family_tree(spec), laziness)
    assert validate_block_spectrum(c) <= 1e-10
    assert validate_block_spectrum(c, kill="T0") <= 1e-10


def test_block_multiplicities_count_states(c3):
    vals, mult = block_spectrum(c3)
    assert mult.sum() == c3.n_states
    assert expand_spectrum(vals[:3], mult[:3]).size == mult[:3].sum()


def test_quotient_validation_cached_and_ok(g3):
    s = quotient_validation(g3)
    assert s["ok"] and set(s["errors"]) == {"k=1", "k=2"}
    assert quotient_validation(g3) is s


def test_quotient_disabled_on_failure(monkeypatch):
    from treecutoff import spectral
    g = build_family_tree(TreeFamilySpec(3, alpha=2))
    monkeypatch.setitem(spectral._QUOTIENT_STATUS, (spectral._family_key(g), 0.5),
                        {"ok": False, "errors": {"k=1": 1.0}})
    with pytest.raises(QuotientDisabled):
        relaxation_time(ChainOperator(g), "quotient")


def test_power_iteration_small():
    c = ChainOperator(build_family_tree(TreeFamilySpec(1)))
    lam, _, _, _ = power_iteration(c)
    assert lam == pytest.approx(dense_spectrum(c)[-2], abs=1e-9)


def test_power_iteration_reports_residual():
    c = ChainOperator(build_family_tree(TreeFamilySpec(1)))
    with pytest.raises(PowerIterationError) as err:
        power_iteration(c, max_iter=5)
    assert err.value.iterations == 5 and err.value.residual > 0


def test_bottleneck_single_edge():
    c = ChainOperator(path_graph(1))
    # Q(S, S^c) = pi(0) P(0, 1) = 1/4, divided by pi(S) = 1/2
    assert bottleneck_ratio(c, [0]) == pytest.approx(0.5)


def test_bottleneck_rejects_heavy_set(c2):
    mask = c2.graph.region_mask("T0")
    with pytest.raises(ValueError):
        bottleneck_ratio(c2, mask)
    r = region_bottleneck(c2, "T0")
    assert r["side"] == "complement"
    assert 1 / 16 <= r["phi"] * c2.graph.spec.N <= 16


def test_line_poincare():
    r = poincare_line_check(64, 1000, seed=1)
    assert r["passed"] and r["max_random_ratio"] <= r["exact_sup_ratio"] + 1e-12
    assert r["maximizer_ratio"] == pytest.approx(r["exact_sup_ratio"], rel=1e-10)
    n = 200
    f = np.arange(n + 1, dtype=float)
    lin = (f[1:] ** 2).sum() / (n * n * n)
    assert lin == pytest.approx(1 / 3, rel=0.01)
    with pytest.raises(ValueError):
        poincare_line_check(0)


def test_tree_poincare_small_and_band():
    c = ChainOperator(single_tree(3))
    S = np.sqrt(c.stationary())
    A = np.eye(3) - S[:, None] * c.to_dense() / S[None, :]
    exact = 1 / np.linalg.eigvalsh(A[1:, 1:]).min()
    assert tree_dirichlet_sup(3) == pytest.approx(exact, rel=1e-12)
    r = poincare_tree_check([7, 15, 31, 63], trials=200)
    assert r["random_ok"] and r["spread"] <= 4
    assert poincare_csv(r["rows"]).splitlines()[0] == "size,exact_sup,sup_over_size"


def test_grounding_enforced():
    with pytest.raises(ValueError):
        check_grounded(np.ones(7), np.array([True] + [False] * 6))


def test_complement_poincare(g2, g3):
    r2 = complement_poincare_check(g2, trials=200)
    assert r2["method"] == "dense" and r2["random_ok"] and r2["sup_over_N"] <= 64
    r3 = complement_poincare_check(g3)
    assert r3["method"] == "quotient" and r3["sup_over_N"] <= 64
    assert rayleigh_ratio(ChainOperator(g2), np.zeros(g2.vertex_count)) == 0.0


def test_variational_gap():
    e = variational_gap_check(ChainOperator(path_graph(1)))
    assert e["t_rel"] == pytest.approx(1.0) and e["rayleigh"] == pytest.approx(1.0)
    p = variational_gap_check(ChainOperator(path_graph(2)))
    assert p["rel_error"] <= 1e-10 and p["random_ok"]


def test_variational_gap_family(c2):
    r = variational_gap_check(c2, trials=100)
    assert r["rel_error"] <= 1e-8 and r["random_ok"]


def test_estimator(c2):
    est = RelaxationEstimator().fit(c2)
    assert est.predict() == est.t_rel_ > 1
    assert "T0" in est.report_.bottleneck
