from __future__ import annotations

import numpy as np
import pytest

from treecutoff.chain import ChainOperator
from treecutoff.hitting import (HittingTimeSolver, SolverError, excursion_convention_table,
                                excursion_moments, hitting_mean, hitting_second_moment,
                                laziness_transfer_check, local_time_law)
from treecutoff.topology import PATH, VertexRef, path_graph

ZERO = VertexRef(PATH, 0)


def path_tau_law(n: int, t_max: int) -> np.ndarray:
    """P(tau_0 = t) for the non-lazy walk on {0..n} from n, by forward recursion."""
    P = np.zeros((n + 1, n + 1))
    for x in range(1, n + 1):
        nb = [x - 1] + ([x + 1] if x < n else [])
        for y in nb:
            P[x, y] = 1 / len(nb)
    mu = np.zeros(n + 1)
    mu[n] = 1.0
    law = np.zeros(t_max + 1)
    for t in range(1, t_max + 1):
        mu = mu @ P
        law[t] = mu[0]
        mu[0] = 0.0
    return law


def test_three_path_mean():
    c = ChainOperator(path_graph(2), 0.0)
    m = hitting_mean(c, ZERO)
    assert m.mean[2] == pytest.approx(4.0, abs=1e-12)
    assert m.mean[1] == pytest.approx(3.0, abs=1e-12)
    assert m.mean[0] == 0.0


def test_three_path_variance_by_enumeration():
    c = ChainOperator(path_graph(2), 0.0)
    m = hitting_second_moment(c, ZERO)
    law = path_tau_law(2, 200)
    t = np.arange(201)
    # tau = 2G with G geometric(1/2): the tail beyond 200 steps is 2^-100
    tail = 1.0 - law.sum()
    assert tail < 1e-25
    var = (law * t**2).sum() - (law * t).sum() ** 2
    assert m.variance[2] == pytest.approx(var, abs=1e-6)
    assert m.second_moment[0] == 0.0


def test_family_mean_and_variance_bands(c2, g2):
    m = hitting_second_moment(c2, ZERO)
    x = g2.path_length
    N, k = g2.spec.N, 2
    assert 0.5 <= m.mean[x] / (6 * N * k) <= 1.5
    assert 1 / 64 <= m.variance[x] / (N * N * k) <= 64
    assert m.residuals["mean"] <= 1e-10 and m.residuals["second_moment"] <= 1e-10


def test_first_step_equations_hold(c2):
    m = hitting_mean(c2, ZERO)
    h = m.mean
    r = h - 1 - c2.matvec(h)
    r[0] = 0.0
    assert np.max(np.abs(r)) / h.max() <= 1e-9


def test_mean_increases_along_spine(c2, g2):
    h = hitting_mean(c2, ZERO).mean
    spine = np.array([g2.encode(VertexRef(PATH, i)) for i in range(g2.path_length + 1)])
    assert np.all(np.diff(h[spine]) > 0)


def test_target_everything_gives_zero():
    c = ChainOperator(path_graph(2))
    m = hitting_second_moment(c, np.ones(3, dtype=bool))
    assert not m.mean.any() and not m.second_moment.any()


def test_laziness_transfer_examples(c2, g2):
    r = laziness_transfer_check(ChainOperator(path_graph(2), 0.0), ZERO, 2)
    assert r["mean_lazy"] == pytest.approx(2 * r["mean_nonlazy"], rel=1e-9)
    assert r["var_lazy"] == pytest.approx(4 * r["var_nonlazy"] + 2 * r["mean_nonlazy"], rel=1e-9)
    r0 = laziness_transfer_check(ChainOperator(path_graph(2), 0.0), ZERO, 0)
    assert r0["mean_lazy"] == r0["mean_nonlazy"] == 0
    rk = laziness_transfer_check(c2, ZERO, g2.path_length)
    assert rk["var_lazy"] == pytest.approx(4 * rk["var_nonlazy"] + 2 * rk["mean_nonlazy"], rel=1e-8)


def test_excursion_small_tree():
    e = excursion_moments(3)
    assert e.mean == pytest.approx(2.0, abs=1e-12)
    assert e.closed_form == 4.0
    assert e.second_moment >= e.mean**2
    lazy = excursion_moments(3, lazy=True)
    assert lazy.mean == pytest.approx(4.0, abs=1e-12)
    assert lazy.variance == pytest.approx(4 * e.variance + 2 * e.mean, abs=1e-12)


def test_excursion_return_time_identity():
    for n in (7, 15, 31):
        e = excursion_moments(n, leaf_self_loops=True)
        # E[return] = 1 / pi(root) = total degree / 2; a loop adds 2 to a leaf's degree
        assert e.mean == pytest.approx((2 * (n - 1) + 2 * ((n + 1) // 2)) / 2, rel=1e-12)
        assert e.mean == pytest.approx(e.closed_form, rel=1e-12)


def test_excursion_conventions_band():
    rows = excursion_convention_table()
    keys = {(r["lazy"], r["leaf_self_loops"], r["root_context"]) for r in rows}
    assert len(keys) == 8
    for key in keys:
        vals = [r["second_over_n2"] for r in rows
                if (r["lazy"], r["leaf_self_loops"], r["root_context"]) == key]
        assert all(1 / 64 <= v <= 64 for v in vals)
    assert all(r["mean"] >= 2 for r in rows)
    matching = {(r["lazy"], r["leaf_self_loops"], r["root_context"]) for r in rows
                if r["matches_closed_form"]}
    assert matching == {(False, True, "isolated"), (False, True, "in_situ")}


def test_excursion_rejects_bad_sizes():
    with pytest.raises(ValueError):
        excursion_moments(2)
    with pytest.raises(ValueError):
        excursion_moments(10)


@pytest.mark.parametrize("n,site", [(1, 1), (4, 1), (4, 4), (16, 1), (16, 4), (16, 16)])
def test_local_time_geometric(n, site):
    law = local_time_law(n, site)
    assert law.max_pmf_error() <= 1e-10
    assert law.mean == pytest.approx(2 * site, rel=1e-10)


def test_local_time_single_site():
    law = local_time_law(1, 1)
    assert law.pmf([0, 1, 2]) == pytest.approx([0.0, 0.5, 0.25])


def test_local_time_reflecting_top():
    law = local_time_law(8, 8, boundary="reflecting")
    assert law.p_escape == pytest.approx(1 / 8)
    assert local_time_law(8, 3, boundary="reflecting").max_pmf_error() <= 1e-10
    with pytest.raises(ValueError):
        local_time_law(4, 5)


def test_solver_estimator(c2):
    est = HittingTimeSolver().fit(c2)
    assert est.predict([0])[0] == 0.0
    assert np.all(est.variance_ >= 0)
    assert est.get_params() == {"target": (PATH, 0), "second_moment": True}


def test_solver_error_carries_residual():
    err = SolverError("x", 1.0)
    assert err.residual == 1.0
