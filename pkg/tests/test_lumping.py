from __future__ import annotations

import numpy as np
import pytest

from treecutoff.chain import ChainOperator, point_mass, step_distribution, tv_distance
from treecutoff.lumping import (ExactLumper, LumpabilityUnavailable, Partition, UncertifiedPartition,
                                certify, coarsest_lumpable_partition, full_count_chain,
                                quotient_chain, validate_lumping)
from treecutoff.topology import (PATH, TreeFamilySpec, VertexRef, build_family_tree,
                                 canonical_starts, single_tree)


def test_tree_from_root_lumps_to_levels():
    for n in (7, 15, 63):
        c = ChainOperator(single_tree(n))
        p = coarsest_lumpable_partition(c, VertexRef(PATH, 0))
        assert p.certified
        assert p.n_classes == c.graph.region("T0").depth + 1


def test_depth_two_tree_birth_death():
    c = ChainOperator(single_tree(7))
    q = quotient_chain(coarsest_lumpable_partition(c, VertexRef(PATH, 0)))
    expected = np.array([[0.5, 0.5, 0.0],
                         [1 / 6, 0.5, 1 / 3],
                         [0.0, 0.5, 0.5]])
    assert np.allclose(q.transition, expected, atol=1e-15)
    assert np.allclose(q.pi, [2 / 12, 6 / 12, 4 / 12])


def test_family_start_n_k(c2, g2):
    p = coarsest_lumpable_partition(c2, VertexRef(PATH, g2.path_length))
    assert p.certified
    assert p.n_classes <= 300 < g2.vertex_count
    assert p.class_sizes.sum() == g2.vertex_count
    assert p.class_sizes[p.start_class] == 1
    q = quotient_chain(p)
    assert abs(q.pi.sum() - 1) <= 1e-14
    assert np.max(np.abs(q.transition.sum(axis=1) - 1)) <= 1e-14
    F = q.pi[:, None] * q.transition
    assert np.max(np.abs(F - F.T)) <= 1e-15


def test_leaf_start_certified(c2, g2):
    t2 = g2.region("T2")
    leaf = VertexRef("T2", 1 << t2.depth)
    p = coarsest_lumpable_partition(c2, leaf)
    assert p.certified
    # lift labels cover all states, leaf alone in its class
    labels = p.lift_labels(g2, leaf)
    assert np.sum(labels == labels[g2.encode(leaf)]) == 1


def test_orbit_and_full_routes_agree(c2, g2):
    for s in canonical_starts(g2):
        a = coarsest_lumpable_partition(c2, s, "orbit")
        b = coarsest_lumpable_partition(c2, s, "full")
        assert a.certified and b.certified
        assert a.n_classes == b.n_classes
        la = a.lift_labels(g2, g2.canonical(s))
        lb = b.lift_labels(g2, g2.canonical(s))
        # same partition up to relabelling
        pairs = set(zip(la.tolist(), lb.tolist()))
        assert len(pairs) == a.n_classes


def test_trivial_partition_is_original():
    c = ChainOperator(single_tree(7))
    cc = full_count_chain(c, VertexRef(PATH, 0))
    classes = np.arange(cc.n_states)
    part = Partition(cc, classes, certify(cc, classes), "full")
    q = quotient_chain(part)
    assert np.allclose(q.transition, c.to_dense(), atol=1e-15)


def test_uncertified_partition_rejected():
    c = ChainOperator(single_tree(7))
    cc = full_count_chain(c, VertexRef(PATH, 0))
    classes = np.zeros(cc.n_states, dtype=np.int64)
    classes[3] = 1
    assert not certify(cc, classes)
    with pytest.raises(UncertifiedPartition):
        quotient_chain(Partition(cc, classes, False, "full"))


def test_exact_size_unavailable():
    g = build_family_tree(TreeFamilySpec(2, tree_mode="exact_size"))
    with pytest.raises(LumpabilityUnavailable):
        coarsest_lumpable_partition(ChainOperator(g), VertexRef(PATH, 0))


def test_validate_lumping_powering(c2, g2):
    q = quotient_chain(coarsest_lumpable_partition(c2, VertexRef(PATH, g2.path_length)))
    r = validate_lumping(c2, q, [0, 1, 10, 100, 1000], VertexRef(PATH, g2.path_length))
    assert r["errors"][0] == 0.0
    assert r["max_error"] <= 1e-12


def test_validate_random_start(c2, g2):
    x = int(np.random.default_rng(11).integers(g2.vertex_count))
    s = g2.decode(x)
    q = quotient_chain(coarsest_lumpable_partition(c2, s))
    assert validate_lumping(c2, q, [50], s)["max_error"] <= 1e-12


def test_tv_on_quotient_equals_full(c2, g2):
    s = VertexRef("T1", 5)
    q = quotient_chain(coarsest_lumpable_partition(c2, s))
    mu = step_distribution(c2, point_mass(g2.vertex_count, g2.encode(s)), 300)
    muq = q.step(q.point_mass(), 300)
    assert abs(tv_distance(mu, c2.stationary()) - tv_distance(muq, q.pi)) <= 1e-12


def test_exact_lumper_estimator(c2, g2):
    est = ExactLumper(start=(PATH, 0), method="full").fit(c2)
    mu = point_mass(g2.vertex_count, 0)
    agg = est.transform(mu)
    assert agg.shape == (1, est.n_classes_)
    assert agg[0, est.partition_.start_class] == 1.0
