"""Property suite run by ``treecutoff verify``.

Every check returns a dict with ``name``, ``passed`` and the measured
numbers.  Checks that are infeasible at the requested size are marked
``skipped`` with a reason.  Output contains no timings so repeated runs are
byte-identical.
"""
from __future__ import annotations

import numpy as np

from .chain import ChainOperator
from .hitting import (excursion_convention_table, hitting_second_moment,
                      laziness_transfer_check, local_time_law)
from .lumping import coarsest_lumpable_partition, quotient_chain, validate_lumping
from .montecarlo import MCConfig, excursion_sampler, sample_hitting_time, simulate_coupling
from .spectral import (DENSE_LIMIT, complement_poincare_check, poincare_line_check,
                       poincare_tree_check, quotient_validation, region_bottleneck,
                       relaxation_time, variational_gap_check)
from .topology import (PATH, TreeFamilySpec, TreeGraph, VertexRef, build_family_tree,
                       canonical_starts, path_graph, single_tree)

LUMP_LIMIT = 10**6
LUMP_T = (1, 10, 100, 1000)


def _skip(name, reason):
    return {"name": name, "passed": True, "skipped": True, "reason": reason}


def enumerate_vertex_count(spec: TreeFamilySpec) -> int:
    """Independent count: path ``0..n_k`` plus every tree's non-root vertices."""
    from .topology import perfect_size
    sizes = spec.requested_sizes()
    if spec.tree_mode == "perfect":
        sizes = {k: perfect_size(v) for k, v in sizes.items()}
    return spec.n_k + 1 + sum(s - 1 for s in sizes.values())


def check_construction(spec):
    g = build_family_tree(spec)
    n = enumerate_vertex_count(spec)
    return {"name": "construction_count", "passed": g.vertex_count == n,
            "vertex_count": g.vertex_count, "enumerated": n}


def check_hitting_residuals(c):
    m = hitting_second_moment(c, VertexRef(PATH, 0))
    worst = max(m.residuals.values())
    return {"name": "hitting_residuals", "passed": worst <= 1e-10, "residuals": m.residuals}


def check_laziness_transfer(c, g):
    rows = [laziness_transfer_check(c.with_laziness(0.0), VertexRef(PATH, 0),
                                    VertexRef(PATH, g.path_length))]
    for n in (2, 8, 32):
        cp = ChainOperator(path_graph(n), 0.0)
        rows.append(laziness_transfer_check(cp, VertexRef(PATH, 0), VertexRef(PATH, n)))
    worst = max(max(r["mean_identity_rel_err"], r["var_identity_rel_err"]) for r in rows)
    return {"name": "laziness_transfer", "passed": worst <= 1e-8, "max_rel_err": worst,
            "rows": rows}


def check_excursions():
    rows = excursion_convention_table((7, 15, 31, 63, 127))
    bands = {}
    for r in rows:
        key = f"lazy={r['lazy']},loops={r['leaf_self_loops']},{r['root_context']}"
        bands.setdefault(key, []).append(r["second_over_n2"])
    spread = {k: max(v) / min(v) for k, v in bands.items()}
    matches = sorted({f"lazy={r['lazy']},loops={r['leaf_self_loops']},{r['root_context']}"
                      for r in rows if r["matches_closed_form"]})
    return {"name": "excursion_moments", "passed": all(s <= 64 for s in spread.values()),
            "second_over_n2_spread": spread, "conventions_matching_3n_minus_1_over_2": matches}


def check_local_time():
    worst = 0.0
    for n in (4, 16):
        for site in range(1, n + 1):
            worst = max(worst, local_time_law(n, site, "holding").max_pmf_error())
    return {"name": "path_local_time_law", "passed": worst <= 1e-10, "max_pmf_error": worst}


def check_lumping(c, g):
    if g.vertex_count > LUMP_LIMIT:
        return _skip("lumping_validation", "full powering too large")
    worst = 0.0
    agree = True
    rows = []
    for s in canonical_starts(g):
        p_orbit = coarsest_lumpable_partition(c, s, "orbit")
        q = quotient_chain(p_orbit)
        res = validate_lumping(c, q, LUMP_T, s)
        worst = max(worst, res["max_error"])
        if g.vertex_count <= 20_000:
            p_full = coarsest_lumpable_partition(c, s, "full")
            same = p_full.n_classes == p_orbit.n_classes and p_full.certified and p_orbit.certified
            agree = agree and same
        rows.append({"start": str(s), "classes": p_orbit.n_classes, "max_error": res["max_error"]})
    return {"name": "lumping_validation", "passed": worst <= 1e-12 and agree,
            "max_error": worst, "full_orbit_agree": agree, "rows": rows}


def check_spectral(c, g):
    out = []
    status = quotient_validation(g, c.laziness)
    out.append({"name": "quotient_spectrum_validation", "passed": status["ok"],
                "errors": status["errors"]})
    rep = relaxation_time(c, bottleneck_sets=["T0"])
    out.append({"name": "cheeger_consistency", "passed": rep.cheeger_consistent(),
                "t_rel": rep.t_rel, "method": rep.method,
                "bottleneck": region_bottleneck(c, "T0")})
    if g.vertex_count <= DENSE_LIMIT:
        v = variational_gap_check(c)
        out.append({"name": "variational_gap", "passed": v["rel_error"] <= 1e-8 and v["random_ok"],
                    **v})
    else:
        out.append(_skip("variational_gap", "dense eigensolve too large"))
    return out


def check_poincare(g, seed, laziness):
    line = poincare_line_check(64, 1000, seed)
    tree = poincare_tree_check((7, 15, 31, 63, 127), laziness, 1000, seed)
    comp = complement_poincare_check(g, laziness, 1000 if g.vertex_count <= DENSE_LIMIT else 0, seed)
    return [
        {"name": "poincare_line", "passed": line["passed"], **line},
        {"name": "poincare_tree", "passed": tree["random_ok"] and tree["spread"] <= 16,
         "spread": tree["spread"], "rows": tree["rows"]},
        {"name": "poincare_complement",
         "passed": comp["sup_over_N"] <= 64 and comp.get("random_ok", True), **comp},
    ]


def _within(est, se, exact, z=3.0):
    return abs(est - exact) <= z * se


def check_small_mc(seed, threads, replicates):
    out = []
    cfg = MCConfig(seed, replicates, 10**7, threads=threads)
    cp = ChainOperator(path_graph(4), 0.0)
    st = sample_hitting_time(cp, VertexRef(PATH, 4), VertexRef(PATH, 0), cfg)
    s = st.summary()
    out.append({"name": "mc_path_hitting", "passed": _within(s["mean"], s["se_mean"], 16.0)
                and s["truncations"] == 0 and st.check_decomposition(),
                "mean": s["mean"], "se_mean": s["se_mean"], "exact": 16.0})
    t3 = single_tree(3)
    e = excursion_sampler(t3, MCConfig(seed + 1, replicates, 10**6, threads=threads))
    lengths = e["lengths"]
    out.append({"name": "mc_excursion_n3", "passed": _within(e["mean"], e["se_mean"], 2.0)
                and bool(np.all(lengths % 2 == 0)) and bool(np.all(lengths >= 2)),
                "mean": e["mean"], "se_mean": e["se_mean"], "exact": 2.0})
    two = TreeGraph.from_regions(1, [])
    cst = simulate_coupling(ChainOperator(two), VertexRef(PATH, 1),
                            MCConfig(seed + 2, replicates, 10**6, threads=threads),
                            y_start=VertexRef(PATH, 0))
    ts = np.arange(0, 8)
    p, se = cst.survival(ts)
    exact = 0.5 ** ts
    out.append({"name": "mc_two_state_coupling",
                "passed": bool(np.all(np.abs(p - exact) <= 3 * se + 1e-12)),
                "survival": p.tolist()})
    return out


def run_suite(spec: TreeFamilySpec, *, seed: int = 0, threads: int = 1,
              mc_replicates: int = 20_000, laziness: float = 0.5) -> list:
    """Run every check for ``spec``; returns a list of result dicts."""
    results = [check_construction(spec)]
    g = build_family_tree(spec)
    c = ChainOperator(g, laziness)
    results.append(check_hitting_residuals(c))
    results.append(check_laziness_transfer(c, g))
    if spec.tree_mode == "exact_size":
        results.append(_skip("lumping_and_spectral", "symmetry reductions need perfect trees"))
    else:
        results.append(check_lumping(c, g))
        results.extend(check_spectral(c, g))
        results.extend(check_poincare(g, seed, laziness))
    results.append(check_excursions())
    results.append(check_local_time())
    results.extend(check_small_mc(seed, threads, mc_replicates))
    return results
