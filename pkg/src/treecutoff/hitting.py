"""Exact hitting-time moments by tree elimination.

Off the target set ``A`` the mean ``h`` and the second moment ``u`` of
``tau_A`` satisfy ``(I - Q) h = 1`` and ``(I - Q) u = 2h - 1``, where ``Q`` is
the transition matrix restricted to the complement of ``A``.  On a tree these
systems are solved exactly in O(states): every tree vertex is written as
``h(x) = a(x) + b(x) h(parent)`` from the leaves up, the path becomes a
tridiagonal system, and the tree values are filled back top-down.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy.linalg import solve_banded
from sklearn.base import BaseEstimator

from .chain import ChainOperator
from .topology import PATH, TreeGraph, VertexRef, single_tree

RESIDUAL_TOL = 1e-10


class SolverError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


def _as_target_mask(g: TreeGraph, target) -> np.ndarray:
    if isinstance(target, np.ndarray) and target.dtype == bool:
        if target.shape != (g.vertex_count,):
            raise ValueError("target mask has the wrong length")
        mask = target.copy()
    else:
        if isinstance(target, (VertexRef, int, np.integer)) or (
                isinstance(target, tuple) and len(target) == 2 and isinstance(target[0], str)):
            target = [target]
        mask = np.zeros(g.vertex_count, dtype=bool)
        for t in target:
            mask[t if isinstance(t, (int, np.integer)) else g.encode(t)] = True
    if not mask.any():
        raise ValueError("target set is empty")
    return mask


def _pair_sum(a: np.ndarray, n_parents: int) -> np.ndarray:
    """Sum consecutive pairs of ``a`` (zero padded) into ``n_parents`` slots."""
    out = np.zeros(n_parents)
    full = a.shape[0] // 2
    out[:full] += a[0:2 * full:2] + a[1:2 * full:2]
    if a.shape[0] % 2:
        out[full] += a[-1]
    return out


def tree_solve(c: ChainOperator, target_mask: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``h = rhs + Q h`` off the target (``h = 0`` on it) by elimination."""
    g = c.graph
    q = c.move_prob
    hold = c.hold_prob
    n = g.vertex_count
    L = g.path_length
    a = np.zeros(n)
    b = np.zeros(n)
    extra_a = np.zeros(L + 1)
    extra_b = np.zeros(L + 1)

    for r in g.regions:
        if r.size < 2:
            continue
        levels = list(r.level_slices())
        child_a = child_b = None
        for d, lo, hi in reversed(levels):
            if d == 0:
                x = r.root_pos
                extra_a[x] += q[x] * child_a.sum()
                extra_b[x] += q[x] * child_b.sum()
                break
            sl = slice(r.offset + lo - 2, r.offset + hi - 2)
            qx = q[sl]
            if child_a is None:
                sa = np.zeros(hi - lo)
                sb = np.zeros(hi - lo)
            else:
                sa = _pair_sum(child_a, hi - lo)
                sb = _pair_sum(child_b, hi - lo)
            den = 1.0 - hold[sl] - qx * sb
            av = (rhs[sl] + qx * sa) / den
            bv = qx / den
            tm = target_mask[sl]
            av[tm] = 0.0
            bv[tm] = 0.0
            a[sl] = av
            b[sl] = bv
            child_a, child_b = av, bv

    # tridiagonal path system
    pos = np.arange(L + 1)
    qp = q[:L + 1]
    diag = 1.0 - hold[:L + 1] - extra_b
    upper = np.where(pos < L, -qp, 0.0)   # coefficient of h(p+1) in row p
    lower = np.where(pos > 0, -qp, 0.0)   # coefficient of h(p-1) in row p
    bvec = rhs[:L + 1] + extra_a
    tm = target_mask[:L + 1]
    diag[tm] = 1.0
    upper[tm] = 0.0
    lower[tm] = 0.0
    bvec[tm] = 0.0
    if L == 0:
        hp = bvec / diag
    else:
        ab = np.zeros((3, L + 1))
        ab[0, 1:] = upper[:-1]
        ab[1] = diag
        ab[2, :-1] = lower[1:]
        hp = solve_banded((1, 1), ab, bvec)
    h = np.zeros(n)
    h[:L + 1] = hp

    for r in g.regions:
        if r.size < 2:
            continue
        parent_h = np.array([hp[r.root_pos]])
        for d, lo, hi in r.level_slices():
            if d == 0:
                continue
            sl = slice(r.offset + lo - 2, r.offset + hi - 2)
            ph = np.repeat(parent_h, 2)[: hi - lo]
            hv = a[sl] + b[sl] * ph
            h[sl] = hv
            parent_h = hv
    h[target_mask] = 0.0
    return h


def first_step_residual(c: ChainOperator, target_mask, h, rhs) -> float:
    """Relative residual ``|h - rhs - Q h|_inf / (|h|_inf + |rhs|_inf)`` off target."""
    hz = np.where(target_mask, 0.0, h)
    r = hz - rhs - c.matvec(hz)
    r[target_mask] = 0.0
    scale = np.max(np.abs(hz)) + np.max(np.abs(rhs[~target_mask]), initial=0.0)
    return float(np.max(np.abs(r)) / scale) if scale > 0 else 0.0


@dataclass
class HittingMoments:
    """Exact moments of ``tau_A`` from every start."""

    target: np.ndarray
    mean: np.ndarray
    second_moment: Optional[np.ndarray] = None
    residuals: dict = field(default_factory=dict)

    @property
    def variance(self) -> np.ndarray:
        if self.second_moment is None:
            raise AttributeError("second moment not computed")
        return np.maximum(self.second_moment - self.mean**2, 0.0)

    def to_csv(self, states: Optional[Iterable[int]] = None) -> str:
        lines = ["start,mean,variance"]
        states = range(self.mean.shape[0]) if states is None else states
        var = self.variance if self.second_moment is not None else None
        for x in states:
            v = repr(float(var[x])) if var is not None else ""
            lines.append(f"{x},{float(self.mean[x])!r},{v}")
        return "\n".join(lines) + "\n"


def hitting_mean(c: ChainOperator, target, check: bool = True) -> HittingMoments:
    """Mean hitting time of ``target`` from every state.

    Raises
    ------
    SolverError
        If the first-step relative residual exceeds ``1e-10``.
    """
    g = c.graph
    mask = _as_target_mask(g, target)
    ones = np.where(mask, 0.0, 1.0)
    if mask.all():
        return HittingMoments(mask, np.zeros(g.vertex_count))
    h = tree_solve(c, mask, ones)
    res = {}
    if check:
        res["mean"] = first_step_residual(c, mask, h, ones)
        if not res["mean"] <= RESIDUAL_TOL:
            raise SolverError(f"mean solve residual {res['mean']:.3e}", res["mean"])
    return HittingMoments(mask, h, residuals=res)


def hitting_second_moment(c: ChainOperator, target, moments: Optional[HittingMoments] = None,
                          check: bool = True) -> HittingMoments:
    """Add ``E[tau**2]`` via ``(I - Q) u = 2h - 1``."""
    if moments is None:
        moments = hitting_mean(c, target, check=check)
    mask = moments.target
    if mask.all():
        moments.second_moment = np.zeros_like(moments.mean)
        return moments
    rhs = np.where(mask, 0.0, 2.0 * moments.mean - 1.0)
    u = tree_solve(c, mask, rhs)
    if check:
        moments.residuals["second_moment"] = first_step_residual(c, mask, u, rhs)
        if not moments.residuals["second_moment"] <= RESIDUAL_TOL:
            raise SolverError("second-moment solve did not converge",
                              moments.residuals["second_moment"])
    moments.second_moment = u
    return moments


class HittingTimeSolver(BaseEstimator):
    """Estimator-style wrapper: ``fit(chain)`` solves for all starts.

    Attributes set by ``fit``: ``mean_``, ``second_moment_``, ``variance_``,
    ``residuals_``.
    """

    def __init__(self, target=(PATH, 0), second_moment=True):
        self.target = target
        self.second_moment = second_moment

    def fit(self, X: ChainOperator, y=None):
        m = hitting_mean(X, self.target)
        if self.second_moment:
            m = hitting_second_moment(X, self.target, m)
            self.second_moment_ = m.second_moment
            self.variance_ = m.variance
        self.mean_ = m.mean
        self.residuals_ = dict(m.residuals)
        self.moments_ = m
        return self

    def predict(self, X) -> np.ndarray:
        """Mean hitting time for each flat start index in ``X``."""
        return self.mean_[np.asarray(X, dtype=np.int64)]


def laziness_transfer_check(c_nonlazy: ChainOperator, target, start) -> dict:
    """Compare ``E`` and ``Var`` of lazy vs non-lazy hitting times.

    Returns the four quantities, the predicted lazy values
    ``2 E`` and ``4 Var + 2 E`` and their relative discrepancies.
    """
    if c_nonlazy.laziness != 0.0:
        c_nonlazy = c_nonlazy.with_laziness(0.0)
    c_lazy = c_nonlazy.with_laziness(0.5)
    x = start if isinstance(start, (int, np.integer)) else c_nonlazy.graph.encode(start)
    m0 = hitting_second_moment(c_nonlazy, target)
    m1 = hitting_second_moment(c_lazy, target)
    E0, V0 = float(m0.mean[x]), float(m0.variance[x])
    E1, V1 = float(m1.mean[x]), float(m1.variance[x])
    predE, predV = 2.0 * E0, 4.0 * V0 + 2.0 * E0

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b)) if max(abs(a), abs(b)) > 0 else 0.0

    return {"start": int(x), "mean_nonlazy": E0, "var_nonlazy": V0,
            "mean_lazy": E1, "var_lazy": V1,
            "mean_identity_rel_err": rel(E1, predE),
            "var_identity_rel_err": rel(V1, predV)}


@dataclass
class ExcursionMoments:
    """First two moments of a root excursion into a binary tree."""

    n: int
    mean: float
    second_moment: float
    lazy: bool
    leaf_self_loops: bool
    root_context: str

    @property
    def variance(self) -> float:
        return self.second_moment - self.mean**2

    @property
    def closed_form(self) -> float:
        return (3 * self.n - 1) / 2


ROOT_CONTEXTS = ("isolated", "in_situ")


def excursion_moments(n: int, *, lazy: bool = False, leaf_self_loops: bool = False,
                      root_context: str = "isolated", tree_mode: str = "perfect") -> ExcursionMoments:
    """Exact excursion moments for a binary tree on ``n`` vertices.

    ``isolated``: the tree alone (root degree 2); ``T`` is the time until
    the first return to the root after leaving it.  Holds before departure
    count, so the lazy ``T`` is the non-lazy one with every step stretched by
    an independent Geometric(1/2) and ``E[T]`` doubles.  Non-lazy,
    ``E[T] = 1/pi(root)``.

    ``in_situ``: the root also carries two path edges (degree 4); ``T`` is
    the length of one excursion that enters the tree, i.e. ``1 + tau_root``
    from a uniform child.  Holds at the root are not part of the excursion.
    """
    if n < 3:
        raise ValueError("excursions need a tree with n >= 3 vertices")
    if root_context not in ROOT_CONTEXTS:
        raise ValueError(f"root_context must be one of {ROOT_CONTEXTS}")
    g = single_tree(n, tree_mode=tree_mode, leaf_self_loops=leaf_self_loops)
    if g.region("T0").size != n:
        raise ValueError(f"n={n} is not a perfect tree size")
    c = ChainOperator(g, 0.5 if lazy else 0.0)
    m = hitting_second_moment(c, VertexRef(PATH, 0))
    kids = [g.encode(VertexRef("T0", 2)), g.encode(VertexRef("T0", 3))]
    # one step then hit the root from the landing state
    if root_context == "in_situ":
        h1 = float(np.mean(m.mean[kids]))
        u1 = float(np.mean(m.second_moment[kids]))
        ET, ET2 = 1.0 + h1, 1.0 + 2.0 * h1 + u1
    else:
        # geometric number of steps to depart, then tau_root from a uniform child
        p = 1.0 - c.laziness
        h1 = float(np.mean(m.mean[kids]))
        u1 = float(np.mean(m.second_moment[kids]))
        EG, EG2 = 1.0 / p, (2.0 - p) / (p * p)
        ET, ET2 = EG + h1, EG2 + 2.0 * EG * h1 + u1
    return ExcursionMoments(n, ET, ET2, lazy, leaf_self_loops, root_context)


def excursion_convention_table(sizes=(7, 15, 31, 63, 127)) -> list:
    """Every convention for every size, with the distance to ``(3n - 1)/2``."""
    rows = []
    for n in sizes:
        for lazy in (False, True):
            for loops in (False, True):
                for ctx in ROOT_CONTEXTS:
                    e = excursion_moments(n, lazy=lazy, leaf_self_loops=loops, root_context=ctx)
                    rows.append({
                        "n": n, "lazy": lazy, "leaf_self_loops": loops, "root_context": ctx,
                        "mean": e.mean, "second_moment": e.second_moment,
                        "second_over_n2": e.second_moment / n**2,
                        "closed_form_mean": e.closed_form,
                        "matches_closed_form": bool(abs(e.mean - e.closed_form) <= 1e-9 * e.closed_form),
                    })
    return rows


@dataclass
class LocalTimeLaw:
    """Law of the number of visits to ``site`` before hitting 0, from ``n``."""

    n: int
    site: int
    boundary: str
    p_reach: float      # P(visit site at least once)
    p_escape: float     # P(hit 0 before returning | at site)

    def pmf(self, ells) -> np.ndarray:
        ells = np.asarray(ells, dtype=np.int64)
        out = self.p_reach * (1.0 - self.p_escape) ** np.maximum(ells - 1, 0) * self.p_escape
        return np.where(ells >= 1, out, 1.0 - self.p_reach)

    def geometric_pmf(self, ells) -> np.ndarray:
        """Reference law Geometric(1 / (2 site)) on {1, 2, ...}."""
        p = 1.0 / (2 * self.site)
        ells = np.asarray(ells, dtype=np.int64)
        return np.where(ells >= 1, (1 - p) ** np.maximum(ells - 1, 0) * p, 0.0)

    @property
    def mean(self) -> float:
        return self.p_reach / self.p_escape

    def max_pmf_error(self, support: int | None = None) -> float:
        support = support or int(40 * self.site + 50)
        ells = np.arange(0, support + 1)
        return float(np.max(np.abs(self.pmf(ells) - self.geometric_pmf(ells))))


BOUNDARIES = ("holding", "reflecting")


def local_time_law(n: int, site: int, boundary: str = "holding") -> LocalTimeLaw:
    """Visits to ``site`` before absorption at 0 by a walk on ``[0, n]`` from ``n``.

    The walk steps to each neighbor with probability 1/2.  At ``n`` the
    missing upward step is either a hold (``holding``) or redirected down
    (``reflecting``).  A time step spent at ``site`` counts as a visit.
    Absorption probabilities come from a linear solve on the chain killed at
    ``{0, site}``.
    """
    if not 1 <= site <= n:
        raise ValueError("need 1 <= site <= n")
    if boundary not in BOUNDARIES:
        raise ValueError(f"boundary must be one of {BOUNDARIES}")
    P = np.zeros((n + 1, n + 1))
    for x in range(1, n + 1):
        P[x, x - 1] = 0.5
        if x < n:
            P[x, x + 1] = 0.5
        elif boundary == "holding":
            P[x, x] += 0.5
        else:
            P[x, x - 1] = 1.0
    # g(x) = P_x(hit site before 0); h(x) = P_x(hit 0 before site)
    free = [x for x in range(1, n + 1) if x != site]
    A = np.eye(len(free)) - P[np.ix_(free, free)]
    hit_site = np.linalg.solve(A, P[free, site]) if free else np.zeros(0)
    val = dict(zip(free, hit_site))
    val[site] = 1.0
    val[0] = 0.0
    p_reach = val[n]
    # from site: one step, then must reach 0 before coming back
    back = sum(P[site, y] * val[y] for y in range(n + 1) if P[site, y] > 0)
    p_escape = 1.0 - back
    return LocalTimeLaw(n, site, boundary, float(p_reach), float(p_escape))


def concentration_summary(c: ChainOperator, k: int, N: int, start=None) -> dict:
    """Exact ``E`` and ``Var`` of ``tau_0`` from ``n_k`` with normalized ratios."""
    g = c.graph
    x = g.path_length if start is None else g.encode(start)
    m = hitting_second_moment(c, VertexRef(PATH, 0))
    E = float(m.mean[x])
    V = float(m.variance[x])
    return {"k": k, "N": N, "mean": E, "variance": V,
            "mean_over_6Nk": E / (6 * N * k),
            "var_over_N2k": V / (N * N * k),
            "var_over_mean2": V / (E * E),
            "residuals": m.residuals}


def report_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=float)
