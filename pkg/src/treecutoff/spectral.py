"""Relaxation time, bottleneck ratios and Poincare-type constants.

Three routes to the spectral gap:

* ``dense``: ``eigvalsh`` of the symmetrized chain (desk scale).
* ``power``: power iteration on the symmetrized operator with the
  ``sqrt(pi)`` direction projected out; matrix-free.
* ``quotient``: symmetry blocks of a perfect-tree family.  The walk commutes
  with every tree automorphism fixing the path, so the space splits into
  level-constant functions (the orbit quotient) and, for each internal tree
  vertex ``v``, functions that are level-constant on each child subtree
  with opposite signs on the two.  The latter evolve as a birth-death chain
  on the subtree levels killed at ``v``.  The block spectrum is checked
  against the dense spectrum (with multiplicities) before use.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator

from .chain import ChainOperator, dirichlet_form, stationary_distribution, variance_under_pi
from .lumping import orbit_count_chain
from .topology import PATH, TreeFamilySpec, TreeGraph, build_family_tree, single_tree

DENSE_LIMIT = 6000
POWER_TOL = 1e-10
POWER_INCREMENT = 1e-12
POWER_MAX_ITER = 10**6
QUOTIENT_TOL = 1e-8


class PowerIterationError(RuntimeError):
    """Power iteration stopped before convergence."""

    def __init__(self, msg: str, residual: float, iterations: int):
        super().__init__(f"{msg} (residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class QuotientDisabled(RuntimeError):
    """The block spectrum failed validation for this family."""


@dataclass
class SpectralReport:
    lambda_2: float
    lambda_star: float
    lambda_min: Optional[float]
    method: str
    n_states: int
    laziness: float
    bottleneck: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def t_rel(self) -> float:
        gap = 1.0 - self.lambda_star
        return math.inf if gap <= 0 else 1.0 / gap

    def cheeger_consistent(self, rtol: float = 1e-8) -> bool:
        """``t_rel >= 1 / (2 Phi)`` for every reported set."""
        return all(self.t_rel >= (1.0 / (2.0 * phi)) * (1.0 - rtol)
                   for phi in self.bottleneck.values() if phi > 0)

    def to_dict(self) -> dict:
        return {"lambda_2": self.lambda_2, "lambda_star": self.lambda_star,
                "lambda_min": self.lambda_min, "t_rel": self.t_rel, "method": self.method,
                "n_states": self.n_states, "laziness": self.laziness,
                "bottleneck": dict(self.bottleneck), **self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _lambda_star(lam2: float, lam_min: Optional[float], laziness: float) -> float:
    if laziness >= 0.5 or lam_min is None:
        return lam2
    return max(abs(lam2), abs(lam_min))


# -- dense -------------------------------------------------------------------

def symmetrized_dense(c: ChainOperator) -> np.ndarray:
    pi = stationary_distribution(c)
    sq = np.sqrt(pi)
    S = sq[:, None] * c.to_dense() / sq[None, :]
    return 0.5 * (S + S.T)


def dense_spectrum(c: ChainOperator) -> np.ndarray:
    """All eigenvalues of the chain, ascending."""
    return linalg.eigvalsh(symmetrized_dense(c))


def _dense_report(c: ChainOperator) -> SpectralReport:
    lam = dense_spectrum(c)
    if lam.size == 1:
        return SpectralReport(0.0, 0.0, None, "dense", 1, c.laziness)
    return SpectralReport(float(lam[-2]), _lambda_star(float(lam[-2]), float(lam[0]), c.laziness),
                          float(lam[0]), "dense", c.n_states, c.laziness)


# -- power iteration -----------------------------------------------------------

def power_iteration(c: ChainOperator, *, seed: int = 0, tol: float = POWER_TOL,
                    increment: float = POWER_INCREMENT, max_iter: int = POWER_MAX_ITER) -> tuple:
    """Top non-trivial eigenvalue of a lazy chain by deflated power iteration.

    Works in symmetrized coordinates ``v = sqrt(pi) f`` and removes the
    ``sqrt(pi)`` component every step.  Stops when the Rayleigh quotient
    changes by less than ``increment`` and ``residual**2`` (which bounds the
    eigenvalue error up to the gap to the rest of the spectrum) is below ``tol``.

    Returns
    -------
    (lambda, vector, iterations, residual)
    """
    pi = stationary_distribution(c)
    sq = np.sqrt(pi)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(c.n_states)

    def apply(x):
        return sq * c.matvec(x / sq)

    def project(x):
        x = x - (sq @ x) * sq
        return x / np.linalg.norm(x)

    v = project(v)
    lam_old = math.inf
    resid = math.inf
    for it in range(1, max_iter + 1):
        w = apply(v)
        lam = float(v @ w)
        if abs(lam - lam_old) < increment:
            resid = float(np.linalg.norm(w - lam * v))
            if resid * resid < tol:
                return lam, v, it, resid
        lam_old = lam
        v = project(w)
    resid = float(np.linalg.norm(apply(v) - lam_old * v))
    raise PowerIterationError("power iteration did not converge", resid, max_iter)


# -- symmetry blocks -------------------------------------------------------------

def _birth_death_block(height: int, laziness: float, loops: bool) -> np.ndarray:
    """Eigenvalues of the level chain of a perfect subtree, killed at its parent.

    Levels ``1..height``; level ``height`` holds the leaves.
    """
    n = height
    q = 1.0 - laziness
    deg = np.full(n, 3.0)
    deg[-1] = 3.0 if loops else 1.0
    hold = np.full(n, laziness)
    if loops:
        hold[-1] += 2.0 * q / deg[-1]
    up = q / deg                    # to parent level
    down = 2.0 * q / deg            # to the two children
    down[-1] = 0.0
    off = np.sqrt(down[:-1] * up[1:])
    return linalg.eigvalsh_tridiagonal(hold, off) if n > 1 else hold.copy()


def _radial_quotient(c: ChainOperator):
    """Symmetrized transition matrix of the level quotient and its keys."""
    cc = orbit_count_chain(c, (PATH, 0))
    W = cc.W.toarray().astype(float)
    P = (1.0 - c.laziness) * W / cc.deg[:, None]
    P[np.diag_indices_from(P)] += c.laziness
    pi = cc.pi
    sq = np.sqrt(pi)
    S = sq[:, None] * P / sq[None, :]
    return 0.5 * (S + S.T), cc.keys, pi


def block_spectrum(c: ChainOperator, kill: Optional[str] = None) -> tuple:
    """Spectrum of the walk (optionally killed on a region) by symmetry blocks.

    Parameters
    ----------
    kill : region name or None
        When given, returns the spectrum of ``P`` restricted to functions
        vanishing on that region (its root included).

    Returns
    -------
    (values, multiplicities) : arrays; ``multiplicities.sum()`` equals the
        number of surviving states.
    """
    g = c.graph
    if g.tree_mode != "perfect" or not all(r.is_perfect for r in g.regions):
        raise QuotientDisabled("symmetry blocks need perfect trees")
    S, keys, _ = _radial_quotient(c)
    keep = np.ones(len(keys), dtype=bool)
    if kill is not None:
        root = g.region(kill).root_pos
        for i, key in enumerate(keys):
            if key[0] == kill or key == (PATH, root):
                keep[i] = False
    vals = [linalg.eigvalsh(S[np.ix_(keep, keep)])]
    mults = [np.ones(int(keep.sum()), dtype=np.int64)]
    cache = {}
    for r in g.regions:
        if r.size < 2 or r.name == kill:
            continue
        for d in range(r.depth):
            h = r.depth - d
            if h not in cache:
                cache[h] = _birth_death_block(h, c.laziness, g.leaf_self_loops)
            vals.append(cache[h])
            mults.append(np.full(h, 1 << d, dtype=np.int64))
    values = np.concatenate(vals)
    mult = np.concatenate(mults)
    order = np.argsort(values, kind="stable")
    return values[order], mult[order]


def expand_spectrum(values: np.ndarray, mult: np.ndarray) -> np.ndarray:
    return np.repeat(values, mult)


def _top_two(values: np.ndarray, mult: np.ndarray) -> tuple:
    """Largest eigenvalue after removing one copy of the top one; and the minimum."""
    if mult[-1] > 1:
        return float(values[-1]), float(values[0])
    return float(values[-2]), float(values[0])


def _family_key(g: TreeGraph) -> tuple:
    s = g.spec
    if s is None:
        return ("graph", g.path_length, tuple((r.name, r.root_pos, r.size) for r in g.regions),
                g.leaf_self_loops)
    return (s.base, str(s.alpha), s.attach_lo, s.tree_mode, s.leaf_self_loops)


_QUOTIENT_STATUS: dict = {}


def validate_block_spectrum(c: ChainOperator, kill: Optional[str] = None) -> float:
    """Max abs difference between block and dense spectra (with multiplicities)."""
    dense = dense_spectrum(c) if kill is None else _dense_killed_spectrum(c, kill)
    vals, mult = block_spectrum(c, kill)
    blocks = expand_spectrum(vals, mult)
    if blocks.shape != dense.shape:
        return math.inf
    return float(np.max(np.abs(np.sort(blocks) - dense)))


def quotient_validation(g: TreeGraph, laziness: float = 0.5) -> dict:
    """Validate the block spectrum on the small members of ``g``'s family.

    The outcome is cached per family; a single failure disables the method.
    """
    key = (_family_key(g), laziness)
    if key in _QUOTIENT_STATUS:
        return _QUOTIENT_STATUS[key]
    checks = {}
    if g.spec is None:
        if g.vertex_count <= DENSE_LIMIT:
            checks["self"] = validate_block_spectrum(ChainOperator(g, laziness))
    else:
        for k in (1, 2):
            spec = TreeFamilySpec(**{**g.spec.__dict__, "k": k})
            small = build_family_tree(spec)
            if small.vertex_count <= DENSE_LIMIT:
                checks[f"k={k}"] = validate_block_spectrum(ChainOperator(small, laziness))
    ok = bool(checks) and all(err <= QUOTIENT_TOL for err in checks.values())
    status = {"ok": ok, "errors": checks}
    _QUOTIENT_STATUS[key] = status
    return status


def _quotient_report(c: ChainOperator) -> SpectralReport:
    status = quotient_validation(c.graph, c.laziness)
    if not status["ok"]:
        raise QuotientDisabled(f"block spectrum failed validation: {status['errors']}")
    vals, mult = block_spectrum(c)
    lam2, lam_min = _top_two(vals, mult)
    return SpectralReport(lam2, _lambda_star(lam2, lam_min, c.laziness), lam_min, "quotient",
                          c.n_states, c.laziness, extra={"validation": status["errors"]})


def relaxation_time(c: ChainOperator, method: str = "auto", *, seed: int = 0,
                    bottleneck_sets: Sequence[str] = ()) -> SpectralReport:
    """Spectral gap of the chain.

    ``auto`` picks ``dense`` below ``DENSE_LIMIT`` states, then ``quotient``
    for perfect trees and ``power`` otherwise.
    """
    g = c.graph
    if method == "auto":
        if c.n_states <= DENSE_LIMIT:
            method = "dense"
        elif g.tree_mode == "perfect":
            method = "quotient"
        else:
            method = "power"
    if method == "dense":
        rep = _dense_report(c)
    elif method == "quotient":
        rep = _quotient_report(c)
    elif method == "power":
        if c.laziness < 0.5:
            raise ValueError("power iteration here assumes a non-negative spectrum (lazy chain)")
        lam, _, it, res = power_iteration(c, seed=seed)
        rep = SpectralReport(lam, lam, None, "power", c.n_states, c.laziness,
                             extra={"iterations": it, "residual": res})
    else:
        raise ValueError(f"unknown method {method!r}")
    for name in bottleneck_sets:
        rep.bottleneck[name] = region_bottleneck(c, name)["phi"]
    return rep


# -- bottleneck ratio ---------------------------------------------------------------

def _as_mask(c: ChainOperator, S) -> np.ndarray:
    S = np.asarray(S)
    if S.dtype == bool:
        if S.shape != (c.n_states,):
            raise ValueError("mask has the wrong length")
        return S
    mask = np.zeros(c.n_states, dtype=bool)
    mask[S.astype(np.int64)] = True
    return mask


def bottleneck_ratio(c: ChainOperator, S) -> float:
    """``Phi(S) = Q(S, S^c) / pi(S)`` for ``0 < pi(S) <= 1/2``.

    Raises
    ------
    ValueError
        If ``pi(S) > 1/2`` or ``S`` is empty.
    """
    mask = _as_mask(c, S)
    pi = stationary_distribution(c)
    pS = math.fsum(pi[mask])
    if pS <= 0:
        raise ValueError("S must have positive stationary mass")
    if pS > 0.5 + 1e-12:
        raise ValueError(f"pi(S) = {pS:.4f} > 1/2; pass the complement")
    out = c.graph.adjacency_apply((~mask).astype(float))
    crossing = math.fsum(out[mask])          # edges from S to S^c
    flow = (1.0 - c.laziness) * crossing / c.graph.total_degree
    return flow / pS


def region_bottleneck(c: ChainOperator, name: str) -> dict:
    """Bottleneck of a region (root included), using the complement if heavier."""
    mask = c.graph.region_mask(name, include_root=True)
    pi = stationary_distribution(c)
    side = "set" if math.fsum(pi[mask]) <= 0.5 else "complement"
    phi = bottleneck_ratio(c, mask if side == "set" else ~mask)
    return {"region": name, "side": side, "phi": phi}


# -- Poincare-type inequalities -----------------------------------------------------

def line_dirichlet_maximizer(n: int) -> np.ndarray:
    """Maximizer of ``sum f^2 / sum (df)^2`` over ``f(0) = 0`` on ``{0..n}``."""
    main = np.full(n, 2.0)
    main[-1] = 1.0
    lam, vec = linalg.eigh_tridiagonal(main, -np.ones(n - 1), select="i", select_range=(0, 0)) \
        if n > 1 else (np.array([1.0]), np.ones((1, 1)))
    return np.concatenate([[0.0], vec[:, 0]])


def _line_ratio(f: np.ndarray, n: int) -> float:
    lhs = math.fsum(f[1:] ** 2)
    rhs = math.fsum(np.diff(f) ** 2)
    if lhs == 0.0:
        return 0.0
    return lhs / (n * n * rhs)


def poincare_line_check(n: int, trials: int = 1000, seed: int = 0) -> dict:
    """``sum_{1..n} f^2 <= n^2 sum (f(l) - f(l-1))^2`` for ``f(0) = 0``."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(trials):
        f = np.concatenate([[0.0], rng.standard_normal(n)])
        ratios.append(_line_ratio(f, n))
    best = _line_ratio(line_dirichlet_maximizer(n), n)
    exact = 1.0 / (n * n * (2.0 - 2.0 * math.cos(math.pi / (2 * n + 1))))
    return {"n": n, "trials": trials, "max_random_ratio": max(ratios, default=0.0),
            "maximizer_ratio": best, "exact_sup_ratio": exact,
            "passed": bool(max(ratios, default=0.0) <= 1.0 and best <= 1.0)}


def _grounded_min_eig(c: ChainOperator, keep: np.ndarray) -> tuple:
    """Smallest eigenvalue of ``I - P`` on functions supported on ``keep``."""
    S = symmetrized_dense(c)
    A = np.eye(int(keep.sum())) - S[np.ix_(keep, keep)]
    lam, vec = linalg.eigh(A, subset_by_index=[0, 0])
    return float(lam[0]), vec[:, 0]


def _dense_killed_spectrum(c: ChainOperator, kill: str) -> np.ndarray:
    keep = ~c.graph.region_mask(kill, include_root=True)
    S = symmetrized_dense(c)
    return linalg.eigvalsh(S[np.ix_(keep, keep)])


def rayleigh_ratio(c: ChainOperator, f) -> float:
    """``||f||_pi^2 / E(f, f)``."""
    f = np.asarray(f, dtype=float)
    pi = stationary_distribution(c)
    num = math.fsum(pi * f * f)
    den = dirichlet_form(c, f)
    if num == 0.0:
        return 0.0
    return num / den


def tree_dirichlet_sup(m: int, laziness: float = 0.5, leaf_self_loops: bool = False) -> float:
    """Exact ``sup ||g||^2 / E(g, g)`` over ``g(root) = 0`` on a perfect tree of ``m`` vertices."""
    g = single_tree(m, leaf_self_loops=leaf_self_loops)
    if g.vertex_count != m:
        raise ValueError(f"{m} is not a perfect binary tree size")
    c = ChainOperator(g, laziness)
    keep = np.ones(m, dtype=bool)
    keep[0] = False
    lam, _ = _grounded_min_eig(c, keep)
    return 1.0 / lam


def poincare_tree_check(m_list: Sequence[int], laziness: float = 0.5, trials: int = 1000,
                        seed: int = 0) -> dict:
    """Best constants ``sup/m`` for root-grounded functions on perfect trees.

    ``trials`` random functions per size are checked against the exact sup.
    """
    rng = np.random.default_rng(seed)
    rows = []
    random_ok = True
    for m in m_list:
        sup = tree_dirichlet_sup(m, laziness)
        c = ChainOperator(single_tree(m), laziness)
        for _ in range(trials):
            f = rng.standard_normal(m)
            f[0] = 0.0
            if rayleigh_ratio(c, f) > sup * (1 + 1e-9):
                random_ok = False
        rows.append({"size": m, "exact_sup": sup, "sup_over_size": sup / m})
    r = [row["sup_over_size"] for row in rows]
    return {"rows": rows, "spread": max(r) / min(r), "random_ok": random_ok}


def check_grounded(f, grounded: np.ndarray) -> None:
    if np.any(np.asarray(f)[grounded] != 0):
        raise ValueError("test function must vanish on the grounded set")


def complement_poincare_check(spec_or_graph, laziness: float = 0.5, trials: int = 1000,
                              seed: int = 0, region: str = "T0") -> dict:
    """Exact ``sup ||h||^2 / E(h, h)`` over ``h`` vanishing on a region (``T0``)."""
    g = spec_or_graph if isinstance(spec_or_graph, TreeGraph) else build_family_tree(spec_or_graph)
    c = ChainOperator(g, laziness)
    kill = g.region_mask(region, include_root=True)
    out = {"N": g.region(region).size, "n_states": g.vertex_count}
    if g.vertex_count <= DENSE_LIMIT:
        lam, vec = _grounded_min_eig(c, ~kill)
        out["method"] = "dense"
        sup = 1.0 / lam
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(trials):
            h = np.zeros(c.n_states)
            h[~kill] = rng.standard_normal(int((~kill).sum()))
            worst = max(worst, rayleigh_ratio(c, h))
        out["max_random_ratio"] = worst
        out["random_ok"] = worst <= sup * (1 + 1e-9)
    else:
        vals, _ = block_spectrum(c, kill=region)
        sup = 1.0 / (1.0 - float(vals[-1]))
        out["method"] = "quotient"
    out["sup"] = sup
    out["sup_over_N"] = sup / out["N"]
    return out


def variational_gap_check(c: ChainOperator, trials: int = 1000, seed: int = 0) -> dict:
    """Compare ``1/(1 - lambda_2)`` with the Rayleigh quotient of its eigenvector."""
    pi = stationary_distribution(c)
    S = symmetrized_dense(c)
    lam, vec = linalg.eigh(S)
    if lam.size < 2:
        return {"t_rel": 1.0, "rayleigh": 1.0, "rel_error": 0.0, "random_ok": True}
    f = vec[:, -2] / np.sqrt(pi)
    t_rel = 1.0 / (1.0 - lam[-2])
    var = variance_under_pi(c, f)
    ray = var / dirichlet_form(c, f)
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((c.n_states, trials))
    PF = c.matvec(F)
    mean = pi @ F
    E = np.einsum("i,ij->j", pi, F * (F - PF))
    V = np.einsum("i,ij->j", pi, (F - mean) ** 2)
    return {"t_rel": float(t_rel), "rayleigh": float(ray),
            "rel_error": abs(ray - t_rel) / t_rel,
            "random_ok": bool(np.all(E >= -1e-12) and np.all(V <= t_rel * E * (1 + 1e-9)))}


def poincare_csv(rows: Sequence[dict]) -> str:
    """CSV with columns ``size,exact_sup,sup_over_size``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["size", "exact_sup", "sup_over_size"])
    for r in rows:
        w.writerow([r["size"], repr(float(r["exact_sup"])), repr(float(r["sup_over_size"]))])
    return buf.getvalue()


class RelaxationEstimator(BaseEstimator):
    """Estimator wrapper: ``fit(chain)`` computes the spectral gap."""

    def __init__(self, method="auto", bottleneck_sets=("T0",)):
        self.method = method
        self.bottleneck_sets = bottleneck_sets

    def fit(self, X: ChainOperator, y=None):
        sets = [s for s in self.bottleneck_sets if s in X.graph.region_names]
        self.report_ = relaxation_time(X, self.method, bottleneck_sets=sets)
        self.t_rel_ = self.report_.t_rel
        self.lambda_2_ = self.report_.lambda_2
        return self

    def predict(self, X=None) -> float:
        return self.t_rel_
