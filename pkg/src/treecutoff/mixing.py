"""Total-variation profiles, mixing times and cutoff diagnostics.

Distances are evaluated by eigen-expansion of a reversible chain (the
quotient from each start, or the full chain at desk scale)::

    P^t(s, C) - pi(C) = sqrt(pi(C) / pi(s)) * sum_{i >= 2} lam_i^t u_i(s) u_i(C)

so ``d(t)`` costs O(states**2) for any ``t`` and needs no stepping.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .chain import ChainOperator
from .lumping import coarsest_lumpable_partition, quotient_chain
from .topology import TreeFamilySpec, TreeGraph, VertexRef, build_family_tree, canonical_starts

DEFAULT_EPS_GRID = (0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99)
T_MAX = 2**62


class NonReversibleError(ValueError):
    pass


@dataclass
class SpectralDecomposition:
    """Eigenpairs of ``D^{1/2} P D^{-1/2}`` with ``D = diag(pi)``, descending.

    ``eigenvectors[:, i]`` are orthonormal; ``D^{-1/2} eigenvectors`` are the
    pi-orthonormal right eigenvectors of ``P``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    pi: np.ndarray
    source: str = "dense"

    @property
    def n_states(self) -> int:
        return self.pi.shape[0]

    def reconstruction_error(self, P: np.ndarray) -> float:
        sq = np.sqrt(self.pi)
        S = sq[:, None] * P / sq[None, :]
        U, lam = self.eigenvectors, self.eigenvalues
        return float(np.max(np.abs((U * lam) @ U.T - S)))

    def deviation(self, start: int, t) -> np.ndarray:
        """Rows ``P^t(start, .) - pi`` for each ``t`` (shape ``(len(t), n)``)."""
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        lam = self.eigenvalues[1:]
        U = self.eigenvectors[:, 1:]
        powers = _eig_powers(lam, t)
        coef = powers * U[start][None, :]
        dev = coef @ U.T
        dev = dev * np.sqrt(self.pi / self.pi[start])[None, :]
        # t = 0 is a point mass; skip the expansion round-off
        if np.any(t == 0):
            exact = -self.pi.copy()
            exact[start] += 1.0
            dev[t == 0] = exact
        return dev

    def distance(self, start: int, t) -> np.ndarray:
        dev = self.deviation(start, t)
        return np.array([min(1.0, 0.5 * math.fsum(np.abs(row))) for row in dev])

    def distribution(self, start: int, t: int) -> np.ndarray:
        return self.pi + self.deviation(start, [t])[0]


def _eig_powers(lam: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``lam ** t`` for integer ``t`` (broadcast to ``(len(t), len(lam))``)."""
    mag = np.abs(lam)
    with np.errstate(divide="ignore", under="ignore", invalid="ignore"):
        logm = np.where(mag > 0, np.log(np.where(mag > 0, mag, 1.0)), -np.inf)
        out = np.exp(t[:, None].astype(float) * logm[None, :])
    zero_t = t[:, None] == 0
    out = np.where(zero_t, 1.0, out)
    neg = lam < 0
    if neg.any():
        sign = np.where((t[:, None] % 2 == 1) & neg[None, :], -1.0, 1.0)
        out = out * sign
    return out


def spectral_decompose(P: np.ndarray, pi: np.ndarray, source: str = "dense",
                       rtol: float = 1e-12) -> SpectralDecomposition:
    """Full eigendecomposition of a reversible dense chain.

    Raises
    ------
    NonReversibleError
        If detailed balance fails by more than ``rtol`` (relative to max flow).
    """
    P = np.asarray(P, dtype=float)
    pi = np.asarray(pi, dtype=float)
    flow = pi[:, None] * P
    scale = max(float(np.max(np.abs(flow))), 1e-300)
    if np.max(np.abs(flow - flow.T)) > rtol * scale:
        raise NonReversibleError("chain is not reversible with respect to pi")
    sq = np.sqrt(pi)
    S = sq[:, None] * P / sq[None, :]
    S = 0.5 * (S + S.T)
    lam, U = np.linalg.eigh(S)
    order = np.argsort(lam)[::-1]
    lam, U = lam[order], U[:, order]
    if U[:, 0].sum() < 0:
        U[:, 0] = -U[:, 0]
    lam = np.clip(lam, -1.0, 1.0)
    return SpectralDecomposition(lam, U, pi, source)


def decompose_chain(c: ChainOperator) -> SpectralDecomposition:
    """Dense decomposition of the full chain (desk scale only)."""
    return spectral_decompose(c.to_dense(), c.stationary(), "dense")


@dataclass
class StartProfile:
    """A decomposition together with the state standing for one start vertex."""

    start: VertexRef
    decomposition: SpectralDecomposition
    state: int
    n_classes: int = 0

    def distance(self, t) -> np.ndarray:
        return self.decomposition.distance(self.state, t)


def start_profile(c: ChainOperator, start, method: str = "quotient") -> StartProfile:
    """Build the exact profile machinery for one start.

    ``method='quotient'`` lumps first (perfect trees); ``'dense'`` uses the
    full chain.
    """
    g = c.graph
    sv = g.canonical(VertexRef(*start))
    if method == "dense":
        dec = decompose_chain(c)
        return StartProfile(sv, dec, g.encode(sv), g.vertex_count)
    part = coarsest_lumpable_partition(c, sv)
    q = quotient_chain(part)
    dec = spectral_decompose(q.transition, q.pi, "quotient")
    return StartProfile(sv, dec, q.start, q.n_classes)


@dataclass
class MixingProfile:
    """Samples of ``d(t)`` for one start (or the worst case) and ``t_mix`` values."""

    start: object
    samples: list = field(default_factory=list)
    tmix_table: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "d"])
        for t, d in self.samples:
            w.writerow([int(t), repr(float(d))])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"start": str(self.start),
                           "samples": [[int(t), float(d)] for t, d in self.samples],
                           "tmix": {str(e): int(t) for e, t in self.tmix_table.items()}},
                          indent=2, sort_keys=True)


def distance_profile(dec: SpectralDecomposition, start: int, t_grid: Sequence[int]) -> MixingProfile:
    """Exact ``d(t) = ||P^t(start, .) - pi||_TV`` on ``t_grid``."""
    t_grid = [int(t) for t in t_grid]
    if not t_grid:
        raise ValueError("t_grid is empty")
    d = dec.distance(start, t_grid)
    return MixingProfile(start, list(zip(t_grid, d.tolist())))


class WorstCase:
    """``d(t) = max`` over a set of start profiles."""

    def __init__(self, profiles: Sequence[StartProfile]):
        if not profiles:
            raise ValueError("need at least one start")
        self.profiles = list(profiles)

    def distance(self, t) -> np.ndarray:
        return np.max([p.distance(t) for p in self.profiles], axis=0)

    def argmax(self, t: int) -> VertexRef:
        vals = [float(p.distance([t])[0]) for p in self.profiles]
        return self.profiles[int(np.argmax(vals))].start

    def __call__(self, t: int) -> float:
        return float(self.distance([t])[0])


def mixing_time(profile, eps: float) -> int:
    """Smallest ``t`` with ``d(t) <= eps`` (``profile`` maps ``t -> d(t)``).

    Exponential bracketing followed by bisection; relies on ``d`` being
    non-increasing, which holds for lazy chains.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if profile(0) <= eps:
        return 0
    lo, hi = 0, 1
    while profile(hi) > eps:
        lo, hi = hi, 2 * hi
        if hi > T_MAX:
            raise RuntimeError("distance does not reach eps (chain not mixing?)")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if profile(mid) > eps:
            lo = mid
        else:
            hi = mid
    return hi


def worst_case_profile(g: TreeGraph, laziness: float = 0.5, starts=None,
                       method: str = "quotient") -> WorstCase:
    c = ChainOperator(g, laziness)
    starts = canonical_starts(g) if starts is None else starts
    if method == "dense":
        dec = decompose_chain(c)
        return WorstCase([StartProfile(g.canonical(VertexRef(*s)), dec, g.encode(s),
                                       g.vertex_count) for s in starts])
    return WorstCase([start_profile(c, s, method) for s in starts])


def tmix_table(profile, eps_grid=DEFAULT_EPS_GRID) -> dict:
    return {float(e): mixing_time(profile, e) for e in eps_grid}


@dataclass
class CutoffRow:
    k: int
    N: int
    tmix: dict
    label: str = ""
    error: Optional[str] = None

    def ratio(self, eps: float) -> float:
        return self.tmix[eps] / self.tmix[round(1 - eps, 12)]

    def window(self, eps: float) -> int:
        return self.tmix[eps] - self.tmix[round(1 - eps, 12)]

    def window_over_N_sqrt_k(self, eps: float) -> float:
        return self.window(eps) / (self.N * math.sqrt(self.k))

    def window_over_tmix_quarter(self, eps: float) -> float:
        return self.window(eps) / self.tmix[0.25]


@dataclass
class CutoffReport:
    rows: list
    eps_grid: tuple

    CSV_COLUMNS = ("family", "k", "N", "eps", "tmix", "ratio", "window",
                   "window_over_Nsqrtk", "window_over_tmix_quarter")

    def _pairs(self, row):
        for e in self.eps_grid:
            pair = round(1 - e, 12)
            if e < 0.5 and pair in row.tmix:
                yield e, row.ratio(e), row.window(e), row.window_over_N_sqrt_k(e), \
                    row.window_over_tmix_quarter(e) if 0.25 in row.tmix else None
            else:
                yield e, None, None, None, None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for row in self.rows:
            if row.error:
                continue
            for e, ratio, win, wn, wq in self._pairs(row):
                w.writerow([row.label, row.k, row.N, e, row.tmix[e],
                            "" if ratio is None else repr(ratio),
                            "" if win is None else win,
                            "" if wn is None else repr(wn),
                            "" if wq is None else repr(wq)])
        return buf.getvalue()

    def to_json(self) -> str:
        out = []
        for row in self.rows:
            item = {"family": row.label, "k": row.k, "N": row.N, "error": row.error,
                    "tmix": {str(e): t for e, t in row.tmix.items()}}
            if not row.error:
                item["pairs"] = [
                    {"eps": e, "ratio": r, "window": w, "window_over_Nsqrtk": wn,
                     "window_over_tmix_quarter": wq}
                    for e, r, w, wn, wq in self._pairs(row) if r is not None]
            out.append(item)
        return json.dumps({"eps_grid": list(self.eps_grid), "rows": out}, indent=2, sort_keys=True)


def _family_label(spec: TreeFamilySpec) -> str:
    base = "2^2^j" if spec.base is None else f"{spec.base}^j"
    return f"{base},alpha={spec.alpha}"


def cutoff_report(specs: Sequence[TreeFamilySpec], eps_grid=DEFAULT_EPS_GRID) -> CutoffReport:
    """Exact ``t_mix`` over ``eps_grid`` for each family member.

    A failing member yields a row with ``error`` set; the others are kept.
    """
    eps_grid = tuple(float(e) for e in eps_grid)
    rows = []
    for spec in specs:
        try:
            g = build_family_tree(spec)
            wc = worst_case_profile(g)
            rows.append(CutoffRow(spec.k, spec.N, tmix_table(wc, eps_grid), _family_label(spec)))
        except Exception as exc:  # reported per spec, never aborts the sweep
            rows.append(CutoffRow(spec.k, spec.N, {}, _family_label(spec), f"{type(exc).__name__}: {exc}"))
    return CutoffReport(rows, eps_grid)


class MixingTimeEstimator(BaseEstimator):
    """``fit(graph)`` computes worst-case ``t_mix`` over canonical starts.

    Fitted attributes: ``tmix_`` (eps -> steps), ``profile_`` (WorstCase),
    ``worst_start_`` (start attaining ``d(t_mix(1/4))``).
    """

    def __init__(self, eps_grid=DEFAULT_EPS_GRID, laziness=0.5, method="quotient"):
        self.eps_grid = eps_grid
        self.laziness = laziness
        self.method = method

    def fit(self, X, y=None):
        g = build_family_tree(X) if isinstance(X, TreeFamilySpec) else X
        self.profile_ = worst_case_profile(g, self.laziness, method=self.method)
        self.tmix_ = tmix_table(self.profile_, self.eps_grid)
        quarter = self.tmix_.get(0.25, mixing_time(self.profile_, 0.25))
        self.worst_start_ = self.profile_.argmax(quarter)
        return self

    def predict(self, X) -> np.ndarray:
        """Worst-case distance ``d(t)`` at each ``t`` in ``X``."""
        return self.profile_.distance(np.asarray(X, dtype=np.int64))
