"""Lazy simple random walk on a :class:`~treecutoff.topology.TreeGraph`.

Transition rule: hold with probability ``laziness``, otherwise move along a
uniformly chosen edge end (a self-loop offers two ends).  With the default
``laziness = 1/2`` this is the matrix ``(P + I) / 2``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .topology import TreeGraph

log = logging.getLogger(__name__)

RENORMALIZE_EVERY = 10_000


class StructuralError(ValueError):
    """The graph does not support the requested chain (e.g. disconnected)."""


class DimensionError(ValueError):
    """Vectors live on different state spaces."""


@dataclass(frozen=True, eq=False)
class ChainOperator:
    """Reversible transition operator of the (lazy) walk on ``graph``.

    Nothing is stored beyond the graph; ``matvec``/``rmatvec`` run on the
    implicit adjacency, and dense/sparse matrices are produced on request.
    """

    graph: TreeGraph
    laziness: float = 0.5
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.laziness < 1.0:
            raise ValueError("laziness must lie in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.graph.vertex_count

    @property
    def degrees(self) -> np.ndarray:
        return self.graph.degrees()

    @property
    def move_prob(self) -> np.ndarray:
        """``P(x, y)`` for each neighbor ``y != x`` of ``x``."""
        q = self._cache.get("q")
        if q is None:
            q = (1.0 - self.laziness) / self.degrees
            self._cache["q"] = q
        return q

    @property
    def hold_prob(self) -> np.ndarray:
        """``P(x, x)`` (laziness plus any self-loop)."""
        h = self._cache.get("hold")
        if h is None:
            h = np.full(self.n_states, self.laziness)
            loops = self.graph.loop_vertices()
            h[loops] += 2.0 * self.move_prob[loops]
            self._cache["hold"] = h
        return h

    def with_laziness(self, laziness: float) -> "ChainOperator":
        return ChainOperator(self.graph, laziness)

    def matvec(self, f: np.ndarray) -> np.ndarray:
        """``(P f)(x) = sum_y P(x, y) f(y)``."""
        f = np.asarray(f, dtype=float)
        Wf = self.graph.adjacency_apply(f)
        scale = ((1.0 - self.laziness) / self.degrees)
        if f.ndim > 1:
            scale = scale[:, None]
        return self.laziness * f + scale * Wf

    def rmatvec(self, mu: np.ndarray) -> np.ndarray:
        """``(mu P)(y) = sum_x mu(x) P(x, y)``."""
        mu = np.asarray(mu, dtype=float)
        scale = (1.0 - self.laziness) / self.degrees
        if mu.ndim > 1:
            scale = scale[:, None]
        return self.laziness * mu + self.graph.adjacency_apply(mu * scale)

    def to_sparse(self) -> sp.csr_matrix:
        W = self.graph.adjacency()
        P = sp.diags((1.0 - self.laziness) / self.degrees) @ W
        P = P + self.laziness * sp.identity(self.n_states, format="csr")
        return sp.csr_matrix(P)

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def stationary(self) -> np.ndarray:
        return stationary_distribution(self)


def stationary_distribution(c: ChainOperator) -> np.ndarray:
    """Degree-proportional stationary law; laziness does not enter.

    Raises
    ------
    StructuralError
        If the graph is disconnected (only possible for hand-made adjacency).
    """
    deg = c.degrees
    if np.any(deg <= 0) and c.n_states > 1:
        raise StructuralError("graph has isolated vertices")
    if c.n_states == 1:
        return np.ones(1)
    return deg / deg.sum()


def check_prob_vector(mu, n_states: int | None = None, atol: float = 1e-12) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if mu.ndim != 1:
        raise DimensionError("a distribution must be a 1-D array")
    if n_states is not None and mu.shape[0] != n_states:
        raise DimensionError(f"expected {n_states} states, got {mu.shape[0]}")
    if np.any(mu < -atol) or abs(math.fsum(mu) - 1.0) > atol * max(1, mu.size) ** 0.5 + atol:
        raise ValueError("not a probability vector")
    return mu


def point_mass(n_states: int, x: int) -> np.ndarray:
    mu = np.zeros(n_states)
    mu[x] = 1.0
    return mu


def step_distribution(c: ChainOperator, mu: np.ndarray, t: int,
                      renormalize_every: int = RENORMALIZE_EVERY) -> np.ndarray:
    """Return ``mu P^t`` by repeated sparse steps.

    Mass drift is corrected by rescaling every ``renormalize_every`` steps;
    each correction is logged at DEBUG level.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    mu = np.array(mu, dtype=float)
    if mu.shape[0] != c.n_states:
        raise DimensionError("distribution does not match chain")
    for s in range(1, t + 1):
        mu = c.rmatvec(mu)
        if s % renormalize_every == 0:
            total = math.fsum(mu)
            log.debug("step %d: renormalizing mass %.17g", s, total)
            mu /= total
    return mu


def tv_distance(mu, nu) -> float:
    """Total-variation distance ``(1/2) sum |mu - nu|`` with compensated summation."""
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if mu.shape != nu.shape:
        raise DimensionError(f"shape mismatch {mu.shape} vs {nu.shape}")
    return min(1.0, 0.5 * math.fsum(np.abs(mu - nu)))


def dirichlet_form(c: ChainOperator, f, g=None) -> float:
    """``E(f, g) = <f, (I - P) g>_pi``.

    For ``g = f`` this is ``(1/2) sum_{x,y} pi(x) P(x,y) (f(x) - f(y))**2``.
    """
    f = np.asarray(f, dtype=float)
    g = f if g is None else np.asarray(g, dtype=float)
    pi = stationary_distribution(c)
    return math.fsum(pi * f * (g - c.matvec(g)))


def variance_under_pi(c: ChainOperator, f) -> float:
    f = np.asarray(f, dtype=float)
    pi = stationary_distribution(c)
    mean = math.fsum(pi * f)
    return max(0.0, math.fsum(pi * (f - mean) ** 2))


def prob_vector_csv(g: TreeGraph, mu: np.ndarray) -> str:
    """CSV with columns ``state,region,mass``."""
    regions = g.region_names
    idx = g.region_index_array()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["state", "region", "mass"])
    for x, m in enumerate(mu):
        w.writerow([x, regions[idx[x]], repr(float(m))])
    return buf.getvalue()
