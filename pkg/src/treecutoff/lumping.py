"""Exact lumping by partition refinement.

Every chain handled here has integer edge weights: ``P(x, y) = lazy [x == y]
+ (1 - lazy) W[x, y] / deg[x]``.  Lumpability of a partition is then a
statement about the integers ``W[x, C] * (D / deg[x])`` with ``D`` the lcm of
the degrees, so splitting decisions never compare floats.

Two routes produce the same coarsest partition:

* ``full``: refine directly on the materialized graph (small instances);
* ``orbit``: first collapse each automorphism orbit fixing the start
  vertex (tree vertices are keyed by depth and by where their root path
  leaves the start's ancestral line), then refine that much smaller chain.
  Orbits of automorphisms are lumpable, and refining their quotient from the
  coarse ``{start} | rest`` partition can merge orbits again, so the result
  is the coarsest lumpable partition of the original chain.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import reduce
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator

from .chain import ChainOperator, step_distribution
from .topology import PATH, TreeGraph, VertexRef, neighbors


class LumpabilityUnavailable(ValueError):
    """The chain has no exact symmetry lumping (e.g. ``exact_size`` trees)."""


class UncertifiedPartition(ValueError):
    """A partition failed the lumpability certificate."""


@dataclass(frozen=True, eq=False)
class CountChain:
    """Integer-weighted reversible chain over (possibly aggregated) states.

    ``size[s]`` is the number of graph vertices state ``s`` stands for and
    ``rep[s]`` the flat index of one of them.
    """

    W: sp.csr_matrix
    deg: np.ndarray
    size: np.ndarray
    rep: np.ndarray
    laziness: float
    total_degree: int
    start_state: int
    keys: Optional[list] = None

    @property
    def n_states(self) -> int:
        return self.W.shape[0]

    @property
    def pi(self) -> np.ndarray:
        return self.size * self.deg / self.total_degree


def full_count_chain(c: ChainOperator, start) -> CountChain:
    g = c.graph
    W = g.adjacency().astype(np.int64)
    deg = np.asarray(W.sum(axis=1)).ravel().astype(np.int64)
    n = g.vertex_count
    x0 = start if isinstance(start, (int, np.integer)) else g.encode(start)
    return CountChain(sp.csr_matrix(W), deg, np.ones(n, dtype=np.int64),
                      np.arange(n, dtype=np.int64), c.laziness, int(deg.sum()), int(x0))


def _depth(i: int) -> int:
    return i.bit_length() - 1


def _meet_depth(i: int, s: int) -> int:
    di, ds = _depth(i), _depth(s)
    if di > ds:
        i >>= di - ds
    else:
        s >>= ds - di
    while i != s:
        i >>= 1
        s >>= 1
    return _depth(i)


def orbit_key(g: TreeGraph, v: VertexRef, start: VertexRef) -> tuple:
    """Orbit label of ``v`` under tree automorphisms fixing ``start``."""
    v = g.canonical(v)
    if v.region == PATH:
        return (PATH, v.index)
    d = _depth(v.index)
    if start.region == v.region:
        return (v.region, d, _meet_depth(v.index, start.index))
    return (v.region, d)


def _orbit_members(r, start: VertexRef):
    """Yield ``(key, representative_heap, size)`` for every orbit of region ``r``."""
    if start.region != r.name:
        for d in range(1, r.depth + 1):
            yield (r.name, d), 1 << d, 1 << d
        return
    s = start.index
    ds = _depth(s)
    for d in range(1, r.depth + 1):
        for m in range(0, min(d, ds) + 1):
            if m == d:                       # ancestor of s (or s itself)
                yield (r.name, d, m), s >> (ds - d), 1
            elif m == ds:                    # descendant of s
                yield (r.name, d, m), s << (d - ds), 1 << (d - ds)
            else:                            # branches off at depth m + 1
                sib = (s >> (ds - m - 1)) ^ 1
                yield (r.name, d, m), sib << (d - m - 1), 1 << (d - m - 1)


def orbit_count_chain(c: ChainOperator, start) -> CountChain:
    """Collapse automorphism orbits fixing ``start`` (perfect trees only)."""
    g = c.graph
    if g.tree_mode != "perfect" or not all(r.is_perfect for r in g.regions):
        raise LumpabilityUnavailable("orbit lumping needs perfect trees")
    start = g.canonical(VertexRef(*start)) if not isinstance(start, (int, np.integer)) \
        else g.decode(start)
    keys, reps, sizes = [], [], []
    for p in range(g.path_length + 1):
        keys.append((PATH, p))
        reps.append(VertexRef(PATH, p))
        sizes.append(1)
    for r in g.regions:
        if r.size < 2:
            continue
        for key, heap, size in _orbit_members(r, start):
            keys.append(key)
            reps.append(VertexRef(r.name, heap))
            sizes.append(size)
    index = {k: i for i, k in enumerate(keys)}
    rows, cols, data, deg = [], [], [], []
    for i, v in enumerate(reps):
        nb = neighbors(g, v)
        dsum = 0
        for u in nb:
            w = 2 if u == g.canonical(v) else 1
            rows.append(i)
            cols.append(index[orbit_key(g, u, start)])
            data.append(w)
            dsum += w
        deg.append(dsum)
    n = len(keys)
    W = sp.csr_matrix((np.array(data, dtype=np.int64), (rows, cols)), shape=(n, n))
    W.sum_duplicates()
    W.sort_indices()
    rep_flat = np.array([g.encode(v) for v in reps], dtype=np.int64)
    return CountChain(W, np.array(deg, dtype=np.int64), np.array(sizes, dtype=np.int64),
                      rep_flat, c.laziness, g.total_degree,
                      index[orbit_key(g, start, start)], keys)


def _class_weights(cc: CountChain, classes: np.ndarray, n_classes: int) -> sp.csr_matrix:
    """Integer matrix ``M[x, C] = W[x, C] * (D / deg[x])``."""
    D = reduce(math.lcm, (int(d) for d in np.unique(cc.deg)), 1)
    scale = (D // cc.deg).astype(np.int64)
    onehot = sp.csr_matrix((np.ones(cc.n_states, dtype=np.int64),
                            (np.arange(cc.n_states), classes)),
                           shape=(cc.n_states, n_classes))
    M = sp.diags(scale) @ (cc.W @ onehot)
    M = sp.csr_matrix(M)
    M.sort_indices()
    return M


def _renumber(sigs: Sequence) -> np.ndarray:
    ids = {}
    out = np.empty(len(sigs), dtype=np.int64)
    for x, s in enumerate(sigs):
        out[x] = ids.setdefault(s, len(ids))
    return out


def refine(cc: CountChain, initial: np.ndarray) -> tuple:
    """Coarsest lumpable refinement of ``initial``; returns ``(classes, passes)``."""
    classes = _renumber(list(initial))
    n_cls = int(classes.max()) + 1
    passes = 0
    while True:
        passes += 1
        M = _class_weights(cc, classes, n_cls)
        sigs = []
        for x in range(cc.n_states):
            lo, hi = M.indptr[x], M.indptr[x + 1]
            sigs.append((int(classes[x]),
                         tuple(zip(M.indices[lo:hi].tolist(), M.data[lo:hi].tolist()))))
        new = _renumber(sigs)
        new_n = int(new.max()) + 1
        if new_n < n_cls:  # pragma: no cover - refinement never merges
            raise AssertionError("refinement lost classes")
        if new_n == n_cls:
            return new, passes
        classes, n_cls = new, new_n


def certify(cc: CountChain, classes: np.ndarray) -> bool:
    """Check the Dynkin condition exactly: equal class weights within every class."""
    n_cls = int(classes.max()) + 1
    M = _class_weights(cc, classes, n_cls).toarray()
    order = np.argsort(classes, kind="stable")
    first = {}
    for x in order:
        cls = int(classes[x])
        if cls in first:
            if not np.array_equal(M[x], M[first[cls]]):
                return False
        else:
            first[cls] = x
    return True


@dataclass
class Partition:
    """A partition of the states of ``chain`` with per-class aggregates."""

    chain: CountChain
    class_of: np.ndarray
    certified: bool
    method: str
    passes: int = 0

    @property
    def n_classes(self) -> int:
        return int(self.class_of.max()) + 1

    @property
    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.class_of, weights=self.chain.size,
                           minlength=self.n_classes).astype(np.int64)

    @property
    def class_pi_mass(self) -> np.ndarray:
        return np.bincount(self.class_of, weights=self.chain.pi, minlength=self.n_classes)

    @property
    def start_class(self) -> int:
        return int(self.class_of[self.chain.start_state])

    @property
    def representatives(self) -> np.ndarray:
        """Flat graph index of one member per class (first state in order)."""
        first = np.full(self.n_classes, -1, dtype=np.int64)
        for s in range(len(self.class_of) - 1, -1, -1):
            first[self.class_of[s]] = s
        return self.chain.rep[first]

    def lift_labels(self, g: TreeGraph, start: VertexRef) -> np.ndarray:
        """Class id of every graph vertex (materializes a flat array)."""
        if self.chain.keys is None:
            return self.class_of.copy()
        index = {k: i for i, k in enumerate(self.chain.keys)}
        out = np.empty(g.vertex_count, dtype=np.int64)
        for x in range(g.vertex_count):
            out[x] = self.class_of[index[orbit_key(g, g.decode(x), start)]]
        return out


def coarsest_lumpable_partition(c: ChainOperator, start, method: str = "auto") -> Partition:
    """Coarsest exact lumping with ``start`` as a singleton class.

    Parameters
    ----------
    method : {'auto', 'full', 'orbit'}
        ``auto`` pre-lumps automorphism orbits (``orbit``); ``full`` refines
        the materialized chain and serves as a cross-check.

    Raises
    ------
    LumpabilityUnavailable
        For ``exact_size`` trees.
    """
    g = c.graph
    if g.tree_mode != "perfect":
        raise LumpabilityUnavailable("exact lumping requires tree_mode='perfect'")
    if method == "auto":
        method = "orbit"
    if method == "full":
        cc = full_count_chain(c, start)
    elif method == "orbit":
        cc = orbit_count_chain(c, start)
    else:
        raise ValueError(f"unknown method {method!r}")
    init = np.ones(cc.n_states, dtype=np.int64)
    init[cc.start_state] = 0
    classes, passes = refine(cc, init)
    ok = certify(cc, classes)
    return Partition(cc, classes, ok, method, passes)


@dataclass
class QuotientChain:
    """Dense lumped chain; ``P^t(start, .)`` evolves exactly at class level."""

    transition: np.ndarray
    pi: np.ndarray
    lift: Partition
    laziness: float

    @property
    def n_classes(self) -> int:
        return self.transition.shape[0]

    @property
    def start(self) -> int:
        return self.lift.start_class

    def point_mass(self) -> np.ndarray:
        mu = np.zeros(self.n_classes)
        mu[self.start] = 1.0
        return mu

    def step(self, mu: np.ndarray, t: int) -> np.ndarray:
        mu = np.array(mu, dtype=float)
        for _ in range(t):
            mu = mu @ self.transition
        return mu

    def lift_distribution(self, mu_q: np.ndarray, labels: np.ndarray,
                          pi_full: np.ndarray) -> np.ndarray:
        """Spread class mass over members proportionally to ``pi``."""
        return mu_q[labels] * pi_full / self.pi[labels]

    def to_csv(self) -> str:
        part = self.lift
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "representative", "size", "pi_mass"])
        keys = part.chain.keys
        reps = part.representatives
        first = {}
        for s, cls in enumerate(part.class_of):
            first.setdefault(int(cls), s)
        for cls in range(self.n_classes):
            label = repr(keys[first[cls]]) if keys is not None else str(int(reps[cls]))
            w.writerow([cls, label, int(part.class_sizes[cls]), repr(float(self.pi[cls]))])
        return buf.getvalue()

    def matrix_text(self) -> str:
        return "\n".join(" ".join(repr(float(v)) for v in row) for row in self.transition) + "\n"


def quotient_chain(c_or_partition, partition: Optional[Partition] = None) -> QuotientChain:
    """Class-level transition matrix of a certified partition.

    Accepts ``quotient_chain(chain, partition)`` or ``quotient_chain(partition)``.
    """
    part = partition if partition is not None else c_or_partition
    if not part.certified:
        raise UncertifiedPartition("partition is not certified lumpable")
    cc = part.chain
    n_cls = part.n_classes
    onehot = sp.csr_matrix((np.ones(cc.n_states), (np.arange(cc.n_states), part.class_of)),
                           shape=(cc.n_states, n_cls))
    M = (cc.W.astype(float) @ onehot).toarray()
    first = np.full(n_cls, -1, dtype=np.int64)
    for s in range(cc.n_states - 1, -1, -1):
        first[part.class_of[s]] = s
    P = (1.0 - cc.laziness) * M[first] / cc.deg[first][:, None]
    P[np.arange(n_cls), np.arange(n_cls)] += cc.laziness
    return QuotientChain(P, part.class_pi_mass, part, cc.laziness)


def validate_lumping(c: ChainOperator, q: QuotientChain, t_list, start) -> dict:
    """Compare lifted quotient distributions with full-chain powering.

    Returns ``{'errors': {t: Linf}, 'max_error': ...}``.
    """
    g = c.graph
    x0 = start if isinstance(start, (int, np.integer)) else g.encode(start)
    sv = g.decode(x0)
    labels = q.lift.lift_labels(g, sv)
    pi_full = c.stationary()
    mu = np.zeros(g.vertex_count)
    mu[x0] = 1.0
    muq = q.point_mass()
    errors = {}
    t_prev = 0
    for t in sorted(int(t) for t in t_list):
        mu = step_distribution(c, mu, t - t_prev)
        muq = q.step(muq, t - t_prev)
        t_prev = t
        errors[t] = float(np.max(np.abs(q.lift_distribution(muq, labels, pi_full) - mu)))
    return {"errors": errors, "max_error": max(errors.values()) if errors else 0.0}


class ExactLumper(BaseEstimator):
    """``fit(chain)`` computes the coarsest lumping from ``start``.

    Fitted attributes: ``partition_``, ``quotient_``, ``n_classes_``.
    """

    def __init__(self, start=(PATH, 0), method="auto"):
        self.start = start
        self.method = method

    def fit(self, X: ChainOperator, y=None):
        self.partition_ = coarsest_lumpable_partition(X, self.start, self.method)
        self.quotient_ = quotient_chain(self.partition_)
        self.n_classes_ = self.partition_.n_classes
        return self

    def transform(self, X) -> np.ndarray:
        """Aggregate full-state distributions (rows of ``X``) to class masses."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        part = self.partition_
        if part.chain.keys is not None:
            raise LumpabilityUnavailable("transform needs a full-state partition")
        out = np.zeros((X.shape[0], part.n_classes))
        for row, mu in enumerate(X):
            out[row] = np.bincount(part.class_of, weights=mu, minlength=part.n_classes)
        return out
