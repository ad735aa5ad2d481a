"""Seeded random-walk simulation on the implicit trees.

Each replicate draws from its own counter-based stream, ``Philox`` keyed by
``(seed, replicate)``, so results do not depend on how replicates are spread
over worker threads.  Walk kernels are compiled with numba and release the
GIL; uniforms are fed to them in blocks.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import stats

from .chain import ChainOperator
from .topology import PATH, TreeGraph, VertexRef

DEFAULT_BLOCK = 1 << 16


@dataclass(frozen=True)
class MCConfig:
    """Simulation controls.

    ``seed`` and ``replicates`` fully determine the output; ``threads`` only
    changes wall time.
    """

    seed: int
    replicates: int
    max_steps: int = 10**8
    block: int = DEFAULT_BLOCK
    threads: int = 1

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.max_steps < 1 or self.block < 1:
            raise ValueError("max_steps and block must be positive")

    def stream(self, replicate: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=(int(self.seed) << 64) | int(replicate)))


def _blocks(gen: np.random.Generator, cfg: MCConfig, width: int = 1):
    """Uniform blocks of doubling size (64 up to ``cfg.block``) times ``width``.

    Kernels consume whole blocks, so the chunking never changes results.
    """
    size = min(64, cfg.block)
    while True:
        yield gen.random(size * width)
        size = min(2 * size, cfg.block)


def _map_replicates(cfg: MCConfig, fn):
    """Run ``fn(replicate)`` for every replicate; results in replicate order."""
    if cfg.threads <= 1:
        return [fn(r) for r in range(cfg.replicates)]
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        return list(pool.map(fn, range(cfg.replicates)))


# -- compiled graph kernels ------------------------------------------------

class _Arrays:
    """Flat integer tables describing a TreeGraph for the kernels."""

    def __init__(self, g: TreeGraph):
        self.L = g.path_length
        self.root = np.array([r.root_pos for r in g.regions], dtype=np.int64)
        self.size = np.array([r.size for r in g.regions], dtype=np.int64)
        self.off = np.array([r.offset for r in g.regions], dtype=np.int64)
        self.attach = np.full(g.path_length + 1, -1, dtype=np.int64)
        for i, r in enumerate(g.regions):
            if r.size > 1:
                self.attach[r.root_pos] = i
        self.loops = bool(g.leaf_self_loops)

    def args(self):
        return self.L, self.root, self.size, self.off, self.attach, self.loops


@numba.njit(cache=True, nogil=True)
def _region_of(v, L, off, size):
    if v <= L:
        return -1
    for r in range(off.shape[0] - 1, -1, -1):
        if size[r] > 1 and v >= off[r]:
            return r
    return -2


@numba.njit(cache=True, nogil=True)
def _encode(r, i, root, off):
    if i == 1:
        return root[r]
    return off[r] + i - 2


@numba.njit(cache=True, nogil=True)
def _move(v, u, L, root, size, off, attach, loops):
    """Take a non-lazy step from ``v`` using ``u`` in [0, 1)."""
    if v <= L:
        a = attach[v]
        deg = 0
        if v > 0:
            deg += 1
        if v < L:
            deg += 1
        nk = 0
        if a >= 0:
            nk = min(2, size[a] - 1)
        deg += nk
        j = int(u * deg)
        if v > 0:
            if j == 0:
                return v - 1
            j -= 1
        if v < L:
            if j == 0:
                return v + 1
            j -= 1
        return off[a] + j  # heap 2 + j
    r = _region_of(v, L, off, size)
    i = v - off[r] + 2
    m = size[r]
    nk = 0
    if 2 * i <= m:
        nk += 1
    if 2 * i + 1 <= m:
        nk += 1
    deg = 1 + nk
    if nk == 0 and loops:
        deg += 2
    j = int(u * deg)
    if j == 0:
        return _encode(r, i // 2, root, off)
    j -= 1
    if j < nk:
        return off[r] + 2 * i + j - 2
    return v  # self-loop


@numba.njit(cache=True, nogil=True)
def _step(v, u, lazy, L, root, size, off, attach, loops):
    if u < lazy:
        return v
    return _move(v, (u - lazy) / (1.0 - lazy), L, root, size, off, attach, loops)


@numba.njit(cache=True, nogil=True)
def _walk_hitting(st, D, Lc, delay, uniforms, target, lazy, max_steps,
                  L, root, size, off, attach, loops):
    """Advance one replicate; returns 1 on hit, 2 on truncation, 0 if out of uniforms.

    ``st``: [v, t, S, path_moves, visit_region, visit_arrival, visit_holds]
    """
    v = st[0]
    t = st[1]
    k = 0
    n = uniforms.shape[0]
    while True:
        if v == target:
            st[0] = v
            st[1] = t
            return 1
        if t >= max_steps:
            st[0] = v
            st[1] = t
            return 2
        if k >= n:
            st[0] = v
            st[1] = t
            return 0
        w = _step(v, uniforms[k], lazy, L, root, size, off, attach, loops)
        k += 1
        t += 1
        if v <= L and w <= L:
            st[2] += 1
            if v == w:
                if st[4] >= 0:
                    st[6] += 1
            else:
                st[3] += 1
                if st[4] >= 0:
                    delay[st[4]] += t - 1 - st[5] - st[6]
                    st[4] = -1
                a = attach[w]
                if a >= 0:
                    Lc[a] += 1
                    st[4] = a
                    st[5] = t
                    st[6] = 0
        else:
            r = _region_of(w, L, off, size) if w > L else _region_of(v, L, off, size)
            D[r] += 1
        v = w


@numba.njit(cache=True, nogil=True)
def _walk_return(st, uniforms, target, lazy, max_steps, L, root, size, off, attach, loops):
    """Walk until ``target`` is hit after leaving it; ``st = [v, t, left]``."""
    v = st[0]
    t = st[1]
    left = st[2]
    n = uniforms.shape[0]
    k = 0
    while True:
        if left and v == target:
            break
        if t >= max_steps:
            st[0] = v
            st[1] = t
            st[2] = left
            return 2
        if k >= n:
            st[0] = v
            st[1] = t
            st[2] = left
            return 0
        v = _step(v, uniforms[k], lazy, L, root, size, off, attach, loops)
        if v != target:
            left = 1
        k += 1
        t += 1
    st[0] = v
    st[1] = t
    st[2] = left
    return 1


@numba.njit(cache=True, nogil=True)
def _t0_depth(v, t0, L, off, size):
    """Depth inside T0 (root = path vertex 0), or -1 outside T0."""
    if v == 0:
        return 0
    if v <= L:
        return -1
    r = _region_of(v, L, off, size)
    if r != t0:
        return -1
    i = v - off[r] + 2
    d = 0
    while i > 1:
        i >>= 1
        d += 1
    return d


@numba.njit(cache=True, nogil=True)
def _walk_coupling(st, marks, uniforms, lazy, max_steps, t0, L, root, size, off, attach, loops):
    """Three-phase coupling; ``st = [x, y, t, phase]``, ``marks = [hit0, level, coal]``.

    Phase 0: independent until X hits 0.  Phase 1: independent until the
    walks collide or sit at equal depth in T0.  Phase 2: Y copies X's
    hold / up / down decision (fresh child choice) until they meet at the root.
    Any collision coalesces.  Returns 1 when coalesced, 2 on truncation,
    0 when the uniforms run out.
    """
    x = st[0]
    y = st[1]
    t = st[2]
    phase = st[3]
    n = uniforms.shape[0]
    k = 0
    while True:
        if x == y:
            if marks[2] < 0:
                marks[2] = t
            if marks[0] < 0 and x == 0:
                marks[0] = t
            if marks[1] < 0:
                marks[1] = t
            st[0] = x
            st[1] = y
            st[2] = t
            st[3] = 3
            return 1
        if phase == 0 and x == 0:
            phase = 1
            marks[0] = t
        if phase == 1:
            dx = _t0_depth(x, t0, L, off, size)
            if dx >= 0 and dx == _t0_depth(y, t0, L, off, size):
                phase = 2
                marks[1] = t
        if t >= max_steps:
            st[0] = x
            st[1] = y
            st[2] = t
            st[3] = phase
            return 2
        if k + 2 > n:
            st[0] = x
            st[1] = y
            st[2] = t
            st[3] = phase
            return 0
        u1 = uniforms[k]
        u2 = uniforms[k + 1]
        k += 2
        t += 1
        if phase < 2:
            x = _step(x, u1, lazy, L, root, size, off, attach, loops)
            y = _step(y, u2, lazy, L, root, size, off, attach, loops)
        else:
            dx0 = _t0_depth(x, t0, L, off, size)
            nx = _step(x, u1, lazy, L, root, size, off, attach, loops)
            dx1 = _t0_depth(nx, t0, L, off, size)
            if nx != x:
                r = _region_of(y, L, off, size)
                iy = y - off[r] + 2
                if dx1 < dx0:
                    y = _encode(r, iy // 2, root, off)
                elif dx1 > dx0:
                    y = off[r] + 2 * iy + (1 if u2 >= 0.5 else 0) - 2
            x = nx


@numba.njit(cache=True, nogil=True)
def _walk_path_local(st, counts, uniforms, n, holding, max_steps):
    """SRW on [0, n] from ``st[0]`` until 0; counts time steps spent at each site."""
    v = st[0]
    t = st[1]
    m = uniforms.shape[0]
    k = 0
    while True:
        if v == 0:
            st[0] = v
            st[1] = t
            return 1
        if t >= max_steps:
            st[0] = v
            st[1] = t
            return 2
        if k >= m:
            st[0] = v
            st[1] = t
            return 0
        counts[v] += 1
        u = uniforms[k]
        k += 1
        t += 1
        if v == n:
            if u < 0.5:
                v = n - 1
            elif not holding:
                v = n - 1
        else:
            v = v - 1 if u < 0.5 else v + 1


# -- statistics --------------------------------------------------------------

class Welford:
    """Running mean / variance, merged in a fixed order for determinism."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def push(self, x: float):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0


def moment_summary(x: np.ndarray) -> dict:
    """Mean, variance and their standard errors for a sample."""
    x = np.asarray(x, dtype=float)
    acc = Welford()
    for v in x:
        acc.push(float(v))
    n = acc.n
    var = acc.variance
    m4 = float(np.mean((x - acc.mean) ** 4)) if n else 0.0
    return {"n": n, "mean": acc.mean, "var": var,
            "se_mean": math.sqrt(var / n) if n else float("nan"),
            "se_var": math.sqrt(max(m4 - var * var, 0.0) / n) if n else float("nan")}


# -- hitting times and the S + D decomposition --------------------------------

@dataclass
class DecompStats:
    """Per-replicate hitting times and their path / tree decomposition.

    ``S`` counts steps with both endpoints on the path (holds included),
    ``D[:, r]`` steps touching the interior of tree region ``r``; so
    ``tau = S + D.sum(1)``.  ``L[:, r]`` is the local time of the embedded
    path walk at the root of region ``r`` and ``delay[:, r]`` the per-visit
    tree time recorded visit by visit.
    """

    tau: np.ndarray
    S: np.ndarray
    path_moves: np.ndarray
    D: np.ndarray
    L: np.ndarray
    delay: np.ndarray
    truncated: np.ndarray
    regions: list
    seed: int

    @property
    def truncations(self) -> int:
        return int(self.truncated.sum())

    def summary(self) -> dict:
        ok = ~self.truncated
        out = moment_summary(self.tau[ok])
        out.update({"truncations": self.truncations, "seed": self.seed,
                    "replicates": int(self.tau.shape[0])})
        return out

    def check_decomposition(self) -> bool:
        ok = ~self.truncated
        return bool(np.all(self.tau[ok] == self.S[ok] + self.D[ok].sum(axis=1))
                    and np.all(self.D[ok] == self.delay[ok]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["replicate", "tau", "S", "path_moves", "truncated"]
                   + [f"D_{r}" for r in self.regions] + [f"L_{r}" for r in self.regions])
        for i in range(self.tau.shape[0]):
            w.writerow([i, int(self.tau[i]), int(self.S[i]), int(self.path_moves[i]),
                        int(self.truncated[i])] + self.D[i].tolist() + self.L[i].tolist())
        return buf.getvalue()


def sample_hitting_time(c: ChainOperator, start, target, cfg: MCConfig) -> DecompStats:
    """Simulate ``tau_target`` from ``start`` for every replicate."""
    g = c.graph
    A = _Arrays(g)
    x0 = start if isinstance(start, (int, np.integer)) else g.encode(start)
    tgt = target if isinstance(target, (int, np.integer)) else g.encode(target)
    nreg = len(g.regions)

    def one(rep):
        gen = cfg.stream(rep)
        st = np.array([x0, 0, 0, 0, -1, 0, 0], dtype=np.int64)
        D = np.zeros(nreg, dtype=np.int64)
        Lc = np.zeros(nreg, dtype=np.int64)
        delay = np.zeros(nreg, dtype=np.int64)
        a = A.attach[x0] if x0 <= A.L else -1
        if a >= 0 and x0 != tgt:
            Lc[a] = 1
            st[4] = a
        for u in _blocks(gen, cfg):
            code = _walk_hitting(st, D, Lc, delay, u, tgt, c.laziness, cfg.max_steps, *A.args())
            if code:
                break
        if code == 1 and st[4] >= 0:
            delay[st[4]] += st[1] - st[5] - st[6]
        return st[1], st[2], st[3], D, Lc, delay, code == 2

    res = _map_replicates(cfg, one)
    return DecompStats(
        tau=np.array([r[0] for r in res], dtype=np.int64),
        S=np.array([r[1] for r in res], dtype=np.int64),
        path_moves=np.array([r[2] for r in res], dtype=np.int64),
        D=np.array([r[3] for r in res], dtype=np.int64).reshape(len(res), nreg),
        L=np.array([r[4] for r in res], dtype=np.int64).reshape(len(res), nreg),
        delay=np.array([r[5] for r in res], dtype=np.int64).reshape(len(res), nreg),
        truncated=np.array([r[6] for r in res], dtype=bool),
        regions=[r.name for r in g.regions], seed=cfg.seed)


# -- coupling ------------------------------------------------------------------

@dataclass
class CouplingStats:
    """Coupling times and phase marks (``-1`` when a phase never started)."""

    tau: np.ndarray
    hit0: np.ndarray
    level: np.ndarray
    truncated: np.ndarray
    seed: int
    metadata: dict = field(default_factory=dict)

    def survival(self, t_grid) -> tuple:
        """Empirical ``P(tau > t)`` and its standard error on ``t_grid``."""
        t_grid = np.asarray(t_grid, dtype=np.int64)
        n = self.tau.shape[0]
        p = np.array([np.mean(self.truncated | (self.tau > t)) for t in t_grid])
        return p, np.sqrt(np.maximum(p * (1 - p), 0.0) / n)

    def phases_ordered(self) -> bool:
        ok = ~self.truncated
        h, l, c = self.hit0[ok], self.level[ok], self.tau[ok]
        first = np.where(h >= 0, h, c)
        second = np.where(l >= 0, l, c)
        return bool(np.all(first <= c) and np.all(second <= c)
                    and np.all((h < 0) | (l < 0) | (h <= l)))

    def to_csv(self) -> str:
        lines = ["replicate,tau,hit0,level,truncated"]
        for i in range(self.tau.shape[0]):
            lines.append(f"{i},{self.tau[i]},{self.hit0[i]},{self.level[i]},{int(self.truncated[i])}")
        return "\n".join(lines) + "\n"


COUPLING_NOTE = ("phase 2 starts at equal depth in T0; any collision (in any region) "
                 "coalesces the walks")


class _PiSampler:
    """Draw vertices proportionally to degree without materializing the graph."""

    def __init__(self, g: TreeGraph):
        starts, lengths, degs = [], [], []
        deg_path = [0] * (g.path_length + 1)
        for p in range(g.path_length + 1):
            deg_path[p] = g.degree(VertexRef(PATH, p))
        for p, d in enumerate(deg_path):
            starts.append(p)
            lengths.append(1)
            degs.append(d)
        for r in g.regions:
            if r.size < 2:
                continue
            m = r.size
            # heap vertices with 2, 1, 0 children; leaves may carry loops
            two_hi = m // 2 if m % 2 == 1 else m // 2 - 1  # last heap with two children
            runs = [(2, two_hi, 3)]
            if m % 2 == 0:
                runs.append((m // 2, m // 2, 2))
            runs.append((m // 2 + 1, m, 1 + (2 if g.leaf_self_loops else 0)))
            for lo, hi, d in runs:
                lo = max(lo, 2)
                if hi >= lo:
                    starts.append(r.offset + lo - 2)
                    lengths.append(hi - lo + 1)
                    degs.append(d)
        self.starts = np.array(starts, dtype=np.int64)
        self.lengths = np.array(lengths, dtype=np.int64)
        w = np.array(lengths, dtype=float) * np.array(degs, dtype=float)
        self.cum = np.cumsum(w) / w.sum()

    def draw(self, u1: float, u2: float) -> int:
        b = int(np.searchsorted(self.cum, u1, side="right"))
        b = min(b, len(self.cum) - 1)
        return int(self.starts[b] + min(int(u2 * self.lengths[b]), self.lengths[b] - 1))


def simulate_coupling(c: ChainOperator, x_start, cfg: MCConfig, y_start=None) -> CouplingStats:
    """Simulate the three-phase coupling of X (from ``x_start``) and Y (from pi).

    Requires perfect trees so that depth-synchronized moves are available.
    """
    g = c.graph
    if not all(r.is_perfect for r in g.regions):
        raise ValueError("the depth-synchronized coupling needs perfect trees")
    A = _Arrays(g)
    t0 = [r.name for r in g.regions].index("T0")
    x0 = x_start if isinstance(x_start, (int, np.integer)) else g.encode(x_start)
    y_fixed = None if y_start is None else (
        y_start if isinstance(y_start, (int, np.integer)) else g.encode(y_start))
    sampler = _PiSampler(g) if y_fixed is None else None

    def one(rep):
        gen = cfg.stream(rep)
        if y_fixed is None:
            u = gen.random(2)
            y0 = sampler.draw(u[0], u[1])
        else:
            y0 = y_fixed
        st = np.array([x0, y0, 0, 0], dtype=np.int64)
        marks = np.array([-1, -1, -1], dtype=np.int64)
        for u in _blocks(gen, cfg, 2):
            code = _walk_coupling(st, marks, u, c.laziness, cfg.max_steps, t0, *A.args())
            if code:
                break
        return st[2], marks[0], marks[1], code == 2

    res = _map_replicates(cfg, one)
    return CouplingStats(
        tau=np.array([r[0] for r in res], dtype=np.int64),
        hit0=np.array([r[1] for r in res], dtype=np.int64),
        level=np.array([r[2] for r in res], dtype=np.int64),
        truncated=np.array([r[3] for r in res], dtype=bool),
        seed=cfg.seed, metadata={"note": COUPLING_NOTE})


# -- excursions and path local times -----------------------------------------

def excursion_sampler(g: TreeGraph, cfg: MCConfig, *, lazy: bool = False,
                      root_context: str = "isolated") -> dict:
    """Sample root-excursion lengths on a single tree (root = path vertex 0).

    Conventions match :func:`treecutoff.hitting.excursion_moments`.
    """
    A = _Arrays(g)
    laziness = 0.5 if lazy else 0.0
    kids = [g.encode(VertexRef("T0", 2)), g.encode(VertexRef("T0", 3))]

    def one(rep):
        gen = cfg.stream(rep)
        if root_context == "in_situ":
            v0 = kids[int(gen.random() * 2)]
            st = np.array([v0, 1, 1], dtype=np.int64)
        else:
            st = np.array([0, 0, 0], dtype=np.int64)
        for u in _blocks(gen, cfg):
            code = _walk_return(st, u, 0, laziness, cfg.max_steps, *A.args())
            if code:
                break
        return st[1], code == 2

    res = _map_replicates(cfg, one)
    lengths = np.array([r[0] for r in res], dtype=np.int64)
    trunc = np.array([r[1] for r in res], dtype=bool)
    ok = lengths[~trunc].astype(float)
    out = moment_summary(ok)
    sq = ok**2
    out.update({"second_moment": float(sq.mean()),
                "se_second_moment": float(sq.std(ddof=1) / math.sqrt(len(sq))) if len(sq) > 1 else float("nan"),
                "truncations": int(trunc.sum()), "lengths": lengths})
    return out


def sample_path_local_times(n: int, cfg: MCConfig, boundary: str = "holding") -> np.ndarray:
    """Visit counts (replicates x sites 0..n) of the walk on [0, n] from n."""
    holding = boundary == "holding"

    def one(rep):
        gen = cfg.stream(rep)
        st = np.array([n, 0], dtype=np.int64)
        counts = np.zeros(n + 1, dtype=np.int64)
        for u in _blocks(gen, cfg):
            code = _walk_path_local(st, counts, u, n, holding, cfg.max_steps)
            if code:
                break
        if code == 2:
            counts[:] = -1
        return counts

    return np.array(_map_replicates(cfg, one), dtype=np.int64).reshape(cfg.replicates, n + 1)


def geometric_chisquare(samples: np.ndarray, p: float, min_expected: float = 5.0) -> dict:
    """Chi-square goodness of fit of ``samples`` to Geometric(p) on {1, 2, ...}.

    Tail bins are pooled until every expected count reaches ``min_expected``.
    """
    samples = np.asarray(samples, dtype=np.int64)
    n = samples.shape[0]
    if np.any(samples < 1):
        raise ValueError("geometric samples must be >= 1")
    edges = []
    obs, exp = [], []
    ell = 1
    remaining = 1.0
    while True:
        pk = (1 - p) ** (ell - 1) * p
        tail = (1 - p) ** ell
        if n * tail < min_expected:
            obs.append(int(np.sum(samples >= ell)))
            exp.append(n * remaining)
            edges.append(f">={ell}")
            break
        obs.append(int(np.sum(samples == ell)))
        exp.append(n * pk)
        edges.append(str(ell))
        remaining -= pk
        ell += 1
    obs = np.array(obs, dtype=float)
    exp = np.array(exp, dtype=float)
    exp *= obs.sum() / exp.sum()
    stat, pval = stats.chisquare(obs, exp)
    return {"statistic": float(stat), "p_value": float(pval), "bins": len(obs), "n": int(n)}


def summary_json(obj: dict) -> str:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.floating,)):
            return float(o)
        raise TypeError(type(o))
    return json.dumps(obj, indent=2, sort_keys=True, default=default)
