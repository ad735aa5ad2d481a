"""Tree family construction and implicit vertex addressing.

The graph is a path ``0..L`` with perfect or complete binary trees hanging
off selected path positions.  Every tree is stored in binary-heap order
(root = heap index 1, children of ``i`` are ``2i`` and ``2i + 1``) and its
root *is* the path vertex it hangs from, so no adjacency list is ever needed.

Flat state enumeration::

    0 .. L                         path positions
    off_r + (i - 2), i = 2..m_r    non-root vertices of tree region r

Regions are laid out in order ``T0, T_lo, ..., T_k``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np
import scipy.sparse as sp

PATH = "path"
TREE_MODES = ("perfect", "exact_size")
DEFAULT_MATERIALIZE_LIMIT = 10**6


class AddressingError(ValueError):
    """Raised for a VertexRef that does not name a vertex of the graph."""


class MemoryBudgetError(RuntimeError):
    """Raised when a materialized representation would exceed the budget."""


def _integer_power(base: int, exponent: Fraction) -> int:
    """Return ``base ** exponent`` for a rational exponent, exactly."""
    p, q = exponent.numerator, exponent.denominator
    root = round(base ** (1.0 / q))
    for cand in (root - 1, root, root + 1):
        if cand > 0 and cand**q == base:
            return cand**p
    raise ValueError(f"{base}**({exponent}) is not an integer")


def perfect_size(m: int) -> int:
    """Largest perfect-binary-tree size ``2**(d+1) - 1`` not exceeding ``m``."""
    if m < 1:
        raise ValueError("tree size must be positive")
    return (1 << ((m + 1).bit_length() - 1)) - 1


@dataclass(frozen=True)
class TreeFamilySpec:
    """Parameters of one member of the tree family.

    Parameters
    ----------
    k : int
        Family index, ``k >= 1``.
    base : int or None
        Level schedule.  ``None`` gives ``n_j = 2**(2**j)``; an integer
        ``b >= 2`` gives ``n_j = b**j``.
    alpha : Fraction
        Mass exponent, ``N = n_k**alpha``.
    attach_lo : int or None
        First attached level; defaults to ``ceil(k / 2)``.
    tree_mode : {'perfect', 'exact_size'}
        ``perfect`` rounds every tree down to a perfect binary tree,
        ``exact_size`` builds a left-filled complete tree of the requested size.
    leaf_self_loops : bool
        Give every tree leaf a self-loop (contributing 2 to its degree).
    """

    k: int
    base: Optional[int] = None
    alpha: Fraction = Fraction(3)
    attach_lo: Optional[int] = None
    tree_mode: str = "perfect"
    leaf_self_loops: bool = False

    def __post_init__(self):
        if isinstance(self.k, bool) or not isinstance(self.k, (int, np.integer)) or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k!r}")
        if self.base is not None and self.base < 2:
            raise ValueError("base must be >= 2")
        object.__setattr__(self, "alpha", Fraction(self.alpha))
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.tree_mode not in TREE_MODES:
            raise ValueError(f"tree_mode must be one of {TREE_MODES}")
        lo = self.lo
        if not 0 <= lo <= self.k:
            raise ValueError(f"attach_lo must lie in [0, k], got {lo}")
        levels = [self.level(j) for j in range(lo, self.k + 1)]
        if any(b <= a for a, b in zip(levels, levels[1:])) or levels[0] < 1:
            raise ValueError("attach positions must be distinct and increasing")
        if self.N < self.level(self.k):
            raise ValueError("N must be at least n_k")

    @property
    def lo(self) -> int:
        return math.ceil(self.k / 2) if self.attach_lo is None else int(self.attach_lo)

    def level(self, j: int) -> int:
        if self.base is None:
            return 2 ** (2**j)
        return self.base**j

    @property
    def levels(self) -> dict:
        return {j: self.level(j) for j in range(self.lo, self.k + 1)}

    @property
    def n_k(self) -> int:
        return self.level(self.k)

    @property
    def N(self) -> int:
        return _integer_power(self.n_k, self.alpha)

    def requested_sizes(self) -> dict:
        """Requested tree sizes keyed by region name (``T0`` and ``T<j>``)."""
        N = self.N
        sizes = {"T0": N}
        for j, nj in self.levels.items():
            sizes[f"T{j}"] = max(N // nj, 1)
        return sizes

    # -- plain-text key/value config ------------------------------------
    def to_config(self) -> str:
        base = "none" if self.base is None else str(self.base)
        lo = "auto" if self.attach_lo is None else str(self.attach_lo)
        return (
            f"k = {self.k}\nbase = {base}\nalpha = {self.alpha}\n"
            f"attach_lo = {lo}\nmode = {self.tree_mode}\n"
            f"leaf_self_loops = {str(self.leaf_self_loops).lower()}\n"
        )

    @classmethod
    def from_config(cls, text: str) -> "TreeFamilySpec":
        kv = parse_config(text)
        return cls(**config_to_kwargs(kv))


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def config_to_kwargs(kv: dict) -> dict:
    """Convert raw config strings into TreeFamilySpec keyword arguments."""
    known = {"k", "base", "alpha", "attach_lo", "mode", "tree_mode", "leaf_self_loops"}
    unknown = set(kv) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    if "k" in kv:
        out["k"] = int(kv["k"])
    if "base" in kv:
        out["base"] = None if kv["base"].lower() in ("none", "") else int(kv["base"])
    if "alpha" in kv:
        out["alpha"] = Fraction(kv["alpha"])
    if "attach_lo" in kv:
        out["attach_lo"] = None if kv["attach_lo"].lower() in ("auto", "none") else int(kv["attach_lo"])
    mode = kv.get("tree_mode", kv.get("mode"))
    if mode is not None:
        out["tree_mode"] = mode
    if "leaf_self_loops" in kv:
        val = kv["leaf_self_loops"].lower()
        if val not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"leaf_self_loops: not a boolean: {val!r}")
        out["leaf_self_loops"] = val in ("true", "1", "yes")
    return out


class VertexRef(NamedTuple):
    """A vertex named by region and coordinate.

    ``index`` is the path position for ``region == 'path'`` and the heap index
    (root = 1) inside a tree region.  Tree roots are canonically addressed
    through the path.
    """

    region: str
    index: int


@dataclass(frozen=True)
class Region:
    name: str
    root_pos: int
    requested_size: int
    size: int
    offset: int
    level: Optional[int] = None  # family level j, None for T0 / ad-hoc trees

    @property
    def depth(self) -> int:
        return self.size.bit_length() - 1

    @property
    def is_perfect(self) -> bool:
        return (self.size + 1) & self.size == 0

    def level_slices(self) -> Iterator[tuple]:
        """Yield ``(depth, first_heap, last_heap_exclusive)`` per level."""
        for d in range(self.depth + 1):
            lo = 1 << d
            yield d, lo, min(2 * lo, self.size + 1)


@dataclass(frozen=True, eq=False)
class TreeGraph:
    """A path with binary trees rooted at path vertices.

    Immutable; all neighbor queries are arithmetic.  Use
    :func:`build_family_tree` for family members and :meth:`from_regions`
    for ad-hoc shapes (single trees, bare paths, ...).
    """

    path_length: int
    regions: tuple
    tree_mode: str = "perfect"
    leaf_self_loops: bool = False
    spec: Optional[TreeFamilySpec] = None
    materialize_limit: int = DEFAULT_MATERIALIZE_LIMIT
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_regions(cls, path_length: int, trees: Sequence[tuple], *,
                     tree_mode: str = "perfect", leaf_self_loops: bool = False,
                     spec: Optional[TreeFamilySpec] = None,
                     materialize_limit: int = DEFAULT_MATERIALIZE_LIMIT) -> "TreeGraph":
        """Assemble a graph from ``(name, root_pos, requested_size[, level])`` tuples.

        A tree named ``T0`` at position 0 is added (with size 1) if absent.
        """
        if path_length < 0:
            raise ValueError("path_length must be non-negative")
        if tree_mode not in TREE_MODES:
            raise ValueError(f"tree_mode must be one of {TREE_MODES}")
        trees = list(trees)
        if not any(t[0] == "T0" for t in trees):
            trees.insert(0, ("T0", 0, 1))
        positions = [t[1] for t in trees]
        if len(set(positions)) != len(positions):
            raise ValueError("at most one tree per path position")
        regions = []
        offset = path_length + 1
        for t in trees:
            name, pos, req = t[0], int(t[1]), int(t[2])
            level = t[3] if len(t) > 3 else None
            if name == PATH:
                raise ValueError("'path' is reserved")
            if not 0 <= pos <= path_length:
                raise ValueError(f"root position {pos} outside [0, {path_length}]")
            size = perfect_size(req) if tree_mode == "perfect" else req
            regions.append(Region(name, pos, req, size, offset, level))
            offset += size - 1
        return cls(path_length, tuple(regions), tree_mode, bool(leaf_self_loops),
                   spec, materialize_limit)

    # -- sizes ----------------------------------------------------------
    @property
    def vertex_count(self) -> int:
        return self.path_length + 1 + sum(r.size - 1 for r in self.regions)

    @property
    def n_loops(self) -> int:
        if not self.leaf_self_loops:
            return 0
        return sum(r.size - r.size // 2 for r in self.regions if r.size > 1)

    @property
    def edge_count(self) -> int:
        """Tree edges plus self-loops (each loop counted once)."""
        return self.vertex_count - 1 + self.n_loops

    @property
    def total_degree(self) -> int:
        return 2 * self.edge_count

    def region(self, name: str) -> Region:
        for r in self.regions:
            if r.name == name:
                return r
        raise AddressingError(f"no region named {name!r}")

    @property
    def region_names(self) -> list:
        return [PATH] + [r.name for r in self.regions]

    def attached_at(self, pos: int) -> Optional[Region]:
        table = self._cache.get("attach")
        if table is None:
            table = {r.root_pos: r for r in self.regions if r.size > 1}
            self._cache["attach"] = table
        return table.get(pos)

    # -- addressing -----------------------------------------------------
    def canonical(self, v: VertexRef) -> VertexRef:
        region, index = v
        if region == PATH:
            if not 0 <= index <= self.path_length:
                raise AddressingError(f"path position {index} out of range")
            return VertexRef(PATH, int(index))
        r = self.region(region)
        if not 1 <= index <= r.size:
            raise AddressingError(f"heap index {index} out of range for {region}")
        if index == 1:
            return VertexRef(PATH, r.root_pos)
        return VertexRef(region, int(index))

    def encode(self, v: VertexRef) -> int:
        """Flat state index of ``v``."""
        v = self.canonical(VertexRef(*v))
        if v.region == PATH:
            return v.index
        return self.region(v.region).offset + v.index - 2

    def decode(self, x: int) -> VertexRef:
        x = int(x)
        if not 0 <= x < self.vertex_count:
            raise AddressingError(f"state {x} out of range")
        if x <= self.path_length:
            return VertexRef(PATH, x)
        for r in reversed(self.regions):
            if x >= r.offset and r.size > 1:
                return VertexRef(r.name, x - r.offset + 2)
        raise AddressingError(f"state {x} not mapped")  # pragma: no cover

    def region_index_array(self) -> np.ndarray:
        """Per flat state: 0 for the path, ``r + 1`` for ``self.regions[r]``."""
        out = np.zeros(self.vertex_count, dtype=np.int64)
        for i, r in enumerate(self.regions):
            out[r.offset:r.offset + r.size - 1] = i + 1
        return out

    def region_mask(self, name: str, include_root: bool = True) -> np.ndarray:
        """Boolean mask of a region's vertices (tree regions include their root)."""
        mask = np.zeros(self.vertex_count, dtype=bool)
        if name == PATH:
            mask[: self.path_length + 1] = True
            return mask
        r = self.region(name)
        mask[r.offset:r.offset + r.size - 1] = True
        if include_root:
            mask[r.root_pos] = True
        return mask

    def depth_array(self, name: str) -> np.ndarray:
        """Depth of each non-root vertex of a tree region, in flat order."""
        r = self.region(name)
        heap = np.arange(2, r.size + 1, dtype=np.int64)
        return np.floor(np.log2(heap)).astype(np.int64)

    # -- structure --------------------------------------------------------
    def neighbors(self, v: VertexRef) -> list:
        return neighbors(self, v)

    def degree(self, v: VertexRef) -> int:
        v = self.canonical(VertexRef(*v))
        return sum(2 if u == v else 1 for u in neighbors(self, v))

    def degrees(self) -> np.ndarray:
        """Degree of every flat state (a self-loop counts 2)."""
        deg = self._cache.get("deg")
        if deg is None:
            deg = self.adjacency_apply(np.ones(self.vertex_count))
            deg.setflags(write=False)
            self._cache["deg"] = deg
        return deg

    def adjacency_apply(self, v: np.ndarray) -> np.ndarray:
        """Return ``W @ v`` where ``W`` is the (symmetric) adjacency matrix.

        Self-loops carry weight 2.  Works on the implicit representation in
        O(vertex_count) with per-level slicing; ``v`` may be 1-D or 2-D (columns).
        """
        v = np.asarray(v, dtype=float)
        out = np.zeros_like(v)
        L = self.path_length
        if L > 0:
            out[1:L + 1] += v[0:L]
            out[0:L] += v[1:L + 1]
        for r in self.regions:
            m = r.size
            if m < 2:
                continue
            t = np.empty((m + 1,) + v.shape[1:])
            t[0] = 0.0
            t[1] = v[r.root_pos]
            t[2:] = v[r.offset:r.offset + m - 1]
            o = np.zeros_like(t)
            # child i gets its parent i // 2
            o[2:] += np.repeat(t[1:m // 2 + 1], 2, axis=0)[: m - 1]
            # parent j gets children 2j, 2j+1
            kids = t[2:m + 1]
            if kids.shape[0] % 2:
                kids = np.concatenate([kids, np.zeros((1,) + kids.shape[1:])])
            paired = kids.reshape((-1, 2) + kids.shape[1:]).sum(axis=1)
            o[1:1 + paired.shape[0]] += paired
            if self.leaf_self_loops:
                o[m // 2 + 1:] += 2.0 * t[m // 2 + 1:]
            out[r.root_pos] += o[1]
            out[r.offset:r.offset + m - 1] += o[2:]
        return out

    def edges(self) -> tuple:
        """Arrays ``(u, v)`` of tree edges (no loops) in flat indices."""
        us, vs = [np.arange(0, self.path_length)], [np.arange(1, self.path_length + 1)]
        for r in self.regions:
            if r.size < 2:
                continue
            heap = np.arange(2, r.size + 1, dtype=np.int64)
            parent = heap // 2
            pflat = np.where(parent == 1, r.root_pos, r.offset + parent - 2)
            us.append(pflat)
            vs.append(r.offset + heap - 2)
        return np.concatenate(us).astype(np.int64), np.concatenate(vs).astype(np.int64)

    def loop_vertices(self) -> np.ndarray:
        if not self.leaf_self_loops:
            return np.zeros(0, dtype=np.int64)
        out = []
        for r in self.regions:
            if r.size < 2:
                continue
            heap = np.arange(r.size // 2 + 1, r.size + 1)
            out.append(r.offset + heap - 2)
        return np.concatenate(out).astype(np.int64) if out else np.zeros(0, dtype=np.int64)

    def adjacency(self) -> sp.csr_matrix:
        """Materialized integer adjacency (loops weight 2); respects the budget."""
        W = self._cache.get("csr")
        if W is not None:
            return W
        n = self.vertex_count
        if n > self.materialize_limit:
            raise MemoryBudgetError(
                f"{n} vertices exceeds materialization limit {self.materialize_limit}")
        u, v = self.edges()
        loops = self.loop_vertices()
        rows = np.concatenate([u, v, loops])
        cols = np.concatenate([v, u, loops])
        data = np.concatenate([np.ones(2 * len(u)), np.full(len(loops), 2.0)])
        W = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
        W.sum_duplicates()
        W.sort_indices()
        self._cache["csr"] = W
        return W

    def summary(self) -> dict:
        """JSON-ready description (region table plus family parameters)."""
        out = {
            "vertex_count": self.vertex_count,
            "edge_count": self.edge_count,
            "path_length": self.path_length,
            "tree_mode": self.tree_mode,
            "leaf_self_loops": self.leaf_self_loops,
            "regions": [
                {"name": r.name, "requested_size": r.requested_size,
                 "actual_size": r.size, "root_path_position": r.root_pos,
                 "depth": r.depth, "level": r.level}
                for r in self.regions
            ],
        }
        if self.spec is not None:
            s = self.spec
            out["family"] = {
                "k": s.k, "base": s.base, "alpha": str(s.alpha), "attach_lo": s.lo,
                "levels": {str(j): nj for j, nj in s.levels.items()}, "N": s.N,
            }
        return out

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def build_family_tree(spec: TreeFamilySpec, *, materialize: bool = False,
                      memory_budget: int = DEFAULT_MATERIALIZE_LIMIT) -> TreeGraph:
    """Build the family member described by ``spec``.

    ``T0`` of size ``N`` hangs at path position 0 and, for each attached
    level ``j``, ``T_j`` of size ``N // n_j`` hangs at position ``n_j``.

    Raises
    ------
    MemoryBudgetError
        If ``materialize`` is set and the vertex count exceeds ``memory_budget``.
    """
    sizes = spec.requested_sizes()
    trees = [("T0", 0, sizes["T0"], None)]
    for j, nj in spec.levels.items():
        trees.append((f"T{j}", nj, sizes[f"T{j}"], j))
    g = TreeGraph.from_regions(spec.n_k, trees, tree_mode=spec.tree_mode,
                               leaf_self_loops=spec.leaf_self_loops, spec=spec,
                               materialize_limit=memory_budget)
    if materialize:
        g.adjacency()
    return g


def path_graph(n: int) -> TreeGraph:
    """The bare path ``0..n``."""
    return TreeGraph.from_regions(n, [])


def single_tree(n: int, *, tree_mode: str = "perfect", leaf_self_loops: bool = False) -> TreeGraph:
    """A lone binary tree on ``n`` vertices; its root is path vertex 0."""
    return TreeGraph.from_regions(0, [("T0", 0, n)], tree_mode=tree_mode,
                                  leaf_self_loops=leaf_self_loops)


def neighbors(g: TreeGraph, v: VertexRef) -> list:
    """Graph neighbors of ``v`` in deterministic order.

    Path vertices list ``pos - 1``, ``pos + 1`` and then the children of an
    attached tree; tree vertices list parent, children and (for leaves with
    self-loops enabled) themselves.
    """
    v = g.canonical(VertexRef(*v))
    out = []
    if v.region == PATH:
        p = v.index
        if p > 0:
            out.append(VertexRef(PATH, p - 1))
        if p < g.path_length:
            out.append(VertexRef(PATH, p + 1))
        r = g.attached_at(p)
        if r is not None:
            out.extend(VertexRef(r.name, c) for c in (2, 3) if c <= r.size)
        return out
    r = g.region(v.region)
    i = v.index
    out.append(g.canonical(VertexRef(r.name, i // 2)))
    kids = [c for c in (2 * i, 2 * i + 1) if c <= r.size]
    out.extend(VertexRef(r.name, c) for c in kids)
    if not kids and g.leaf_self_loops:
        out.append(v)
    return out


def canonical_starts(g: TreeGraph) -> list:
    """Worst-case start candidates.

    The far path end, every region root, and one deepest leaf per tree region,
    without duplicates and in that order.
    """
    starts = [VertexRef(PATH, g.path_length)]
    for r in g.regions:
        starts.append(VertexRef(PATH, r.root_pos))
    for r in g.regions:
        if r.size > 1:
            starts.append(VertexRef(r.name, 1 << r.depth))
    seen, out = set(), []
    for s in starts:
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out
