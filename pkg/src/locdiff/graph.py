"""Dependency graphs, graph distances and extended neighborhoods.

Vertices are indexed ``0 .. b-1``.  Every vertex carries a block of
``block_dims[i]`` flat coordinates; blocks are laid out in vertex order.
"""
from __future__ import annotations

import hashlib
import itertools
import sys
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

#: Distance returned for disconnected vertex pairs.  It compares greater than
#: every finite radius, so neighborhood logic needs no special casing.
UNREACHABLE = sys.maxsize


@dataclass(frozen=True)
class DependencyGraph:
    """Undirected graph with a self-loop at every vertex.

    Parameters
    ----------
    adjacency : tuple of tuple of int
        ``adjacency[i]`` is the sorted neighbor set of ``i`` (including ``i``).
    block_dims : tuple of int
        Dimension of each vertex block.
    """

    adjacency: tuple[tuple[int, ...], ...]
    block_dims: tuple[int, ...]

    def __post_init__(self):
        b = len(self.adjacency)
        if b == 0:
            raise ValueError("graph must have at least one vertex")
        if len(self.block_dims) != b:
            raise ValueError(
                f"block_dims has {len(self.block_dims)} entries for {b} vertices"
            )
        if any(int(di) < 1 for di in self.block_dims):
            raise ValueError("all block dimensions must be >= 1")
        for i, nbrs in enumerate(self.adjacency):
            if i not in nbrs:
                raise ValueError(
                    f"vertex {i} has no self-loop; use with_self_loops() to add them"
                )
            for j in nbrs:
                if not 0 <= j < b:
                    raise ValueError(f"edge ({i}, {j}) references a missing vertex")
                if i not in self.adjacency[j]:
                    raise ValueError(f"adjacency is not symmetric at ({i}, {j})")

    @property
    def b(self) -> int:
        return len(self.adjacency)

    @property
    def total_dim(self) -> int:
        return int(sum(self.block_dims))

    @property
    def offsets(self) -> np.ndarray:
        """Start coordinate of every block (length ``b + 1``)."""
        return np.concatenate([[0], np.cumsum(self.block_dims)]).astype(int)

    def edges(self) -> list[tuple[int, int]]:
        """Undirected edges ``(i, j)`` with ``i < j``; self-loops omitted."""
        return [(i, j) for i, nbrs in enumerate(self.adjacency) for j in nbrs if i < j]

    def graph_hash(self) -> str:
        return hashlib.sha256(format_graph(self).encode("utf-8")).hexdigest()[:16]

    def _check_vertex(self, v: int) -> int:
        if not isinstance(v, (int, np.integer)) or not 0 <= v < self.b:
            raise IndexError(f"vertex {v!r} out of range for graph with {self.b} vertices")
        return int(v)

    def distances_from(self, source: int) -> np.ndarray:
        """BFS distances from ``source`` to every vertex (UNREACHABLE if none)."""
        source = self._check_vertex(source)
        dist = np.full(self.b, UNREACHABLE, dtype=np.int64)
        dist[source] = 0
        queue = deque([source])
        while queue:
            u = queue.popleft()
            for w in self.adjacency[u]:
                if dist[w] == UNREACHABLE:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        return dist


def from_edges(
    b: int,
    edges: Iterable[tuple[int, int]],
    block_dims: Sequence[int] | None = None,
) -> DependencyGraph:
    """Build a graph from an edge list.  Self-loops must be listed explicitly."""
    nbrs: list[set[int]] = [set() for _ in range(b)]
    for i, j in edges:
        if not (0 <= i < b and 0 <= j < b):
            raise ValueError(f"edge ({i}, {j}) out of range for {b} vertices")
        nbrs[i].add(j)
        nbrs[j].add(i)
    dims = tuple(int(x) for x in block_dims) if block_dims is not None else (1,) * b
    return DependencyGraph(tuple(tuple(sorted(s)) for s in nbrs), dims)


def with_self_loops(
    b: int,
    edges: Iterable[tuple[int, int]],
    block_dims: Sequence[int] | None = None,
) -> DependencyGraph:
    """Like :func:`from_edges` but adds the self-loop of every vertex."""
    edges = list(edges) + [(i, i) for i in range(b)]
    return from_edges(b, edges, block_dims)


def path_graph(b: int, block_dims: Sequence[int] | None = None) -> DependencyGraph:
    return with_self_loops(b, [(i, i + 1) for i in range(b - 1)], block_dims)


def banded_graph(d: int, bandwidth: int) -> DependencyGraph:
    """Graph of a banded matrix: ``i ~ j`` iff ``|i - j| <= bandwidth``."""
    edges = [(i, j) for i in range(d) for j in range(i + 1, min(d, i + bandwidth + 1))]
    return with_self_loops(d, edges)


def star_graph(n_leaves: int) -> DependencyGraph:
    """Hub vertex 0 joined to ``n_leaves`` leaves."""
    return with_self_loops(n_leaves + 1, [(0, k) for k in range(1, n_leaves + 1)])


def lattice_graph(shape: Sequence[int]) -> DependencyGraph:
    """Nearest-neighbor lattice on a box of the given shape (row-major labels)."""
    shape = tuple(int(s) for s in shape)
    index = {p: k for k, p in enumerate(itertools.product(*(range(s) for s in shape)))}
    edges = []
    for p, k in index.items():
        for axis in range(len(shape)):
            q = list(p)
            q[axis] += 1
            q = tuple(q)
            if q in index:
                edges.append((k, index[q]))
    return with_self_loops(len(index), edges)


def graph_distance(g: DependencyGraph, i: int, j: int) -> int:
    """Shortest-path length between ``i`` and ``j``; UNREACHABLE if disconnected."""
    g._check_vertex(j)
    return int(g.distances_from(i)[j])


def neighborhood(g: DependencyGraph, j: int, r: int) -> tuple[int, ...]:
    """Extended neighborhood ``{i : d_G(i, j) <= r}``, sorted ascending."""
    if r < 0:
        raise ValueError(f"radius must be non-negative, got {r}")
    dist = g.distances_from(j)
    return tuple(int(i) for i in np.flatnonzero(dist <= r))


def flatten_window(g: DependencyGraph, idx_set: Iterable[int]) -> np.ndarray:
    """Flat coordinate indices of the listed vertex blocks, in vertex order."""
    verts = sorted(set(g._check_vertex(v) for v in idx_set))
    off = g.offsets
    if not verts:
        return np.zeros(0, dtype=int)
    return np.concatenate([np.arange(off[v], off[v + 1]) for v in verts])


@dataclass(frozen=True)
class LocalityCertificate:
    """Outcome of checking ``|N_j^r| <= 1 + S r^nu`` for ``1 <= r <= r_max``.

    ``worst_pair`` is the ``(j, r)`` maximising ``|N_j^r| / (1 + S r^nu)`` and
    ``worst_ratio`` that maximum; the bound holds iff ``worst_ratio <= 1``.
    """

    S: float
    nu: float
    r_max: int
    holds: bool
    worst_pair: tuple[int, int]
    worst_ratio: float


def certify_locality(g: DependencyGraph, S: float, nu: float, r_max: int) -> LocalityCertificate:
    if S <= 0 or nu <= 0:
        raise ValueError("S and nu must be positive")
    if r_max < 1:
        raise ValueError("r_max must be >= 1")
    radii = np.arange(1, r_max + 1)
    caps = 1.0 + S * radii.astype(float) ** nu
    worst = (-np.inf, (0, 1))
    for j in range(g.b):
        dist = g.distances_from(j)
        finite = np.sort(dist[dist != UNREACHABLE])
        sizes = np.searchsorted(finite, radii, side="right")
        ratios = sizes / caps
        k = int(np.argmax(ratios))
        if ratios[k] > worst[0]:
            worst = (float(ratios[k]), (j, int(radii[k])))
    return LocalityCertificate(
        S=float(S),
        nu=float(nu),
        r_max=int(r_max),
        holds=bool(worst[0] <= 1.0),
        worst_pair=worst[1],
        worst_ratio=worst[0],
    )


def format_graph(g: DependencyGraph) -> str:
    """Serialize to the line-oriented graph file format (0-based, loops implicit)."""
    lines = [f"b {g.b}", "dims " + " ".join(str(x) for x in g.block_dims)]
    lines += [f"edge {i} {j}" for i, j in g.edges()]
    return "\n".join(lines) + "\n"


def parse_graph(text: str) -> DependencyGraph:
    """Parse the graph file format written by :func:`format_graph`.

    Blank lines and ``#`` comments are ignored.  ``dims`` may be omitted, in
    which case every block is one-dimensional.
    """
    b = None
    dims = None
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        try:
            if head == "b":
                (b,) = (int(x) for x in rest)
            elif head == "dims":
                dims = [int(x) for x in rest]
            elif head == "edge":
                i, j = (int(x) for x in rest)
                edges.append((i, j))
            else:
                raise ValueError(f"unknown record {head!r}")
        except ValueError as exc:
            raise ValueError(f"graph file line {lineno}: {exc}") from None
    if b is None:
        raise ValueError("graph file has no 'b <count>' header")
    if dims is not None and len(dims) != b:
        raise ValueError(f"'dims' lists {len(dims)} entries but b = {b}")
    return with_self_loops(b, edges, dims)


def read_graph_file(path: str | Path) -> DependencyGraph:
    return parse_graph(Path(path).read_text())


def write_graph_file(g: DependencyGraph, path: str | Path) -> None:
    Path(path).write_text(format_graph(g))
