"""Box spaces, bounded geometry, nets and Rips complexes."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import SizeBudgetError, ValidationError
from .groups import CayleyGraph, QuotientChain, build_quotient

DEFAULT_SIMPLEX_CAP = 2_000_000


class BoxSpace:
    """Disjoint union of Cayley graphs with points drifting apart by level.

    Points are flat indices 0..size-1; ``point_id(i)`` gives the (level,
    vertex) pair with 1-based levels.  Across components
    d((i, x), (j, y)) = diam_i + diam_j + i + j, which dominates i + j and
    keeps the triangle inequality (see docs/cross_metric.md).
    """

    def __init__(self, components: Sequence[CayleyGraph]):
        if not components:
            raise ValidationError("a box space needs at least one component")
        self.components = tuple(components)
        sizes = np.array([c.order for c in self.components], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.diameters = np.array([c.diameter for c in self.components], dtype=np.int64)
        self._comp_of = np.repeat(np.arange(len(sizes)), sizes)

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    @property
    def levels(self) -> list[int]:
        return list(range(1, len(self.components) + 1))

    @property
    def name(self) -> str:
        c = self.components[0]
        return f"box-{c.family.name}-" + "-".join(str(g.modulus) for g in self.components)

    def component(self, level: int) -> CayleyGraph:
        return self.components[level - 1]

    def point_id(self, flat: int) -> tuple[int, int]:
        c = int(self._comp_of[flat])
        return c + 1, int(flat - self.offsets[c])

    def flat(self, level: int, vertex: int) -> int:
        return int(self.offsets[level - 1] + vertex)

    def component_slice(self, level: int) -> slice:
        return slice(int(self.offsets[level - 1]), int(self.offsets[level]))

    def cross_distance(self, level_i: int, level_j: int) -> int:
        if level_i == level_j:
            raise ValueError("cross distance is defined between distinct levels")
        return int(self.diameters[level_i - 1] + self.diameters[level_j - 1] + level_i + level_j)

    def pair_distances(self, xs, ys) -> np.ndarray:
        xs, ys = np.broadcast_arrays(np.asarray(xs), np.asarray(ys))
        ci, cj = self._comp_of[xs], self._comp_of[ys]
        out = np.array(self.diameters[ci] + self.diameters[cj] + ci + cj + 2, dtype=np.int64)
        same = ci == cj
        for c, graph in enumerate(self.components):
            mask = same & (ci == c)
            if mask.any():
                off = self.offsets[c]
                out[mask] = graph.pair_distances(xs[mask] - off, ys[mask] - off)
        return out

    def ball(self, x: int, radius: float) -> np.ndarray:
        level, v = self.point_id(x)
        parts = [self.offsets[level - 1] + self.component(level).ball(v, radius)]
        for j in self.levels:
            if j != level and self.cross_distance(level, j) <= radius:
                parts.append(np.arange(self.offsets[j - 1], self.offsets[j]))
        return np.sort(np.concatenate(parts))

    @cached_property
    def dist(self) -> np.ndarray:
        n = self.size
        idx = np.arange(n)
        return self.pair_distances(idx[:, None], idx[None, :])


def assemble_box_space(chain: QuotientChain, levels: Iterable[int] | None = None) -> BoxSpace:
    levels = list(levels) if levels is not None else list(range(1, len(chain.moduli) + 1))
    if not levels:
        raise ValidationError("assemble_box_space needs at least one level")
    return BoxSpace([build_quotient(chain, lvl) for lvl in levels])


def distance(box: BoxSpace, p: tuple[int, int], q: tuple[int, int]) -> int:
    """Box metric between point ids (level, vertex)."""
    return int(box.pair_distances(box.flat(*p), box.flat(*q)))


def bounded_geometry_profile(box: BoxSpace, R: float) -> int:
    """N_R = max over points of |B(x, R)|.

    Balls inside a Cayley component are translates of the ball about the
    identity, so each component contributes one count plus every other
    component lying within R.
    """
    if R < 0:
        raise ValidationError("R must be non-negative")
    best = 0
    for i, graph in enumerate(box.components, start=1):
        count = int(np.count_nonzero(graph.word_length <= R))
        for j, other in enumerate(box.components, start=1):
            if j != i and box.cross_distance(i, j) <= R:
                count += other.order
        best = max(best, count)
    return best


def ball_growth_bound(degree: int, R: int) -> int:
    """1 + s + ... + s^R, the free-semigroup bound on ball sizes."""
    return sum(degree**k for k in range(int(R) + 1))


@dataclass(frozen=True)
class RipsComplex:
    scale: float
    simplices: tuple[tuple[tuple[int, ...], ...], ...]  # simplices[d] = d-simplices

    def count(self, dim: int) -> int:
        return len(self.simplices[dim]) if dim < len(self.simplices) else 0

    def all_simplices(self) -> list[tuple[int, ...]]:
        return [s for layer in self.simplices for s in layer]

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.all_simplices():
                fh.write(" ".join(str(v) for v in s) + "\n")


def read_simplices(path: str | Path) -> list[tuple[int, ...]]:
    with open(path, encoding="utf-8") as fh:
        return [tuple(int(t) for t in line.split()) for line in fh if line.strip()]


def rips_complex(space, R: float, max_dim: int, cap: int = DEFAULT_SIMPLEX_CAP) -> RipsComplex:
    """Clique complex of the graph {d(x, y) <= R} up to dimension max_dim.

    Simplices are sorted vertex tuples, grown by extending each clique with
    common neighbours larger than its last vertex.
    """
    if R < 0 or max_dim < 0:
        raise ValidationError("rips_complex needs R >= 0 and max_dim >= 0")
    n = space.size
    nbrs: list[np.ndarray] = []
    for x in range(n):
        ball = space.ball(x, R)
        nbrs.append(ball[ball > x])
    nbr_sets = [set(a.tolist()) for a in nbrs]
    layers: list[list[tuple[int, ...]]] = [[(x,) for x in range(n)]]
    total = n
    frontier = [((x,), nbr_sets[x]) for x in range(n)]
    for _ in range(max_dim):
        nxt = []
        out = []
        for simplex, common in frontier:
            for v in sorted(common):
                s = simplex + (v,)
                out.append(s)
                nxt.append((s, common & nbr_sets[v]))
        total += len(out)
        if total > cap:
            raise SizeBudgetError(f"Rips complex exceeds the simplex cap {cap}")
        layers.append(out)
        frontier = nxt
    return RipsComplex(R, tuple(tuple(layer) for layer in layers))


def verify_net(space, subset: Iterable[int], r: float) -> bool:
    """True iff ``subset`` is r-separated and every point lies within < r of it."""
    pts = np.array(sorted(set(int(s) for s in subset)), dtype=np.int64)
    if space.size and not len(pts):
        return False
    if len(pts) > 1:
        d = space.pair_distances(pts[:, None], pts[None, :])
        off = ~np.eye(len(pts), dtype=bool)
        if np.any(d[off] < r):
            return False
    for start in range(0, space.size, 512):
        rows = np.arange(start, min(space.size, start + 512))
        d = space.pair_distances(rows[:, None], pts[None, :])
        if np.any(d.min(axis=1) >= r):
            return False
    return True


class DistanceMatrixSpace:
    """A finite metric space given by an explicit distance matrix."""

    def __init__(self, dist, name: str = "matrix-space"):
        self.dist = np.asarray(dist)
        self.name = name

    @property
    def size(self) -> int:
        return len(self.dist)

    def pair_distances(self, xs, ys) -> np.ndarray:
        return self.dist[np.asarray(xs), np.asarray(ys)]

    def ball(self, x: int, radius: float) -> np.ndarray:
        return np.nonzero(self.dist[x] <= radius)[0]

    @classmethod
    def from_graph(cls, adjacency, name: str = "graph") -> "DistanceMatrixSpace":
        from scipy.sparse.csgraph import shortest_path

        d = shortest_path(np.asarray(adjacency) != 0, unweighted=True)
        return cls(d, name)
