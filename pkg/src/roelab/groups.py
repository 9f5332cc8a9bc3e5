"""Finite quotients of 2x2 integer matrix groups, their Cayley graphs and covers.

Every built-in family is a group of 2x2 integer matrices reduced mod m:

* ``sl2``: the free subgroup of SL(2, Z) generated by [[1,2],[0,1]] and
  [[1,0],[2,1]]; its reductions mod odd m are SL(2, Z/m).
* ``cyclic``: Z/m realised as the unipotent matrices [[1,t],[0,1]].
* ``dihedral``: the affine maps x -> +-x + t of Z/m.

Cayley graphs use right multiplication for edges (x ~ x*s), so the word
metric is left-invariant and left multiplication acts by isometries.
Deck transformations of a cover are left multiplications by kernel
elements, which commute with the reduction map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import InvariantViolation, NotGeneratedError, NotNestedError, ValidationError

DEFAULT_MAX_ORDER = 2_000_000
# dense distance matrices are only materialised below this order
DENSE_DIST_LIMIT = 4096
# direct code -> index tables are used while m^4 stays below this
CODE_TABLE_LIMIT = 1 << 24


def _as_matrices(mats) -> np.ndarray:
    arr = np.asarray(mats, dtype=np.int64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[1:] != (2, 2):
        raise ValidationError("group elements must be 2x2 integer matrices")
    return arr


def _int_inverse(mat: np.ndarray) -> np.ndarray:
    """Inverse of an integer matrix of determinant +-1 (exact, over Z)."""
    a, b, c, d = mat[0, 0], mat[0, 1], mat[1, 0], mat[1, 1]
    det = a * d - b * c
    if det not in (1, -1):
        raise ValidationError(f"generator {mat.tolist()} is not invertible over Z")
    return det * np.array([[d, -b], [-c, a]], dtype=np.int64)


@dataclass(frozen=True)
class GeneratingSet:
    """Symmetric generating set of a matrix group over Z.

    ``inverse_of[i]`` is the position of the inverse of ``elements[i]``.
    """

    elements: tuple[tuple[tuple[int, int], tuple[int, int]], ...]
    inverse_of: tuple[int, ...] = field(default=())

    def __post_init__(self):
        mats = [np.array(g, dtype=np.int64) for g in self.elements]
        keys = [tuple(m.ravel()) for m in mats]
        if len(set(keys)) != len(keys):
            raise ValidationError("generating set has duplicate elements")
        if any(k == (1, 0, 0, 1) for k in keys):
            raise ValidationError("identity must not be a generator (use the measure's identity weight)")
        pos = {k: i for i, k in enumerate(keys)}
        inv = []
        for m in mats:
            k = tuple(_int_inverse(m).ravel())
            if k not in pos:
                raise ValidationError(f"generating set is not symmetric: inverse of {m.tolist()} missing")
            inv.append(pos[k])
        object.__setattr__(self, "inverse_of", tuple(inv))

    @classmethod
    def symmetrize(cls, mats) -> "GeneratingSet":
        out: list = []
        seen: set = set()
        for m in _as_matrices(mats):
            for g in (m, _int_inverse(m)):
                k = tuple(int(v) for v in g.ravel())
                if k not in seen:
                    seen.add(k)
                    out.append(((k[0], k[1]), (k[2], k[3])))
        return cls(tuple(out))

    @property
    def matrices(self) -> np.ndarray:
        return np.array(self.elements, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.elements)


SANOV = GeneratingSet.symmetrize([[[1, 2], [0, 1]], [[1, 0], [2, 1]]])


@dataclass(frozen=True)
class GroupFamily:
    """A matrix group over Z together with the rule for admissible moduli."""

    name: str
    generators: GeneratingSet

    def validate_modulus(self, m: int) -> None:
        if not isinstance(m, (int, np.integer)) or m < 2:
            raise ValidationError(f"modulus must be an integer >= 2, got {m!r}")
        if self.name == "sl2" and (m % 2 == 0 or m < 3):
            raise ValidationError(
                f"modulus {m} rejected: the sl2 family needs an odd modulus >= 3 "
                "(the default generators degenerate mod 2)"
            )
        if self.name == "dihedral" and m < 3:
            raise ValidationError(f"modulus {m} rejected: the dihedral family needs m >= 3")

    def expected_order(self, m: int) -> int | None:
        """Closed-form quotient order where known, else None."""
        if self.name == "sl2":
            order = m**3
            for q in _prime_factors(m):
                order = order * (q * q - 1) // (q * q)
            return order
        if self.name == "cyclic":
            return m
        if self.name == "dihedral":
            return 2 * m
        return None


def _prime_factors(m: int) -> list[int]:
    out, q = [], 2
    while q * q <= m:
        if m % q == 0:
            out.append(q)
            while m % q == 0:
                m //= q
        q += 1
    if m > 1:
        out.append(m)
    return out


def sl2_family() -> GroupFamily:
    return GroupFamily("sl2", SANOV)


def cyclic_family(steps: Sequence[int] = (1,)) -> GroupFamily:
    mats = [[[1, int(s)], [0, 1]] for s in steps]
    return GroupFamily("cyclic", GeneratingSet.symmetrize(mats))


def dihedral_family() -> GroupFamily:
    return GroupFamily("dihedral", GeneratingSet.symmetrize([[[1, 1], [0, 1]], [[-1, 0], [0, 1]]]))


FAMILIES = {"sl2": sl2_family, "cyclic": cyclic_family, "dihedral": dihedral_family}


def get_family(name: str, **kwargs) -> GroupFamily:
    try:
        return FAMILIES[name](**kwargs)
    except KeyError:
        raise ValidationError(f"unknown group family {name!r}; expected one of {sorted(FAMILIES)}") from None


@dataclass(frozen=True)
class QuotientChain:
    family: GroupFamily
    moduli: tuple[int, ...]

    def __post_init__(self):
        if not self.moduli:
            raise ValidationError("a quotient chain needs at least one modulus")
        for m in self.moduli:
            self.family.validate_modulus(m)

    @property
    def is_divisibility_chain(self) -> bool:
        return all(b % a == 0 for a, b in zip(self.moduli, self.moduli[1:]))

    def modulus(self, level: int) -> int:
        if not 1 <= level <= len(self.moduli):
            raise ValidationError(f"level {level} outside chain of length {len(self.moduli)}")
        return self.moduli[level - 1]


class CayleyGraph:
    """Cayley graph of the finite group <S> inside GL(2, Z/m).

    The identity has index 0 and the remaining elements follow in ascending
    order of their entries (for the cyclic family vertex i is the residue
    i).  ``word_length`` is the BFS layer of each element.  ``right_action[x, s]`` is the index of
    ``x * generators[s]``; ``generator_index[i]`` is the index of the i-th
    family generator (family generators may collide mod m, graph generators
    are deduplicated).
    """

    def __init__(self, family: GroupFamily, modulus: int, level: int = 1,
                 max_order: int = DEFAULT_MAX_ORDER):
        family.validate_modulus(modulus)
        self.family = family
        self.modulus = int(modulus)
        self.level = int(level)
        m = self.modulus
        fam_gens = family.generators.matrices % m
        codes = self._encode(fam_gens)
        _, first = np.unique(codes, return_index=True)
        keep = np.sort(first)
        ident = self._encode(np.eye(2, dtype=np.int64)[None])[0]
        keep = np.array([i for i in keep if codes[i] != ident], dtype=np.int64)
        self.generators = fam_gens[keep]

        elems, lengths = self._bfs(max_order)
        codes = self._encode(elems)
        # identity first, then ascending code: Z/m vertex i is the integer i
        perm = np.concatenate([[0], 1 + np.argsort(codes[1:], kind="stable")])
        elems, lengths, codes = elems[perm], lengths[perm], codes[perm]
        self.elements = elems
        self.word_length = lengths
        self._order = np.argsort(codes, kind="stable")
        self._sorted_codes = codes[self._order]
        self.right_action = np.stack(
            [self.index_of((elems @ g) % m) for g in self.generators], axis=1
        ) if len(self.generators) else np.zeros((len(elems), 0), dtype=np.int64)
        self.generator_index = self.index_of(fam_gens)
        self.inverse = self.index_of(self._inverse_mats(elems))
        for arr in (self.elements, self.word_length, self.right_action, self.inverse):
            arr.setflags(write=False)

    # -- arithmetic -----------------------------------------------------
    def _encode(self, mats: np.ndarray) -> np.ndarray:
        m = self.modulus
        r = np.asarray(mats, dtype=np.int64) % m
        return r[..., 0, 0] + m * (r[..., 0, 1] + m * (r[..., 1, 0] + m * r[..., 1, 1]))

    def _inverse_mats(self, mats: np.ndarray) -> np.ndarray:
        m = self.modulus
        a, b, c, d = mats[..., 0, 0], mats[..., 0, 1], mats[..., 1, 0], mats[..., 1, 1]
        det = (a * d - b * c) % m
        # determinants of the built-in families are +-1, so det^-1 = det
        adj = np.stack([np.stack([d, -b], -1), np.stack([-c, a], -1)], -2)
        return (det[..., None, None] * adj) % m

    def _bfs(self, max_order: int):
        m = self.modulus
        ident = np.eye(2, dtype=np.int64)[None]
        layers = [ident]
        lengths = [np.zeros(1, dtype=np.int64)]
        seen = self._encode(ident)
        frontier = ident
        d = 0
        total = 1
        while len(frontier) and len(self.generators):
            d += 1
            prods = (frontier[:, None] @ self.generators[None]) % m
            prods = prods.reshape(-1, 2, 2)
            codes = self._encode(prods)
            _, first = np.unique(codes, return_index=True)
            first = np.sort(first)
            new = first[~np.isin(codes[first], seen)]
            frontier = prods[new]
            if not len(frontier):
                break
            total += len(frontier)
            if total > max_order:
                raise NotGeneratedError(
                    f"generators not generated within budget: closure exceeds {max_order} elements mod {m}"
                )
            seen = np.concatenate([seen, codes[new]])
            layers.append(frontier)
            lengths.append(np.full(len(frontier), d, dtype=np.int64))
        return np.concatenate(layers), np.concatenate(lengths)

    def index_of(self, mats) -> np.ndarray:
        return self._lookup(self._encode(_as_matrices(mats) if np.ndim(mats) == 2 else mats))

    def multiply(self, xs, ys) -> np.ndarray:
        """Indices of elements[xs] @ elements[ys] (broadcasting)."""
        xs, ys = np.broadcast_arrays(np.asarray(xs), np.asarray(ys))
        X, Y = self.elements[xs.ravel()], self.elements[ys.ravel()]
        m = self.modulus
        # explicit 2x2 products: much faster than batched matmul on int64
        a = (X[:, 0, 0] * Y[:, 0, 0] + X[:, 0, 1] * Y[:, 1, 0]) % m
        b = (X[:, 0, 0] * Y[:, 0, 1] + X[:, 0, 1] * Y[:, 1, 1]) % m
        c = (X[:, 1, 0] * Y[:, 0, 0] + X[:, 1, 1] * Y[:, 1, 0]) % m
        d = (X[:, 1, 0] * Y[:, 0, 1] + X[:, 1, 1] * Y[:, 1, 1]) % m
        codes = a + m * (b + m * (c + m * d))
        return self._lookup(codes).reshape(xs.shape)

    @cached_property
    def _code_table(self) -> np.ndarray | None:
        size = self.modulus**4
        if size > CODE_TABLE_LIMIT:
            return None
        table = np.full(size, -1, dtype=np.int64)
        table[self._sorted_codes] = self._order
        return table

    def _lookup(self, codes: np.ndarray) -> np.ndarray:
        table = self._code_table
        if table is not None:
            out = table[codes]
            if np.any(out < 0):
                raise KeyError("matrix is not an element of this group")
            return out
        pos = np.searchsorted(self._sorted_codes, codes)
        pos = np.clip(pos, 0, len(self._sorted_codes) - 1)
        if not np.all(self._sorted_codes[pos] == codes):
            raise KeyError("matrix is not an element of this group")
        return self._order[pos]

    # -- metric ---------------------------------------------------------
    @property
    def order(self) -> int:
        return len(self.elements)

    size = order

    @property
    def name(self) -> str:
        return f"{self.family.name}-mod{self.modulus}"

    @cached_property
    def diameter(self) -> int:
        return int(self.word_length.max())

    @cached_property
    def dist(self) -> np.ndarray:
        """Dense word-metric matrix; only for orders up to DENSE_DIST_LIMIT."""
        n = self.order
        if n > DENSE_DIST_LIMIT:
            raise MemoryError(f"dense distance matrix refused for order {n}")
        out = np.empty((n, n), dtype=np.int32)
        for start in range(0, n, 256):
            rows = np.arange(start, min(n, start + 256))
            out[rows] = self.pair_distances(rows[:, None], np.arange(n)[None, :])
        out.setflags(write=False)
        return out

    def pair_distances(self, xs, ys) -> np.ndarray:
        """d(x, y) = |x^-1 y| evaluated elementwise (broadcasting)."""
        xs, ys = np.broadcast_arrays(np.asarray(xs), np.asarray(ys))
        if "dist" in self.__dict__:
            return self.dist[xs, ys]
        return self.word_length[self.multiply(self.inverse[xs], ys)]

    def ball_offsets(self, radius: float) -> np.ndarray:
        """Elements w with |w| <= radius (closed ball about the identity)."""
        return np.nonzero(self.word_length <= radius)[0]

    def ball(self, x: int, radius: float) -> np.ndarray:
        """Closed ball B(x, radius) = x * B(e, radius), sorted."""
        return np.sort(self.multiply(x, self.ball_offsets(radius)))

    @cached_property
    def adjacency(self):
        """Sparse adjacency with multiplicity (x, x*s) for graph generators s."""
        import scipy.sparse as sp

        n, s = self.right_action.shape
        rows = np.repeat(np.arange(n), s)
        cols = self.right_action.ravel()
        return sp.csr_array((np.ones(n * s), (rows, cols)), shape=(n, n))

    @property
    def degree(self) -> int:
        return len(self.generators)

    def __repr__(self) -> str:
        return f"CayleyGraph({self.name}, level={self.level}, order={self.order})"


def cayley_graph(family: GroupFamily | str, modulus: int, level: int = 1) -> CayleyGraph:
    if isinstance(family, str):
        family = get_family(family)
    return CayleyGraph(family, modulus, level)


def build_quotient(chain: QuotientChain, level: int, max_order: int = DEFAULT_MAX_ORDER) -> CayleyGraph:
    """Enumerate G/N_level by BFS closure of the reduced generators."""
    m = chain.modulus(level)
    graph = CayleyGraph(chain.family, m, level, max_order=max_order)
    expected = chain.family.expected_order(m)
    if expected is not None and graph.order != expected:
        raise NotGeneratedError(
            f"generators of {chain.family.name} generate a subgroup of order {graph.order} "
            f"mod {m}, expected {expected}"
        )
    return graph


class CoverMap:
    """The reduction map from a deeper quotient onto a shallower one.

    ``fiber[x]`` is the target index of source vertex x, ``kernel`` lists the
    source indices of the kernel (identity first); kernel element k acts on
    the source by x -> k*x.  ``transversal[u]`` is the least source index in
    the fiber over target vertex u.
    """

    def __init__(self, source: CayleyGraph, target: CayleyGraph):
        if source.family != target.family:
            raise NotNestedError("cover requires both levels from the same family")
        if source.modulus % target.modulus:
            raise NotNestedError(
                f"levels not nested: modulus {target.modulus} does not divide {source.modulus}"
            )
        self.source = source
        self.target = target
        self.fiber = target.index_of(source.elements % target.modulus)
        self.fiber.setflags(write=False)
        counts = np.bincount(self.fiber, minlength=target.order)
        if counts.min() != counts.max() or counts.min() == 0:
            raise InvariantViolation("cover fibers have equal size", f"sizes {counts.min()}..{counts.max()}")
        self.kernel = np.nonzero(self.fiber == 0)[0]
        if self.kernel[0] != 0:
            raise InvariantViolation("identity lies in the kernel")
        order = np.argsort(self.fiber, kind="stable")
        starts = np.searchsorted(self.fiber[order], np.arange(target.order))
        self.transversal = order[starts]
        for arr in (self.kernel, self.transversal):
            arr.setflags(write=False)

    @property
    def is_identity(self) -> bool:
        return self.source.modulus == self.target.modulus

    @property
    def deck_order(self) -> int:
        return len(self.kernel)

    def deck_permutation(self, k: int) -> np.ndarray:
        """Permutation x -> kernel[k] * x of the source vertices."""
        return self.source.multiply(self.kernel[k], np.arange(self.source.order))

    def deck_permutations(self) -> np.ndarray:
        if self.deck_order * self.source.order > 50_000_000:
            raise MemoryError("deck group too large to tabulate")
        return self.source.multiply(self.kernel[:, None], np.arange(self.source.order)[None, :])

    @cached_property
    def _kernel_position(self) -> np.ndarray:
        pos = np.full(self.source.order, -1, dtype=np.int64)
        pos[self.kernel] = np.arange(self.deck_order)
        return pos

    def decompose(self, zs) -> tuple[np.ndarray, np.ndarray]:
        """Write z = kernel[h] * transversal[u]; returns (h, u)."""
        zs = np.asarray(zs)
        u = self.fiber[zs]
        t = self.transversal[u]
        k = self.source.multiply(zs, self.source.inverse[t])
        h = self._kernel_position[k]
        if np.any(h < 0):
            raise InvariantViolation("deck group acts transitively on fibers")
        return h, u

    def kernel_product(self, h1, h2) -> np.ndarray:
        """Kernel position of kernel[h1] * kernel[h2]."""
        return self._kernel_position[self.source.multiply(self.kernel[h1], self.kernel[h2])]

    def kernel_inverse(self, h) -> np.ndarray:
        return self._kernel_position[self.source.inverse[self.kernel[h]]]

    @cached_property
    def radius(self) -> int:
        return metric_cover_radius(self)

    def __repr__(self) -> str:
        return f"CoverMap({self.source.name} -> {self.target.name}, deck={self.deck_order})"


def quotient_cover(chain: QuotientChain, level_j: int, level_i: int) -> CoverMap:
    """Cover G/N_j -> G/N_i for i <= j (reduction of matrix entries mod m_i)."""
    if level_i > level_j:
        raise NotNestedError(f"cover needs level_i <= level_j, got {level_i} > {level_j}")
    src = build_quotient(chain, level_j)
    tgt = build_quotient(chain, level_i)
    return CoverMap(src, tgt)


def _ball_is_isometric(cover: CoverMap, centre: int, eps: int) -> bool:
    src, tgt = cover.source, cover.target
    ball = src.multiply(centre, np.nonzero(src.word_length < eps)[0])
    img = cover.fiber[ball]
    if len(np.unique(img)) != len(img):
        return False
    target_ball = tgt.multiply(cover.fiber[centre], np.nonzero(tgt.word_length < eps)[0])
    if not np.array_equal(np.sort(img), np.sort(target_ball)):
        return False
    d_src = src.pair_distances(ball[:, None], ball[None, :])
    d_tgt = tgt.pair_distances(img[:, None], img[None, :])
    return bool(np.array_equal(d_src, d_tgt))


def metric_cover_radius(cover: CoverMap, exhaustive: bool = False) -> int:
    """Largest integer eps such that every open eps-ball maps isometrically onto its image ball.

    Both word metrics are left-invariant and the reduction map is a
    homomorphism, so the ball about x is the left translate of the ball about
    the identity and one centre decides all of them.  ``exhaustive=True``
    checks every centre anyway.  The identity cover returns diameter + 1.
    """
    if cover.is_identity:
        return cover.source.diameter + 1
    centres = range(cover.source.order) if exhaustive else (0,)
    eps = 1
    while eps <= cover.source.diameter + 1:
        if not all(_ball_is_isometric(cover, x, eps + 1) for x in centres):
            return eps
        eps += 1
    return eps


def deck_orbit(cover: CoverMap, vertex: int) -> list[int]:
    orbit = cover.source.multiply(cover.kernel, vertex)
    return sorted(int(v) for v in orbit)


class FreeGroupBall:
    """Exact ball of radius R in the Cayley graph of the infinite group over Z.

    For the sl2 family this is a ball in the 4-regular tree (the group is
    free); ``is_tree`` confirms the sphere sizes.
    """

    def __init__(self, family: GroupFamily, radius: int):
        gens = family.generators.matrices
        self.family = family
        self.radius = int(radius)
        index: dict[tuple, int] = {(1, 0, 0, 1): 0}
        elems = [np.eye(2, dtype=object)]
        lengths = [0]
        edges: list[tuple[int, int]] = []
        frontier = [0]
        for d in range(1, self.radius + 1):
            nxt = []
            for x in frontier:
                for g in gens:
                    y = elems[x].dot(g.astype(object))
                    key = tuple(int(v) for v in y.ravel())
                    if key not in index:
                        index[key] = len(elems)
                        elems.append(y)
                        lengths.append(d)
                        nxt.append(index[key])
            frontier = nxt
        self._index = index
        self.word_length = np.array(lengths, dtype=np.int64)
        n = len(elems)
        s = len(gens)
        act = np.full((n, s), -1, dtype=np.int64)
        for x in range(n):
            for j, g in enumerate(gens):
                y = elems[x].dot(g.astype(object))
                act[x, j] = index.get(tuple(int(v) for v in y.ravel()), -1)
        self.right_action = act  # -1 marks edges leaving the ball

    @property
    def order(self) -> int:
        return len(self.word_length)

    def sphere_sizes(self) -> np.ndarray:
        return np.bincount(self.word_length, minlength=self.radius + 1)

    def is_tree(self) -> bool:
        k = len(self.family.generators)
        expected = [1] + [k * (k - 1) ** (r - 1) for r in range(1, self.radius + 1)]
        return list(self.sphere_sizes()) == expected
