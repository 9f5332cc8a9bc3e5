"""Lifting finite-propagation operators along covers, and what survives the lift.

A cover pi: G/N_j -> G/N_i is a homomorphism, so deck transformations are
left multiplications by kernel elements and commute with everything built
from right convolutions.  ``lift_operator`` copies T_{pi x, pi y} onto
pairs with d(x, y) <= S; ``psi_D`` unfolds an equivariant operator into
group-algebra coefficients over a transversal.  The infinite group is
reached through exact ball truncations (``RadialTree`` for free groups).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coarse_space import BoxSpace
from .errors import CoverTooShallowError, NotEquivariantError, SizeBudgetError, ValidationError
from .expander import ProbabilityMeasure, ghost_projection, kazhdan_table
from .groups import CoverMap, FreeGroupBall, GroupFamily
from .operators import (DENSE_LIMIT, EPS, BlockOperator, NormEstimate, default_starts, ghost_profile, max_abs,
                        pnorm_estimate, propagation, vector_pnorm)

SCHEMA_NAME = "roelab.obstruction"
SCHEMA_VERSION = "1.0"
EXPLICIT_BALL_LIMIT = 200_000


def required_cover_radius(S: int) -> int:
    """Smallest metric-cover radius accepted for lifting at propagation S.

    Closed S-balls must map isometrically (open radius S + 1) for the lift
    to intertwine the cover; 2S keeps products of two lifts inside the
    isometric regime.
    """
    return max(2 * int(S), int(S) + 1)


def _block_perm(perm: np.ndarray, k: int) -> np.ndarray:
    return (perm[:, None] * k + np.arange(k)).ravel()


# -- equivariance -----------------------------------------------------------

def _orbit_structure(cover: CoverMap, k: int, rows: np.ndarray, cols: np.ndarray):
    """For stored entries (x, y) with x = g t_u: the position of the representative
    (t_u, g^-1 y) among the entries, and the first entry of an incomplete orbit (or -1).

    Entries must be in CSR order.  Results are cached per sparsity pattern.
    """
    key = (k, rows.tobytes(), cols.tobytes())
    cache = cover.__dict__.setdefault("_orbit_cache", {})
    if key in cache:
        return cache[key]
    src = cover.source
    N = src.order * k
    keys = rows * N + cols  # already sorted in CSR order
    h, u = cover.decompose(rows // k)
    g_inv = src.inverse[cover.kernel[h]]
    rep_row = np.asarray(cover.transversal)[u] * k + rows % k
    rep_col = src.multiply(g_inv, cols // k) * k + cols % k
    rep = rep_row * N + rep_col
    pos = np.clip(np.searchsorted(keys, rep), 0, len(keys) - 1)
    pos[keys[pos] != rep] = -1
    _, first, counts = np.unique(rep, return_index=True, return_counts=True)
    short = np.nonzero(counts != cover.deck_order)[0]
    result = (pos, g_inv, int(first[short[0]]) if len(short) else -1)
    if len(cache) >= 8:
        cache.pop(next(iter(cache)))
    cache[key] = result
    return result


def check_equivariance(op: BlockOperator, cover: CoverMap, atol: float = 0.0) -> None:
    """Raise NotEquivariantError unless |T_{gx, gy} - T_{x, y}| <= atol for every deck g.

    The default is exact equality, which lifts satisfy by construction;
    products of equivariant operators need an ``atol`` of a few ulps.

    Each stored entry (x, y) with x = g t_u is compared with its orbit
    representative (t_u, g^-1 y), and every orbit of stored entries must be
    complete.  The deck group acts freely, so this is equivalent to checking
    all deck elements one by one.
    """
    if op.space.size != cover.source.order:
        raise ValidationError("operator does not live on the cover source")
    src, k = cover.source, op.block_dim
    A = op.to_sparse()
    A.sort_indices()
    if not A.nnz:
        return
    rows = np.repeat(np.arange(A.shape[0], dtype=np.int64), np.diff(A.indptr))
    cols = A.indices.astype(np.int64)
    data = A.data
    pos, g_inv, incomplete = _orbit_structure(cover, k, rows, cols)
    ok = (pos >= 0) & (np.abs(data[np.maximum(pos, 0)] - data) <= atol)
    if not ok.all():
        i = int(np.argmin(ok))
        raise NotEquivariantError(int(g_inv[i]), int(rows[i] // k), int(cols[i] // k))
    if incomplete >= 0:
        i = incomplete
        N = A.shape[0]
        keys = rows * N + cols
        x, y = int(rows[i] // k), int(cols[i] // k)
        for g in cover.kernel[1:]:
            moved = (int(src.multiply(g, x)) * k + rows[i] % k) * N + int(src.multiply(g, y)) * k + cols[i] % k
            j = min(int(np.searchsorted(keys, moved)), len(keys) - 1)
            if keys[j] != moved:
                raise NotEquivariantError(int(g), x, y)


class EquivariantOperator:
    """A block operator on a cover source commuting with every deck transformation."""

    def __init__(self, op: BlockOperator, cover: CoverMap, check: bool = True, atol: float = 0.0):
        if op.space.size != cover.source.order:
            raise ValidationError("operator does not live on the cover source")
        if check:
            check_equivariance(op, cover, atol)
        self.op = op
        self.cover = cover

    @property
    def matrix(self):
        return self.op.matrix

    @property
    def block_dim(self) -> int:
        return self.op.block_dim

    def __repr__(self) -> str:
        return f"EquivariantOperator({self.cover!r}, block_dim={self.block_dim}, nnz={self.op.to_sparse().nnz})"


# -- lifting ----------------------------------------------------------------

def _same_space(a, b) -> bool:
    return a is b or (getattr(a, "name", None) == getattr(b, "name", None) and a.size == b.size)


def _lift_pattern(cover: CoverMap, S: int) -> tuple[np.ndarray, np.ndarray]:
    """Source pairs (x, y) with d(x, y) <= S in CSR order (row-major, sorted), cached on the cover."""
    cache = cover.__dict__.setdefault("_lift_patterns", {})
    if S not in cache:
        src = cover.source
        xs = np.arange(src.order)[:, None]
        ys = np.sort(src.multiply(xs, src.ball_offsets(S)[None, :]), axis=1)
        cache[S] = (np.broadcast_to(xs, ys.shape).ravel(), ys.ravel())
    return cache[S]


def lift_operator(T: BlockOperator, cover: CoverMap, S: int) -> EquivariantOperator:
    """T~_{x,y} = T_{pi x, pi y} when d(x, y) <= S, else 0."""
    if not _same_space(T.space, cover.target):
        raise ValidationError("operator does not live on the cover target")
    S = int(S)
    if S < 0:
        raise ValidationError("S must be non-negative")
    prop = propagation(T)
    if prop > S:
        raise ValidationError(f"propagation {prop} of the operator exceeds S = {S}")
    need = required_cover_radius(S)
    if cover.radius < need:
        raise CoverTooShallowError(
            f"cover too shallow for propagation S = {S}: metric cover radius {cover.radius} < {need}"
        )
    src, k = cover.source, T.block_dim
    n = src.order
    xs, ys = _lift_pattern(cover, S)
    u, v = cover.fiber[xs], cover.fiber[ys]
    M = T.matrix
    if not T.is_dense:
        M = M.toarray() if M.shape[0] <= 2 * DENSE_LIMIT else M.tocsr()
    if k == 1:
        vals = np.asarray(M[u, v]).ravel()
        width = len(xs) // n
        mat = sp.csr_array((vals, ys.copy(), np.arange(0, len(xs) + 1, width)), shape=(n, n))
    else:
        a, c = np.divmod(np.arange(k * k), k)
        rows = (xs[:, None] * k + a).ravel()
        cols = (ys[:, None] * k + c).ravel()
        vals = np.asarray(M[(u[:, None] * k + a).ravel(), (v[:, None] * k + c).ravel()]).ravel()
        mat = sp.csr_array((vals, (rows, cols)), shape=(n * k, n * k))
    return EquivariantOperator(BlockOperator(src, mat, k), cover, check=False)


def lift_multiplicativity_check(A: BlockOperator, B: BlockOperator, cover: CoverMap, S: int,
                                atol: float = 1e-12) -> bool:
    """True iff lift(A B) equals lift(A) lift(B) entrywise within ``atol``."""
    pa, pb = propagation(A), propagation(B)
    if pa + pb > S:
        raise ValidationError(f"propagations {pa} + {pb} exceed S = {S}")
    lab = lift_operator(A @ B, cover, S).op.to_sparse()
    prod = lift_operator(A, cover, S).op.to_sparse() @ lift_operator(B, cover, S).op.to_sparse()
    return max_abs(sp.csr_array(lab - prod)) <= atol


def check_intertwining(T: BlockOperator, lifted: EquivariantOperator, seed=0) -> float:
    """Largest deviation in T~ pi^* = pi^* T and pi_* T~ = T pi_* on random vectors."""
    cover = lifted.cover
    k = T.block_dim
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((cover.target.order, k))
    pulled = xi[cover.fiber]
    lhs = (lifted.matrix @ pulled.ravel()).reshape(-1, k)
    rhs = (T.matrix @ xi.ravel()).reshape(-1, k)[cover.fiber]
    err = float(np.abs(lhs - rhs).max())
    eta = rng.standard_normal((cover.source.order, k))
    image = (lifted.matrix @ eta.ravel()).reshape(-1, k)
    pushed = np.zeros((cover.target.order, k))
    np.add.at(pushed, cover.fiber, image)
    base = np.zeros((cover.target.order, k))
    np.add.at(base, cover.fiber, eta)
    ref = (T.matrix @ base.ravel()).reshape(-1, k)
    return max(err, float(np.abs(pushed - ref).max()))


def lift_norm_bound(T: BlockOperator, cover: CoverMap, S: int) -> float:
    """c_S * max |T entries| with c_S = |B(e, S)|^2 in the cover source."""
    ball = int(np.count_nonzero(cover.source.word_length <= S))
    return ball**2 * max_abs(T.matrix)


def tau(T: EquivariantOperator) -> complex:
    """Trace of the identity coefficient of psi_D(T): sum of T_{t,t} over the transversal."""
    k = T.block_dim
    idx = _block_perm(np.asarray(T.cover.transversal), k)
    M = T.matrix
    diag = M.diagonal() if sp.issparse(M) else np.diag(M)
    return complex(diag[idx].sum())


# -- untwisting -------------------------------------------------------------

@dataclass
class UntwistedOperator:
    """Coefficients T^(h) (kernel position h) of an equivariant operator, each a
    k-block matrix over the transversal: T^(h)_{u,v} = T_{t_u, g_h t_v}."""

    cover: CoverMap
    block_dim: int
    components: dict[int, sp.csr_array] = field(default_factory=dict)

    @property
    def support(self) -> list[int]:
        return sorted(self.components)

    def component(self, h: int) -> np.ndarray:
        m = self.cover.target.order * self.block_dim
        c = self.components.get(h)
        return np.zeros((m, m)) if c is None else c.toarray()


def psi_D(T, cover: CoverMap | None = None) -> UntwistedOperator:
    if isinstance(T, BlockOperator):
        if cover is None:
            raise ValidationError("psi_D of a plain operator needs the cover")
        T = EquivariantOperator(T, cover)
    cover, k = T.cover, T.block_dim
    m = cover.target.order
    A = T.op.to_sparse().tocoo()
    rp, cp = A.row // k, A.col // k
    keep = cover.transversal[cover.fiber[rp]] == rp
    rows, cols, data = A.row[keep], A.col[keep], A.data[keep]
    u = cover.fiber[rows // k]
    h, v = cover.decompose(cols // k)
    out = UntwistedOperator(cover, k)
    for g in np.unique(h):
        sel = h == g
        r = u[sel] * k + rows[sel] % k
        c = v[sel] * k + cols[sel] % k
        out.components[int(g)] = sp.csr_array((data[sel], (r, c)), shape=(m * k, m * k))
    return out


def _transversal_table(cover: CoverMap) -> np.ndarray:
    """table[a, u] = kernel[a] * t_u: the source point with coordinates (a, u)."""
    return cover.source.multiply(cover.kernel[:, None], np.asarray(cover.transversal)[None, :])


def untwist_permutation(cover: CoverMap, block_dim: int = 1) -> np.ndarray:
    """perm[(a, u) block index] = source block index; T[perm][:, perm] is the assembled operator."""
    return _block_perm(_transversal_table(cover).ravel(), block_dim)


def psi_D_inverse(U: UntwistedOperator) -> EquivariantOperator:
    """Rebuild T from its coefficients: T_{g_a t_u, g_a g_h t_v} = T^(h)_{u,v}."""
    cover, k = U.cover, U.block_dim
    table = _transversal_table(cover)
    D = cover.deck_order
    n = cover.source.order
    rows, cols, vals = [], [], []
    a = np.arange(D)[:, None]
    for h, M in U.components.items():
        coo = M.tocoo()
        uu, vv = coo.row // k, coo.col // k
        b = cover.kernel_product(np.arange(D), np.full(D, h))  # position of g_a g_h
        rows.append((table[a, uu[None, :]] * k + coo.row % k).ravel())
        cols.append((table[b[:, None], vv[None, :]] * k + coo.col % k).ravel())
        vals.append(np.broadcast_to(coo.data, (D, len(coo.data))).ravel())
    if rows:
        mat = sp.csr_array((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * k, n * k))
    else:
        mat = sp.csr_array((n * k, n * k))
    return EquivariantOperator(BlockOperator(cover.source, mat, k), cover, check=False)


def psi_convolve(A: UntwistedOperator, B: UntwistedOperator) -> UntwistedOperator:
    """Group-algebra product: (A B)^(g) = sum over h of A^(h) B^(h^-1 g)."""
    if A.cover is not B.cover or A.block_dim != B.block_dim:
        raise ValidationError("untwisted operators over different covers")
    out = UntwistedOperator(A.cover, A.block_dim)
    for h1, M1 in A.components.items():
        for h2, M2 in B.components.items():
            g = int(A.cover.kernel_product(h1, h2))
            prod = sp.csr_array(M1 @ M2)
            out.components[g] = prod if g not in out.components else sp.csr_array(out.components[g] + prod)
    for g in [g for g, M in out.components.items() if M.count_nonzero() == 0]:
        del out.components[g]
    return out


def assembled_operator(U: UntwistedOperator) -> sp.csr_array:
    """sum_g lambda_g (x) T^(g) on l^p(deck x transversal): entry ((a,u),(b,v)) = T^(a^-1 b)_{u,v}."""
    cover, k = U.cover, U.block_dim
    D, m = cover.deck_order, cover.target.order * k
    rows, cols, vals = [], [], []
    a = np.arange(D)
    for h, M in U.components.items():
        coo = M.tocoo()
        b = cover.kernel_product(a, np.full(D, h))
        rows.append((a[:, None] * m + coo.row[None, :]).ravel())
        cols.append((b[:, None] * m + coo.col[None, :]).ravel())
        vals.append(np.broadcast_to(coo.data, (D, len(coo.data))).ravel())
    size = D * m
    if not rows:
        return sp.csr_array((size, size))
    return sp.csr_array((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size))


def psi_norm_pair(T: EquivariantOperator, p: float, seed=0, **kw) -> tuple[NormEstimate, NormEstimate]:
    """p-norm enclosures of T and of its assembled untwisting, from matching start vectors."""
    perm = untwist_permutation(T.cover, T.block_dim)
    n = len(perm)
    starts = default_starts(n, kw.pop("restarts", 8), seed)
    est_T = pnorm_estimate(T.matrix, p, starts=starts, **kw)
    est_U = pnorm_estimate(assembled_operator(psi_D(T)), p, starts=starts[perm], **kw)
    return est_T, est_U


# -- p-operator norm localization ---------------------------------------------

@dataclass(frozen=True)
class LocalizedVector:
    vector: np.ndarray = field(repr=False)
    support: np.ndarray = field(repr=False)
    diameter: int
    ratio: float
    centre: int
    radius: int
    achieved: float
    norm: NormEstimate
    min_diameter: int | None


@dataclass(frozen=True)
class NotFound:
    best_ratio: float
    centre: int
    radius: int
    norm: NormEstimate
    min_diameter: int | None = None


def _ball_diameter(space, ball: np.ndarray) -> int:
    if len(ball) < 2:
        return 0
    return int(space.pair_distances(ball[:, None], ball[None, :]).max())


def _gram_norm(G, gram: np.ndarray) -> NormEstimate:
    """sqrt of the top eigenvalue of the Gram matrix, as an enclosure of ||T||_2."""
    n = len(gram)
    slack = 16 * n * EPS
    if n <= 512:
        top = float(np.linalg.eigvalsh(gram)[-1])
    else:
        Gs = sp.csr_array(G)
        w, V = spla.eigsh(Gs, k=1, which="LA", tol=0)
        top, v = float(w[0]), V[:, 0]
        # some eigenvalue lies within the residual of the Ritz value
        slack = max(slack, float(np.linalg.norm(Gs @ v - top * v)) / max(top, EPS))
    sigma = float(np.sqrt(max(top, 0.0)))
    return NormEstimate(2.0, sigma * (1 - slack), sigma * (1 + slack), ("gram",))


def _balls(space, centres: np.ndarray, R: float) -> list[np.ndarray]:
    if hasattr(space, "ball_offsets"):
        return list(np.sort(space.multiply(np.asarray(centres)[:, None], space.ball_offsets(R)[None, :]), axis=1))
    return [space.ball(int(x), R) for x in centres]


def onl_search(T: BlockOperator, r: float, f_r: float, c: float = 0.5, mode: str = "exhaustive",
               p: float = 2.0, seed=0, greedy_centres: int = 8, norm: NormEstimate | None = None):
    """Look for xi supported in a ball of diameter <= f_r with ||T xi|| >= c ||T|| ||xi||.

    Balls are closed balls B(x, R) with 2R <= f_r.  ``exhaustive`` scans
    every centre and every such radius; at p = 2 restricted norms are exact
    (largest eigenvalue of a principal block of T*T), otherwise they are
    power-iteration lower bounds.  ``greedy`` only tries the centres with the
    largest columns at the largest radius.  The ratio is taken against the
    upper end of the global norm enclosure; ties go to the least centre, then
    the least radius.
    """
    if not 0 < c < 1:
        raise ValidationError("c must lie in (0, 1)")
    if f_r < 0:
        raise ValidationError("f_r must be non-negative")
    if mode not in ("exhaustive", "greedy"):
        raise ValidationError(f"unknown search mode {mode!r}")
    prop = propagation(T)
    if prop > r:
        raise ValidationError(f"propagation {prop} exceeds r = {r}")
    space, k = T.space, T.block_dim
    A = T.matrix
    n = space.size
    R_max = int(np.floor(f_r / 2))
    gram = None
    if p == 2:
        G = A.conj().T @ A
        gram = G.toarray() if sp.issparse(G) else np.asarray(G)
        if norm is None:
            norm = _gram_norm(G, gram)
    elif norm is None:
        norm = pnorm_estimate(T, p, seed=seed)
    if norm.upper == 0:
        xi = np.zeros(n * k)
        xi[0] = 1.0
        return LocalizedVector(xi, np.array([0]), 0, 1.0, 0, 0, 0.0, norm, 0)

    if mode == "exhaustive":
        radii, centres = range(R_max + 1), np.arange(n)
    else:
        cols = vector_pnorm(A.toarray() if sp.issparse(A) else A, p).reshape(n, k).max(axis=1)
        centres = np.sort(np.argsort(-cols, kind="stable")[:greedy_centres])
        radii = [R_max]
    Ad = A.toarray() if sp.issparse(A) else np.asarray(A)

    best = (-1.0, 0, 0)  # ratio, centre, radius
    min_diam: int | None = None
    diam_cache: dict = {}
    for R in radii:
        balls = _balls(space, centres, R)
        ratios = np.zeros(len(centres))
        if p == 2:
            by_size: dict[int, list[int]] = {}
            for i, b in enumerate(balls):
                by_size.setdefault(len(b), []).append(i)
            for size, idx in by_size.items():
                blk = np.stack([_block_perm(balls[i], k) for i in idx])
                stack = gram[blk[:, :, None], blk[:, None, :]]
                top = np.linalg.eigvalsh(stack)[:, -1]
                ratios[idx] = np.sqrt(np.clip(top, 0, None)) / norm.upper
        else:
            for i, b in enumerate(balls):
                sub = Ad[:, _block_perm(b, k)]
                sub = sub[np.any(sub != 0, axis=1)]
                if sub.size:
                    if sub.shape[1] == 1:
                        ratios[i] = float(vector_pnorm(sub[:, 0], p)) / norm.upper
                    else:
                        ratios[i] = pnorm_estimate(sub, p, seed=(seed, int(centres[i]), R)).lower / norm.upper
        for i in np.nonzero(ratios >= c)[0]:
            key = (int(centres[i]), R) if not hasattr(space, "word_length") else R
            if key not in diam_cache:
                diam_cache[key] = _ball_diameter(space, balls[i])
            d = diam_cache[key]
            min_diam = d if min_diam is None else min(min_diam, d)
        i = int(np.argmax(ratios))
        if ratios[i] > best[0]:
            best = (float(ratios[i]), int(centres[i]), R)

    ratio, x, R = best
    if ratio < c:
        return NotFound(ratio, x, R, norm, min_diam)
    ball = space.ball(x, R)
    cols = _block_perm(ball, k)
    sub = Ad[:, cols]
    xi = np.zeros(n * k, dtype=np.result_type(sub.dtype, float))
    if p == 2:
        w, V = np.linalg.eigh(gram[np.ix_(cols, cols)])
        xi[cols] = V[:, -1]
    else:
        est = pnorm_estimate(sub, p, seed=(seed, x, R))
        xi[cols] = est.vector if est.vector is not None else 1.0
    achieved = float(vector_pnorm(Ad @ xi, p) / vector_pnorm(xi, p))
    return LocalizedVector(xi, ball, _ball_diameter(space, ball), ratio, x, R, achieved, norm, min_diam)


# -- the infinite group through ball truncations -------------------------------

class RadialTree:
    """A nearest-neighbour walk on the d-regular tree, restricted to radial functions.

    Radial functions on the ball of radius L are determined by their values
    on the L + 1 spheres; the walk with identity weight ``a`` and weight
    ``w`` per generator preserves them.  ``matrix(p)`` is the reduced
    operator in coordinates that make the reduction an isometry of l^p.
    """

    def __init__(self, degree: int, radius: int, identity_weight: float, step_weight: float):
        if degree < 2:
            raise ValidationError("tree degree must be >= 2")
        self.degree, self.radius = int(degree), int(radius)
        self.a, self.w = float(identity_weight), float(step_weight)

    def sphere_sizes(self) -> np.ndarray:
        d = self.degree
        return np.array([1] + [d * (d - 1) ** (j - 1) for j in range(1, self.radius + 1)], dtype=object)

    def matrix(self, p: float = 2.0) -> np.ndarray:
        d, L = self.degree, self.radius
        M = np.diag(np.full(L + 1, self.a))
        for j in range(L):
            grow = d if j == 0 else d - 1  # |S_{j+1}| / |S_j|
            # (mu f)_j gets (outward count) * w * f_{j+1}; f_{j+1} carries |S_{j+1}|^{1/p}
            M[j, j + 1] = grow * self.w * grow ** (-1.0 / p)
            M[j + 1, j] = self.w * grow ** (1.0 / p)
        return M

    def power(self, n: int, p: float = 2.0) -> np.ndarray:
        return np.linalg.matrix_power(self.matrix(p), int(n))

    def return_growth(self, n: int) -> float:
        """||mu^n delta_e||_2^(1/n)."""
        v = self.power(n, 2.0)[:, 0]
        return float(np.linalg.norm(v) ** (1.0 / n))


def kesten_norm(degree: int, identity_weight: float = 0.0) -> float:
    """l^2 norm of the walk a*I + (1-a)*SRW on the d-regular tree."""
    return identity_weight + (1 - identity_weight) * 2 * np.sqrt(degree - 1) / degree


@dataclass(frozen=True)
class LiftedNorm:
    n: int
    lower: float
    upper: float
    core_radius: int
    method: str


def _family_of(source) -> GroupFamily:
    if isinstance(source, GroupFamily):
        return source
    if isinstance(source, BoxSpace):
        return source.components[0].family
    return source.family


def lifted_norm_sequence(source, mu: ProbabilityMeasure, n_list: Iterable[int], p: float,
                         ball_radius: int) -> list[LiftedNorm]:
    """Enclosures of ||mu^n|| on l^p of the infinite group, from exact ball truncations.

    Vectors supported in B(e, ball_radius - n) stay inside the truncation for
    n steps, so their ratios ||mu^n xi|| / ||xi|| are exact lower bounds for
    the infinite operator.  Free families with an isotropic measure use the
    radial reduction; anything else walks an explicit ball.
    """
    family = _family_of(source)
    n_list = [int(n) for n in n_list]
    if any(n < 0 for n in n_list):
        raise ValidationError("n must be non-negative")
    if not 1 < p < np.inf:
        raise ValidationError("p must lie in (1, inf)")
    if n_list and max(n_list) > ball_radius:
        raise ValidationError(
            f"ball radius {ball_radius} too small for n = {max(n_list)}: "
            "localized vectors would leave the truncation"
        )
    if mu.generators != family.generators:
        raise ValidationError("measure and family use different generating sets")
    deg = len(family.generators)
    tree = FreeGroupBall(family, min(3, ball_radius)).is_tree()
    out = []
    if tree and mu.is_isotropic:
        rt = RadialTree(deg, ball_radius, mu.identity_weight, mu.weights[0])
        M = rt.matrix(p)
        kest = kesten_norm(deg, mu.identity_weight) if p == 2 else 1.0
        P = np.eye(ball_radius + 1)
        step = 0
        for n in sorted(set(n_list)):
            while step < n:
                P = M @ P
                step += 1
            core = ball_radius - n
            sub = P[:, :core + 1]
            est = pnorm_estimate(sub, p, seed=n) if n else NormEstimate(p, 1.0, 1.0, ("identity",))
            lo = min(est.lower, 1.0)
            out.append(LiftedNorm(n, float(lo), float(max(lo, min(1.0, kest**n * (1 + 64 * EPS)))), core, "radial"))
    else:
        out = _explicit_lifted_norms(family, mu, n_list, p, ball_radius)
    by_n = {r.n: r for r in out}
    return [by_n[n] for n in n_list]


def _explicit_lifted_norms(family, mu, n_list, p, ball_radius):
    deg = len(family.generators)
    if FreeGroupBall(family, min(3, ball_radius)).is_tree():
        size = 1 + sum(deg * (deg - 1) ** (j - 1) for j in range(1, ball_radius + 1))
        if size > EXPLICIT_BALL_LIMIT:
            raise SizeBudgetError(
                f"explicit ball of radius {ball_radius} has {size} points; non-isotropic measures "
                f"on free families are limited to {EXPLICIT_BALL_LIMIT}"
            )
    ball = FreeGroupBall(family, ball_radius)
    N = ball.order
    rows, cols, vals = [np.arange(N)], [np.arange(N)], [np.full(N, mu.identity_weight)]
    for j, w in enumerate(mu.weights):
        ok = ball.right_action[:, j] >= 0
        rows.append(np.nonzero(ok)[0])
        cols.append(ball.right_action[ok, j])
        vals.append(np.full(int(ok.sum()), w))
    # (mu f)(x) = sum_s mu(s) f(x s); truncated rows only matter outside the core
    M = sp.csr_array((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
    out = []
    for n in sorted(set(n_list)):
        core = np.nonzero(ball.word_length <= ball_radius - n)[0]
        P = sp.csr_array(sp.identity(N, format="csr")[:, core])
        for _ in range(n):
            P = sp.csr_array(M @ P)
        est = pnorm_estimate(P, p, seed=n) if n else NormEstimate(p, 1.0, 1.0, ("identity",))
        lo = min(est.lower, 1.0)
        out.append(LiftedNorm(n, lo, 1.0, ball_radius - n, "explicit"))
    return out


# -- the obstruction report ---------------------------------------------------

def obstruction_data(box: BoxSpace, mu: ProbabilityMeasure, n: int, p: float, ball_radius: int,
                     seed: int = 0, internal_rank: int = 1, n_values: Sequence[int] | None = None,
                     c: float = 0.5, decay_target: float = 0.5) -> dict:
    """Per-level traces, ghost values, approximation errors and lifted norms, as a JSON-ready dict."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    n_values = sorted(set(int(v) for v in (n_values or range(1, n + 1))))
    Q = ghost_projection(box, internal_rank)
    traces = []
    diag = Q.matrix.diagonal()
    k = Q.block_dim
    for level in box.levels:
        sl = box.component_slice(level)
        traces.append(math.fsum(diag[sl.start * k:sl.stop * k]))
    ghost = ghost_profile(Q, [0], p)
    ghost_values = [ghost.value(0, level).lower for level in box.levels]
    rows = kazhdan_table(box, mu, n_values, [p], seed=seed)
    lower = [[r.lower for r in rows if r.n == m] for m in n_values]
    upper = [[r.upper for r in rows if r.n == m] for m in n_values]
    lifts = lifted_norm_sequence(box, mu, n_values, p, ball_radius)
    lift_lo = [r.lower for r in lifts]
    lift_hi = [r.upper for r in lifts]

    eps = [max(u) for u in upper]
    uniform = all(b <= a for a, b in zip(eps, eps[1:])) and eps[-1] <= decay_target
    lift_monotone = all(b < a for a, b in zip(lift_lo, lift_lo[1:]))
    factor = lift_lo[0] / lift_lo[-1] if lift_lo[-1] > 0 else None
    ghostlift = [lo <= 2 * e / c + e for lo, e in zip(lift_lo, eps)]
    traces_ok = all(abs(t - internal_rank) <= 1e-12 for t in traces)
    trace_text = f"traces constant at {internal_rank}" if traces_ok else "traces NOT constant"
    factor_text = f"{factor:.4g}" if factor is not None else "infinity"
    summary = (f"{trace_text}; lifted norms decayed by factor {factor_text} "
               f"over n range {n_values[0]}..{n_values[-1]}")
    return {
        "schema": SCHEMA_NAME,
        "schema_version": SCHEMA_VERSION,
        "space": box.name,
        "family": box.components[0].family.name,
        "moduli": [g.modulus for g in box.components],
        "levels": list(box.levels),
        "orders": [g.order for g in box.components],
        "trace_vector": traces,
        "ghost_values": ghost_values,
        "approx_error": {"n": n_values, "lower": lower, "upper": upper,
                         "rho": [r.rho for r in rows if r.n == n_values[0]]},
        "lift_norm": {"n": n_values, "lower": lift_lo, "upper": lift_hi},
        "checks": {
            "traces_constant": traces_ok,
            "approx_error_decays_uniformly": bool(uniform),
            "lift_norm_decreasing": bool(lift_monotone),
            "lift_decay_factor": factor,
            "ghostlift_bound": {"c": c, "holds": ghostlift, "all": all(ghostlift)},
        },
        "parameters": {"p": float(p), "n": int(n), "ball_radius": int(ball_radius), "seed": int(seed),
                       "internal_rank": int(internal_rank), "identity_weight": float(mu.identity_weight),
                       "decay_target": float(decay_target)},
        "summary": summary,
    }
