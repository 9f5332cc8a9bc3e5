"""Finite-propagation block operators on l^p over a metric point set.

A ``BlockOperator`` on a space with n points and block dimension k is an
(n*k) x (n*k) matrix whose (x, y) block is T_{x,y}.  Since
l^p(Z, l^p_k) = l^p(Z x k) isometrically, p-norms are norms of the
underlying scalar matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvariantViolation, ValidationError

EPS = float(np.finfo(float).eps)
# matrices up to this dimension are densified for exact spectral work
SVDS_THRESHOLD = 512  # sparse inputs above this use ARPACK
DENSE_LIMIT = 4096


class BlockOperator:
    """Immutable block matrix indexed by the points of ``space``.

    ``space`` must provide ``size``, ``pair_distances(xs, ys)`` and
    ``ball(x, R)`` (CayleyGraph, BoxSpace and DistanceMatrixSpace do).
    The matrix is kept either as a numpy array or a CSR array.
    """

    __array_priority__ = 100

    def __init__(self, space, matrix, block_dim: int = 1):
        if block_dim < 1:
            raise ValidationError("block_dim must be >= 1")
        n = space.size * block_dim
        if sp.issparse(matrix):
            matrix = sp.csr_array(matrix)
            matrix.sum_duplicates()
            matrix.eliminate_zeros()
        else:
            matrix = np.array(matrix, copy=True)
            matrix.setflags(write=False)
        if matrix.shape != (n, n):
            raise ValidationError(f"matrix shape {matrix.shape} does not match {space.size} points x block {block_dim}")
        self.space = space
        self.block_dim = int(block_dim)
        self.matrix = matrix

    # -- constructors ---------------------------------------------------
    @classmethod
    def identity(cls, space, block_dim: int = 1) -> "BlockOperator":
        return cls(space, sp.identity(space.size * block_dim, format="csr"), block_dim)

    @classmethod
    def zero(cls, space, block_dim: int = 1) -> "BlockOperator":
        n = space.size * block_dim
        return cls(space, sp.csr_array((n, n)), block_dim)

    @classmethod
    def diagonal(cls, space, values) -> "BlockOperator":
        return cls(space, sp.diags_array(np.asarray(values)).tocsr(), 1)

    @classmethod
    def from_blocks(cls, space, blocks: dict, block_dim: int = 1) -> "BlockOperator":
        """Build from {(x, y): k x k array}."""
        k = block_dim
        rows, cols, vals = [], [], []
        for (x, y), blk in blocks.items():
            blk = np.asarray(blk).reshape(k, k)
            r, c = np.nonzero(np.ones((k, k)))
            rows.append(x * k + r)
            cols.append(y * k + c)
            vals.append(blk.ravel())
        n = space.size * k
        if not rows:
            return cls.zero(space, k)
        mat = sp.csr_array((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        return cls(space, mat, k)

    # -- structure ------------------------------------------------------
    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def is_dense(self) -> bool:
        return isinstance(self.matrix, np.ndarray)

    @property
    def dtype(self):
        return self.matrix.dtype

    def to_dense(self) -> np.ndarray:
        return np.asarray(self.matrix) if self.is_dense else self.matrix.toarray()

    def to_sparse(self) -> sp.csr_array:
        return sp.csr_array(self.matrix) if self.is_dense else self.matrix

    def block(self, x: int, y: int) -> np.ndarray:
        k = self.block_dim
        sl_x, sl_y = slice(x * k, (x + 1) * k), slice(y * k, (y + 1) * k)
        if self.is_dense:
            return np.array(self.matrix[sl_x, sl_y])
        return self.matrix[sl_x, sl_y].toarray()

    def point_support(self) -> tuple[np.ndarray, np.ndarray]:
        """Point pairs (x, y) whose block is nonzero."""
        k = self.block_dim
        if self.is_dense:
            n = self.space.size
            mask = self.matrix != 0
            if k > 1:
                mask = mask.reshape(n, k, n, k).any(axis=(1, 3))
            return np.nonzero(mask)
        coo = self.matrix.tocoo()
        keep = coo.data != 0
        r, c = coo.row[keep] // k, coo.col[keep] // k
        if k > 1:
            pairs = np.unique(r * self.space.size + c)
            return pairs // self.space.size, pairs % self.space.size
        return r, c

    def with_matrix(self, matrix) -> "BlockOperator":
        return BlockOperator(self.space, matrix, self.block_dim)

    # -- algebra --------------------------------------------------------
    def _check(self, other: "BlockOperator") -> None:
        if other.space is not self.space or other.block_dim != self.block_dim:
            raise ValidationError("operators live on different spaces or block dimensions")

    def __add__(self, other: "BlockOperator") -> "BlockOperator":
        self._check(other)
        return self.with_matrix(_combine(self.matrix, other.matrix, 1.0))

    def __sub__(self, other: "BlockOperator") -> "BlockOperator":
        self._check(other)
        return self.with_matrix(_combine(self.matrix, other.matrix, -1.0))

    def __neg__(self) -> "BlockOperator":
        return self.with_matrix(-self.matrix)

    def __mul__(self, scalar) -> "BlockOperator":
        return self.with_matrix(self.matrix * scalar)

    __rmul__ = __mul__

    def __matmul__(self, other: "BlockOperator") -> "BlockOperator":
        self._check(other)
        a, b = self.matrix, other.matrix
        if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
            out = np.asarray(a @ b)
        else:
            out = a @ b
        return self.with_matrix(out)

    def adjoint(self) -> "BlockOperator":
        return self.with_matrix(self.matrix.conj().T)

    def power(self, n: int) -> "BlockOperator":
        if n < 0:
            raise ValidationError("negative powers are not supported")
        out = BlockOperator.identity(self.space, self.block_dim)
        base = self
        while n:
            if n & 1:
                out = out @ base
            n >>= 1
            if n:
                base = base @ base
        return out

    def allclose(self, other: "BlockOperator", atol: float = 1e-12) -> bool:
        diff = _combine(self.matrix, other.matrix, -1.0)
        return max_abs(diff) <= atol

    def __repr__(self) -> str:
        kind = "dense" if self.is_dense else f"sparse nnz={self.matrix.nnz}"
        return f"BlockOperator({getattr(self.space, 'name', '?')}, k={self.block_dim}, {kind})"


def _combine(a, b, sign: float):
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        a = a if isinstance(a, np.ndarray) else a.toarray()
        b = b if isinstance(b, np.ndarray) else b.toarray()
        return a + sign * b
    return a + sign * b


def max_abs(matrix) -> float:
    if isinstance(matrix, np.ndarray):
        return float(np.abs(matrix).max()) if matrix.size else 0.0
    return float(abs(matrix).max()) if matrix.nnz else 0.0


def _matrix(T):
    return T.matrix if isinstance(T, BlockOperator) else T


# -- basic operations ----------------------------------------------------

def propagation(T: BlockOperator) -> int:
    """max d(x, y) over nonzero blocks; 0 for diagonal or zero operators."""
    xs, ys = T.point_support()
    if not len(xs):
        return 0
    return int(np.max(T.space.pair_distances(xs, ys)))


def apply(T: BlockOperator, xi) -> np.ndarray:
    """Block matrix-vector product; xi may be flat (n*k,) or blocked (n, k)."""
    xi = np.asarray(xi)
    n, k = T.space.size, T.block_dim
    if xi.shape not in ((n * k,), (n, k)):
        raise ValidationError(f"dimension mismatch: vector of shape {xi.shape} for {n} points x block {k}")
    out = T.matrix @ xi.reshape(n * k)
    return np.asarray(out).reshape(xi.shape)


def trace(T: BlockOperator) -> complex:
    """Sum of the traces of the diagonal blocks."""
    m = T.matrix
    return complex(np.trace(m) if isinstance(m, np.ndarray) else m.diagonal().sum())


def random_operator(space, R: float, rng: np.random.Generator, block_dim: int = 1) -> BlockOperator:
    """Standard normal blocks on every pair with d(x, y) <= R, zero elsewhere."""
    k = block_dim
    if hasattr(space, "ball_offsets"):
        xs = np.arange(space.size)[:, None]
        ys = space.multiply(xs, space.ball_offsets(R)[None, :])
        xs = np.broadcast_to(xs, ys.shape)
    else:
        pairs = [(x, y) for x in range(space.size) for y in space.ball(x, R)]
        xs, ys = (np.array(v) for v in zip(*pairs))
    a, c = np.divmod(np.arange(k * k), k)
    rows = (xs.reshape(-1, 1) * k + a).ravel()
    cols = (ys.reshape(-1, 1) * k + c).ravel()
    vals = rng.standard_normal(len(rows))
    n = space.size * k
    return BlockOperator(space, sp.csr_array((vals, (rows, cols)), shape=(n, n)), k)


def truncate_propagation(T: BlockOperator, S: float, p: float = 2.0, **kw):
    """Keep exactly the blocks with d(x, y) <= S; also return ||T - T'||_p as a NormEstimate."""
    if S < 0:
        raise ValidationError("S must be non-negative")
    k = T.block_dim
    coo = T.to_sparse().tocoo()
    d = T.space.pair_distances(coo.row // k, coo.col // k)
    keep = d <= S
    kept = sp.csr_array((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=T.shape)
    if T.is_dense:
        kept = kept.toarray()
    truncated = T.with_matrix(kept)
    removed = pnorm_estimate(T - truncated, p, **kw)
    return truncated, removed


# -- p-norm estimation -----------------------------------------------------

@dataclass(frozen=True)
class NormEstimate:
    """Enclosure lower <= ||T||_{p->p} <= upper."""

    p: float
    lower: float
    upper: float
    methods: tuple[str, ...] = ()
    iterations: int = 0
    wide: bool = False
    vector: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not (0 <= self.lower <= self.upper):
            raise ValueError(f"inconsistent norm interval [{self.lower}, {self.upper}]")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float, rtol: float = 0.0) -> bool:
        slack = rtol * max(abs(value), 1.0)
        return self.lower - slack <= value <= self.upper + slack


def vector_pnorm(v, p: float, axis=0) -> np.ndarray:
    a = np.abs(np.asarray(v))
    if np.isinf(p):
        return a.max(axis=axis)
    scale = a.max(axis=axis, keepdims=True) if a.size else 1.0
    scale = np.where(scale == 0, 1.0, scale)
    return np.squeeze(scale, axis=axis) * ((a / scale) ** p).sum(axis=axis) ** (1.0 / p)


def _duality_map(V: np.ndarray, p: float) -> np.ndarray:
    """Column-wise norming functionals: <J(v), v> = ||v||_p and ||J(v)||_{p'} = 1."""
    a = np.abs(V)
    nrm = vector_pnorm(V, p)
    nrm = np.where(nrm == 0, 1.0, nrm)
    with np.errstate(invalid="ignore", divide="ignore"):
        phase = np.where(a > 0, V / np.where(a > 0, a, 1.0), 0.0)
    return phase * (a / nrm) ** (p - 1.0)


def one_norm(A) -> float:
    """Max column absolute sum."""
    A = _matrix(A)
    if isinstance(A, np.ndarray):
        return float(np.abs(A).sum(axis=0).max()) if A.size else 0.0
    return float(abs(A).sum(axis=0).max()) if A.nnz else 0.0


def inf_norm(A) -> float:
    """Max row absolute sum."""
    A = _matrix(A)
    if isinstance(A, np.ndarray):
        return float(np.abs(A).sum(axis=1).max()) if A.size else 0.0
    return float(abs(A).sum(axis=1).max()) if A.nnz else 0.0


def two_norm(A) -> tuple[float, float]:
    """Enclosure of the largest singular value."""
    A = _matrix(A)
    n = max(A.shape)
    if max_abs(A) == 0:
        return 0.0, 0.0
    if (isinstance(A, np.ndarray) and min(A.shape) <= DENSE_LIMIT) or min(A.shape) <= SVDS_THRESHOLD:
        D = A if isinstance(A, np.ndarray) else A.toarray()
        if D.shape[0] == D.shape[1] and np.array_equal(D, D.conj().T):
            sigma = float(np.abs(np.linalg.eigvalsh(D)).max())
        else:
            sigma = float(np.linalg.svd(D, compute_uv=False)[0])
        slack = 16 * n * EPS
    else:
        S = sp.csr_array(A)
        u, w, vt = spla.svds(S, k=1, tol=0, random_state=0)
        sigma = float(w[0])
        # a singular value lies within the residual of the computed triple
        resid = max(np.linalg.norm(S @ vt[0] - sigma * u[:, 0]), np.linalg.norm(S.conj().T @ u[:, 0] - sigma * vt[0].conj()))
        slack = 160 * n * EPS + float(resid) / max(sigma, EPS)
    return sigma * (1 - slack), sigma * (1 + slack)


def default_starts(n: int, restarts: int, seed, complex_: bool = False) -> np.ndarray:
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, restarts))
    if complex_:
        X = X + 1j * rng.standard_normal((n, restarts))
    return X


def power_iteration(A, p: float, X: np.ndarray, max_iter: int = 200, tol: float = 1e-10,
                    patience: int = 20):
    """Nonlinear power method for ||A||_{p->p} from the columns of X.

    Returns (best ratio, best vector, iterations, converged).  Every
    evaluated ratio ||A x||_p / ||x||_p is a valid lower bound.  Stops once
    the best value has gained less than ``tol`` (relative) for ``patience``
    consecutive sweeps.
    """
    A = _matrix(A)
    AH = A.conj().T
    q = p / (p - 1.0)
    X = np.array(X, dtype=np.result_type(A.dtype, X.dtype, float))
    nx = vector_pnorm(X, p)
    X = X[:, nx > 0] / nx[nx > 0]
    if not X.shape[1]:
        return 0.0, None, 0, True
    best, best_vec = 0.0, X[:, 0]
    stale = 0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Y = np.asarray(A @ X)
        vals = vector_pnorm(Y, p)
        j = int(np.argmax(vals))
        if vals[j] > best * (1 + tol):
            stale = 0
        else:
            stale += 1
        if vals[j] > best:
            best, best_vec = float(vals[j]), X[:, j].copy()
        if stale >= patience:
            converged = True
            break
        Z = np.asarray(AH @ _duality_map(Y, p))
        live = vector_pnorm(Z, q) > 0
        if not live.any():
            converged = True
            break
        X = _duality_map(Z[:, live], q)
    return best, best_vec, it, converged


def interpolation_upper(A, p: float, two: float | None = None) -> tuple[float, list[str]]:
    """Riesz-Thorin upper bounds for ||A||_p."""
    n1, ninf = one_norm(A), inf_norm(A)
    bounds = [(n1 ** (1 / p) * ninf ** (1 - 1 / p), "rt-1-inf")]
    if two is not None:
        theta = abs(2.0 / p - 1.0)
        end = n1 if p < 2 else ninf
        bounds.append((end**theta * two ** (1 - theta), "rt-2"))
    val = min(b for b, _ in bounds)
    return val, [name for b, name in bounds if b == val]


def pnorm_estimate(T, p: float, budget: int = 200, *, restarts: int = 8, seed=0,
                   starts: np.ndarray | None = None, candidates: Iterable[np.ndarray] = (),
                   rtol: float = 1e-6) -> NormEstimate:
    """Interval enclosure of the p -> p operator norm, 1 < p < infinity.

    p = 2 uses the largest singular value.  Otherwise the lower end is the
    best nonlinear power-iteration value (deterministic starts from ``seed``,
    plus the all-ones vector, the largest column and any ``candidates``), and
    the upper end is the smaller Riesz-Thorin bound.
    """
    if not (1 < p < np.inf):
        raise ValidationError(f"p must lie in (1, inf), got {p}")
    A = _matrix(T)
    n = A.shape[1]
    if max_abs(A) == 0:
        return NormEstimate(p, 0.0, 0.0, ("zero",))
    lo2, hi2 = two_norm(A)
    if p == 2:
        return NormEstimate(p, float(lo2), float(hi2), ("svd",))

    upper, up_methods = interpolation_upper(A, p, hi2)
    cols = [np.zeros(n)]
    if sp.issparse(A):
        colnorms = np.asarray(abs(A).power(p).sum(axis=0)).ravel()
    else:
        colnorms = vector_pnorm(A, p)
    cols[0][int(np.argmax(colnorms))] = 1.0
    extra = [np.ones(n)] + cols + [np.asarray(c).reshape(n) for c in candidates]
    if starts is None:
        starts = default_starts(n, restarts, seed, np.iscomplexobj(A))
    X = np.column_stack([starts] + [e.astype(starts.dtype) for e in extra])
    lower, vec, iters, converged = power_iteration(A, p, X, max_iter=budget)
    if lower > upper * (1 + 1e-9):
        raise InvariantViolation("norm enclosure", f"attained ratio {lower!r} exceeds the upper bound {upper!r}")
    lower = float(min(lower, upper))  # rounding only
    upper = float(upper)
    wide = (not converged) and (upper - lower > rtol * upper)
    return NormEstimate(p, lower, upper, ("power",) + tuple(up_methods), iters, bool(wide), vec)


# -- ghost data -----------------------------------------------------------

@dataclass(frozen=True)
class GhostEntry:
    R: float
    level: int
    lower: float
    upper: float
    centre: int


@dataclass(frozen=True)
class GhostProfile:
    """Per (R, level): sup over unit xi supported in a closed R-ball of ||T xi||_p."""

    p: float
    entries: tuple[GhostEntry, ...]

    def value(self, R: float, level: int) -> GhostEntry:
        for e in self.entries:
            if e.R == R and e.level == level:
                return e
        raise KeyError((R, level))

    def levels(self) -> list[int]:
        return sorted({e.level for e in self.entries})


def _components(space):
    if hasattr(space, "components"):
        return [(lvl, np.arange(space.offsets[lvl - 1], space.offsets[lvl])) for lvl in space.levels]
    return [(getattr(space, "level", 1), np.arange(space.size))]


def ghost_profile(T: BlockOperator, R_list: Sequence[float], p: float = 2.0,
                  centres: Sequence[int] | None = None, **kw) -> GhostProfile:
    """Decay data eps(R, level) = max_x ||T chi_{B(x,R)}||_p over centres x of each component.

    Balls are closed.  Single-column restrictions are exact (column
    p-norms); at p = 2 the restricted norm comes from the Gram matrix;
    otherwise ``pnorm_estimate`` gives an interval.
    """
    if any(R < 0 for R in R_list):
        raise ValidationError("ghost radii must be non-negative")
    A = T.matrix
    k = T.block_dim
    entries = []
    for level, pts in _components(T.space):
        xs = pts if centres is None else np.intersect1d(pts, np.asarray(centres))
        rows = []
        for R in sorted(R_list):
            balls = [T.space.ball(int(x), R) for x in xs]
            cols_pts = np.unique(np.concatenate(balls))
            cols = (cols_pts[:, None] * k + np.arange(k)).ravel()
            sub = A[:, cols]
            sub = np.asarray(sub) if isinstance(sub, np.ndarray) else sub.toarray()
            sub = sub[np.any(sub != 0, axis=1)]
            lows = np.zeros(len(xs))
            highs = np.zeros(len(xs))
            local = [(np.searchsorted(cols_pts, b)[:, None] * k + np.arange(k)).ravel() for b in balls]
            if p == 2 and sub.size:
                gram = sub.conj().T @ sub
                by_size: dict[int, list[int]] = {}
                for i, loc in enumerate(local):
                    by_size.setdefault(len(loc), []).append(i)
                for size, idx in by_size.items():
                    stack = np.stack([gram[np.ix_(local[i], local[i])] for i in idx])
                    top = np.sqrt(np.clip(np.linalg.eigvalsh(stack)[:, -1], 0, None))
                    slack = 16 * max(size, sub.shape[0]) * EPS
                    lows[idx] = top * (1 - slack)
                    highs[idx] = top * (1 + slack)
            elif sub.size:
                for i, loc in enumerate(local):
                    blk = sub[:, loc]
                    if blk.shape[1] == 1:
                        lows[i] = highs[i] = float(vector_pnorm(blk[:, 0], p))
                    else:
                        est = pnorm_estimate(blk, p, **kw)
                        lows[i], highs[i] = est.lower, est.upper
            j = int(np.argmax(lows)) if len(xs) else 0
            rows.append([R, float(lows.max(initial=0.0)), float(highs.max(initial=0.0)), int(xs[j]) if len(xs) else -1])
        # nested balls: lower bounds propagate up in R, upper bounds down
        for a in range(1, len(rows)):
            rows[a][1] = max(rows[a][1], rows[a - 1][1])
        for a in range(len(rows) - 2, -1, -1):
            rows[a][2] = min(rows[a][2], rows[a + 1][2])
        for R, lo, hi, c in rows:
            entries.append(GhostEntry(R, level, lo, max(lo, hi), c))
    return GhostProfile(p, tuple(entries))


# -- serialization --------------------------------------------------------

FORMAT_TAG = "roelab-block-operator"


def save_operator(T: BlockOperator, path: str | Path, p: float | None = None) -> None:
    """Sparse triple format: header, then one line per nonzero block.

    Each block line is ``x y`` followed by the k*k entries in row-major order
    as real/imaginary pairs (Python float repr, which round-trips exactly).
    """
    k = T.block_dim
    xs, ys = T.point_support()
    order = np.lexsort((ys, xs))
    xs, ys = xs[order], ys[order]
    dense = T.is_dense
    lines = [
        f"# {FORMAT_TAG} v1",
        f"space {getattr(T.space, 'name', 'anonymous')}",
        f"points {T.space.size}",
        f"block_dim {k}",
        f"p {'none' if p is None else repr(float(p))}",
        f"blocks {len(xs)}",
    ]
    M = T.matrix if dense else T.matrix.tocsr()
    for x, y in zip(xs, ys):
        blk = M[x * k:(x + 1) * k, y * k:(y + 1) * k]
        blk = np.asarray(blk) if dense else blk.toarray()
        vals = []
        for v in blk.ravel():
            v = complex(v)
            vals.append(repr(v.real))
            vals.append(repr(v.imag))
        lines.append(f"{x} {y} " + " ".join(vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_operator(path: str | Path, space) -> tuple[BlockOperator, float | None]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith(f"# {FORMAT_TAG}"):
        raise ValidationError(f"{path}: not a roelab operator file")
    header = {}
    i = 1
    while i < len(text) and len(header) < 5:
        key, _, value = text[i].partition(" ")
        header[key] = value
        i += 1
    name = getattr(space, "name", "anonymous")
    if header.get("space") != name or int(header.get("points", -1)) != space.size:
        raise ValidationError(f"{path}: operator belongs to space {header.get('space')!r}, not {name!r}")
    k = int(header["block_dim"])
    p = None if header["p"] == "none" else float(header["p"])
    rows, cols, vals = [], [], []
    for line in text[i:]:
        parts = line.split()
        if not parts:
            continue
        x, y = int(parts[0]), int(parts[1])
        nums = [float(t) for t in parts[2:]]
        if len(nums) != 2 * k * k:
            raise ValidationError(f"{path}: block ({x}, {y}) has {len(nums)} numbers, expected {2 * k * k}")
        entries = np.array(nums[0::2]) + 1j * np.array(nums[1::2])
        r, c = np.divmod(np.arange(k * k), k)
        rows.append(x * k + r)
        cols.append(y * k + c)
        vals.append(entries)
    if len(rows) != int(header["blocks"]):
        raise ValidationError(f"{path}: block count mismatch")
    n = space.size * k
    if rows:
        data = np.concatenate(vals)
        if not np.any(data.imag):
            data = data.real
        mat = sp.csr_array((data, (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    else:
        mat = sp.csr_array((n, n))
    return BlockOperator(space, mat, k), p
