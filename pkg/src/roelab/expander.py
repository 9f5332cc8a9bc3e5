"""Markov operators, spectral gaps, Cheeger constants and averaging projections."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coarse_space import BoxSpace
from .errors import InvariantViolation, SizeBudgetError, ValidationError
from .groups import CayleyGraph, GeneratingSet
from .operators import EPS, BlockOperator, pnorm_estimate, two_norm

CHEEGER_EXACT_LIMIT = 20


@dataclass(frozen=True)
class ProbabilityMeasure:
    """Finitely supported symmetric probability measure on S u {e}.

    ``weights[i]`` is the mass of the i-th element of ``generators``.
    """

    generators: GeneratingSet
    weights: tuple[float, ...]
    identity_weight: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(w) != len(self.generators):
            raise ValidationError("measure needs one weight per generator")
        if np.any(w < 0) or self.identity_weight < 0:
            raise ValidationError("measure weights must be non-negative")
        if abs(w.sum() + self.identity_weight - 1.0) > 1e-12:
            raise ValidationError(f"measure has total mass {w.sum() + self.identity_weight}, expected 1")
        if not np.all(w == w[list(self.generators.inverse_of)]):
            raise ValidationError("measure is not symmetric: mu(g) != mu(g^-1)")
        if not np.any(w > 0):
            raise ValidationError("measure support must contain generators")

    @classmethod
    def lazy(cls, generators: GeneratingSet, laziness: float = 0.5) -> "ProbabilityMeasure":
        if not 0 <= laziness < 1:
            raise ValidationError("laziness must lie in [0, 1)")
        s = len(generators)
        return cls(generators, tuple([(1 - laziness) / s] * s), laziness)

    @classmethod
    def uniform(cls, generators: GeneratingSet) -> "ProbabilityMeasure":
        return cls.lazy(generators, 0.0)

    @property
    def is_isotropic(self) -> bool:
        w = np.asarray(self.weights)
        return bool(np.all(w == w[0]))


def markov_operator(graph: CayleyGraph, mu: ProbabilityMeasure, block_dim: int = 1) -> BlockOperator:
    """Right convolution by mu: T_{x,y} = sum of mu(g) over g with y = x g.

    This commutes with left translations (hence with deck transformations)
    and, mu being symmetric, is a symmetric doubly stochastic matrix.
    """
    if mu.generators != graph.family.generators:
        raise ValidationError("measure and graph use different generating sets")
    n = graph.order
    idx = np.arange(n)
    rows, cols, vals = [idx], [idx], [np.full(n, mu.identity_weight)]
    for g, w in zip(graph.generator_index, mu.weights):
        if w:
            rows.append(idx)
            cols.append(graph.multiply(idx, g))
            vals.append(np.full(n, w))
    mat = sp.csr_array((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    if block_dim > 1:
        mat = sp.kron(mat, sp.identity(block_dim), format="csr")
    return BlockOperator(graph, mat, block_dim)


def _mean_zero_spectrum(graph: CayleyGraph, mu: ProbabilityMeasure) -> np.ndarray:
    T = markov_operator(graph, mu).matrix
    n = graph.order
    if n <= 4096:
        D = T.toarray() - 1.0 / n
        return np.linalg.eigvalsh(D)
    q = spla.LinearOperator((n, n), matvec=lambda v: T @ v - v.sum() / n, dtype=float)
    return spla.eigsh(q, k=2, which="LM", return_eigenvectors=False, tol=0)


def spectral_gap(graph: CayleyGraph, mu: ProbabilityMeasure) -> float:
    """rho = ||mu - q||_2, the largest |eigenvalue| on mean-zero functions."""
    if graph.order == 1:
        return 0.0
    return float(np.abs(_mean_zero_spectrum(graph, mu)).max())


def averaging_projection(graph: CayleyGraph, internal_rank: int = 1, block_dim: int | None = None) -> BlockOperator:
    """q = (1/N) * all-ones, tensored with the rank-r coordinate projection P."""
    k = block_dim if block_dim is not None else max(1, internal_rank)
    if not 1 <= internal_rank <= k:
        raise ValidationError(f"internal rank {internal_rank} must lie in [1, block_dim={k}]")
    n = graph.order
    P = np.diag([1.0] * internal_rank + [0.0] * (k - internal_rank))
    return BlockOperator(graph, np.kron(np.full((n, n), 1.0 / n), P), k)


def ghost_projection(box: BoxSpace, internal_rank: int = 1, block_dim: int | None = None) -> BlockOperator:
    """Q = direct sum of the averaging projections of the components."""
    k = block_dim if block_dim is not None else max(1, internal_rank)
    blocks = [sp.csr_array(averaging_projection(c, internal_rank, k).matrix) for c in box.components]
    return BlockOperator(box, sp.block_diag(blocks, format="csr"), k)


@dataclass(frozen=True)
class KazhdanRow:
    level: int
    N: int
    n: int
    p: float
    lower: float
    upper: float
    interp_bound: float
    rho: float
    propagation: int


CSV_COLUMNS = ("level", "N", "n", "p", "lower", "upper", "interp_bound", "rho")


def interpolation_bound(rho: float, n: int, p: float) -> float:
    """2^theta * (rho^n)^(1-theta), theta = |2/p - 1|, from ||.||_1, ||.||_inf <= 2."""
    theta = abs(2.0 / p - 1.0)
    return 2.0**theta * (rho**n) ** (1.0 - theta)


def kazhdan_table(box: BoxSpace, mu: ProbabilityMeasure, n_values: Iterable[int], p_values: Sequence[float],
                  seed: int = 0, budget: int = 200) -> list[KazhdanRow]:
    """Per-level enclosures of ||mu_i^n - q_i||_p for every n and p requested."""
    n_values = sorted(set(int(n) for n in n_values))
    if not n_values or n_values[0] < 1:
        raise ValidationError("n values must be >= 1")
    if any(not 1 < p < np.inf for p in p_values):
        raise ValidationError("p values must lie in (1, inf)")
    rows: list[KazhdanRow] = []
    for level, graph in zip(box.levels, box.components):
        N = graph.order
        mu_i = markov_operator(graph, mu).matrix
        rho = spectral_gap(graph, mu)
        dist = graph.dist
        P = np.eye(N)
        warm: dict[float, np.ndarray] = {}
        step = 0
        for n in n_values:
            while step < n:
                P = np.asarray(mu_i @ P)
                step += 1
            prop = int(dist[P != 0].max())
            D = P - 1.0 / N
            # mu symmetric => D symmetric => ||D||_p = ||D||_p' for conjugate p'
            done: dict[float, tuple[float, float]] = {}
            for p in p_values:
                bound = interpolation_bound(rho, n, p)
                key = 2.0 if p == 2 else min(p, p / (p - 1))
                if key in done:
                    lo, hi = done[key]
                elif p == 2:
                    lo, hi = two_norm(D)
                else:
                    cands = [warm[key]] if key in warm else []
                    est = pnorm_estimate(D, key, budget, seed=(seed, level, n), candidates=cands)
                    if est.vector is not None:
                        warm[key] = est.vector
                    lo, hi = est.lower, min(est.upper, bound * (1 + 1e-12))
                    if lo > hi:
                        raise InvariantViolation(
                            "interpolation soundness",
                            f"level {level}, n={n}, p={p}: attained {lo!r} above the bound {bound!r}",
                        )
                done[key] = (lo, hi)
                rows.append(KazhdanRow(level, N, n, float(p), float(lo), float(hi), float(bound), rho, prop))
    return rows


def kazhdan_approximant(box: BoxSpace, mu: ProbabilityMeasure, n: int, p: float, seed: int = 0) -> list[KazhdanRow]:
    return kazhdan_table(box, mu, [n], [p], seed=seed)


def write_convergence_csv(rows: Iterable[KazhdanRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([repr(d[c]) if isinstance(d[c], float) else d[c] for c in CSV_COLUMNS])


# -- Cheeger constants ------------------------------------------------------

def _adjacency(graph) -> np.ndarray:
    if isinstance(graph, CayleyGraph):
        return graph.adjacency.toarray()
    if hasattr(graph, "nodes") and hasattr(graph, "edges"):
        import networkx as nx

        return nx.to_numpy_array(graph, nodelist=sorted(graph.nodes))
    A = graph.toarray() if sp.issparse(graph) else np.asarray(graph)
    if not np.array_equal(A, A.T):
        raise ValidationError("adjacency matrix must be symmetric")
    return A


def cheeger_exact(graph, limit: int = CHEEGER_EXACT_LIMIT) -> Fraction:
    """min over nonempty proper A of #boundary(A) / min(|A|, |V \\ A|), by enumeration."""
    A = _adjacency(graph)
    n = len(A)
    if n > limit:
        raise SizeBudgetError(f"{n} vertices exceed the exhaustive Cheeger limit {limit}; use cheeger_bounds")
    if n < 2:
        raise ValidationError("Cheeger constant needs at least two vertices")
    iu, ju = np.nonzero(np.triu(A, 1))
    w = A[iu, ju].astype(np.int64)
    if np.any(A[iu, ju] != w):
        raise ValidationError("edge multiplicities must be integers")
    best: Fraction | None = None
    total = 1 << (n - 1)  # vertex n-1 stays outside A; complements cover the rest
    shifts = np.arange(n - 1, dtype=np.int64)
    for start in range(1, total, 1 << 16):
        masks = np.arange(start, min(total, start + (1 << 16)), dtype=np.int64)
        bits = ((masks[:, None] >> shifts) & 1).astype(bool)
        bits = np.concatenate([bits, np.zeros((len(masks), 1), dtype=bool)], axis=1)
        boundary = ((bits[:, iu] ^ bits[:, ju]) * w).sum(axis=1)
        size = bits.sum(axis=1)
        denom = np.minimum(size, n - size)
        ratio = boundary / denom
        m = ratio.min()
        for i in np.nonzero(ratio <= m * (1 + 1e-12) + 1e-300)[0]:
            f = Fraction(int(boundary[i]), int(denom[i]))
            if best is None or f < best:
                best = f
    return best


def cheeger_bounds(graph) -> tuple[float, float]:
    """Discrete Cheeger sandwich d_min*lam/2 <= h <= d_max*sqrt(2*lam).

    lam is the second-smallest eigenvalue of the normalized Laplacian; for
    regular graphs d_min = d_max = d.
    """
    A = _adjacency(graph)
    deg = A.sum(axis=1)
    if np.any(deg == 0):
        raise ValidationError("cheeger_bounds needs a graph without isolated vertices")
    s = 1.0 / np.sqrt(deg)
    L = np.eye(len(A)) - s[:, None] * A * s[None, :]
    lam = float(np.linalg.eigvalsh(L)[1])
    lam = max(lam, 0.0)
    slack = 64 * len(A) * EPS
    return deg.min() * lam / 2 * (1 - slack), deg.max() * np.sqrt(2 * lam) * (1 + slack) + slack


def is_expander_family(box: BoxSpace, tau: float, limit: int = CHEEGER_EXACT_LIMIT) -> tuple[bool, list[dict]]:
    """True iff every level's exact Cheeger constant (or its lower bound) is >= tau."""
    report = []
    ok = True
    for level, graph in zip(box.levels, box.components):
        lo, hi = cheeger_bounds(graph)
        row = {"level": level, "N": graph.order, "lower": lo, "upper": hi, "exact": None}
        value = lo
        if graph.order <= limit:
            h = cheeger_exact(graph, limit)
            row["exact"] = h
            value = float(h)
        ok = ok and value >= tau
        report.append(row)
    return ok, report
