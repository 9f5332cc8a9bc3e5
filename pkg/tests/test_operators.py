import networkx as nx
import numpy as np
import pytest
import scipy.sparse as sp

import oracles
from roelab.coarse_space import BoxSpace, assemble_box_space
from roelab.errors import ValidationError
from roelab.expander import ProbabilityMeasure, averaging_projection, ghost_projection, markov_operator
from roelab.groups import QuotientChain, cayley_graph
from roelab.operators import (BlockOperator, NormEstimate, apply, ghost_profile, inf_norm, load_operator,
                              one_norm, pnorm_estimate, propagation, random_operator, save_operator, trace,
                              truncate_propagation, two_norm)


def test_propagation_basic_cases(sl2_graphs, lazy_sl2):
    g = sl2_graphs[5]
    assert propagation(BlockOperator.diagonal(g, np.arange(1, g.order + 1))) == 0
    assert propagation(BlockOperator.zero(g)) == 0
    assert propagation(markov_operator(g, lazy_sl2)) == 1


def test_propagation_of_markov_square_matches_support_oracle(sl2_graphs, lazy_sl2):
    g = sl2_graphs[5]
    mu = markov_operator(g, lazy_sl2)
    # support of mu * mu is {s t : s, t in S u {e}}; its longest element decides propagation
    gens = [oracles.reduce_mod(oracles.IDENTITY, 5)] + [oracles.reduce_mod(s, 5) for s in oracles.SANOV]
    elems, lengths = oracles.enumerate_group(oracles.SANOV, 5)
    length = dict(zip(elems, lengths))
    expected = max(length[oracles.mat_mul(a, b, 5)] for a in gens for b in gens)
    assert propagation(mu @ mu) == expected == 2


def test_apply_identity_zero_and_projection(sl2_graphs):
    g = sl2_graphs[3]
    xi = np.random.default_rng(0).standard_normal(g.order)
    assert np.array_equal(apply(BlockOperator.identity(g), xi), xi)
    assert not np.any(apply(BlockOperator.zero(g), xi))
    delta = np.zeros(g.order)
    delta[5] = 1.0
    assert np.allclose(apply(averaging_projection(g), delta), 1 / 24, rtol=0, atol=1e-15)
    with pytest.raises(ValidationError, match="dimension mismatch"):
        apply(BlockOperator.identity(g), np.ones(5))


def test_apply_blocked_vectors(sl2_graphs):
    g = sl2_graphs[3]
    q = averaging_projection(g, internal_rank=1, block_dim=2)
    xi = np.zeros((g.order, 2))
    xi[0] = [1.0, 1.0]
    out = apply(q, xi)
    assert out.shape == (g.order, 2)
    assert np.allclose(out[:, 0], 1 / 24) and not np.any(out[:, 1])


def test_block_operator_validation(sl2_graphs):
    g = sl2_graphs[3]
    with pytest.raises(ValidationError, match="does not match"):
        BlockOperator(g, np.eye(5))
    with pytest.raises(ValidationError):
        BlockOperator(g, np.eye(24), block_dim=0)
    T = BlockOperator.from_blocks(g, {(0, 1): [[1, 2], [3, 4]]}, block_dim=2)
    assert np.array_equal(T.block(0, 1), [[1, 2], [3, 4]])
    xs, ys = T.point_support()
    assert xs.tolist() == [0] and ys.tolist() == [1]


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0, 4.0])
def test_identity_norm_is_one(sl2_graphs, p):
    est = pnorm_estimate(BlockOperator.identity(sl2_graphs[3]), p)
    assert est.lower == pytest.approx(1.0, abs=1e-12)
    assert est.upper == pytest.approx(1.0, abs=1e-12)


def test_projection_norm_is_one(sl2_graphs):
    q = averaging_projection(sl2_graphs[3])
    est2 = pnorm_estimate(q, 2)
    assert est2.lower <= 1 <= est2.upper and est2.upper - est2.lower <= 1e-8
    est4 = pnorm_estimate(q, 4)
    # ||q||_p = N^(1/p') * N^(1/p) / N = 1 by Hoelder
    assert est4.contains(1.0, rtol=1e-12)


def test_p_must_be_finite_and_above_one():
    with pytest.raises(ValidationError):
        pnorm_estimate(np.eye(3), 1.0)
    with pytest.raises(ValidationError):
        pnorm_estimate(np.eye(3), np.inf)


@pytest.mark.parametrize("p", [1.5, 3.0, 4.0])
@pytest.mark.parametrize("seed", range(6))
def test_pnorm_soundness_against_grid_oracle(p, seed):
    rng = np.random.default_rng(seed)
    dim = 2 if seed % 2 == 0 else 3
    A = rng.standard_normal((dim, dim))
    grid = oracles.pnorm_grid(A, p, samples=40001 if dim == 2 else 160000)
    est = pnorm_estimate(A, p)
    assert grid <= est.upper * (1 + 1e-12)
    # the grid undershoots the true norm only by its resolution
    assert est.lower <= grid * (1 + 1e-3)
    assert est.lower >= grid * (1 - 1e-3)


@pytest.mark.parametrize("seed", range(4))
def test_p2_matches_svd(seed):
    A = np.random.default_rng(seed).standard_normal((30, 30))
    sigma = np.linalg.svd(A, compute_uv=False)[0]
    est = pnorm_estimate(A, 2)
    assert est.lower <= sigma <= est.upper
    assert est.width <= 1e-8 * est.upper


def test_norm_helpers_and_estimate_invariants():
    A = np.array([[1.0, -2.0], [3.0, 4.0]])
    assert one_norm(A) == 6.0 and inf_norm(A) == 7.0
    lo, hi = two_norm(A)
    assert lo <= np.linalg.norm(A, 2) <= hi
    with pytest.raises(ValueError):
        NormEstimate(2.0, 2.0, 1.0)
    assert pnorm_estimate(np.zeros((3, 3)), 3).upper == 0.0


def test_sparse_and_large_norm_paths():
    rng = np.random.default_rng(3)
    A = sp.random_array((5000, 5000), density=2e-4, random_state=rng, format="csr")
    est = pnorm_estimate(A, 2)
    ref = sp.linalg.svds(A, k=1, return_singular_vectors=False)[0]
    assert est.contains(ref, rtol=1e-8)
    est3 = pnorm_estimate(A, 3, budget=50)
    assert est3.lower <= est3.upper


def test_submultiplicativity_within_intervals(sl2_graphs):
    rng = np.random.default_rng(7)
    g = sl2_graphs[5]
    for p in (1.5, 3.0):
        S = random_operator(g, 1, rng)
        T = random_operator(g, 1, rng)
        lo_st = pnorm_estimate(S @ T, p).lower
        assert lo_st <= pnorm_estimate(S, p).upper * pnorm_estimate(T, p).upper


def test_trace_values(sl2_graphs, sl2):
    g = sl2_graphs[5]
    assert trace(BlockOperator.identity(sl2_graphs[3])) == 24
    assert trace(averaging_projection(g)) == pytest.approx(1.0, abs=1e-12)
    assert trace(markov_operator(g, ProbabilityMeasure.uniform(sl2.generators))) == 0
    assert trace(markov_operator(g, ProbabilityMeasure.lazy(sl2.generators))) == 60


def test_truncation_cases(sl2_graphs):
    g = sl2_graphs[3]
    q = averaging_projection(g)
    T2, removed = truncate_propagation(q, g.diameter)
    assert np.array_equal(T2.to_dense(), q.to_dense()) and removed.upper == 0
    T0, removed0 = truncate_propagation(q, 0)
    assert np.array_equal(T0.to_dense(), np.eye(24) / 24)
    with pytest.raises(ValidationError):
        truncate_propagation(q, -1)


def test_truncation_removes_antipodal_shell(sl2_graphs):
    g = sl2_graphs[3]
    D = g.diameter
    q = averaging_projection(g)
    _, removed = truncate_propagation(q, D - 1)
    # residual matrix built from the oracle metric
    G = oracles.cayley_nx(oracles.SANOV, 3)
    index = {tuple(tuple(int(v) for v in row) for row in e): i for i, e in enumerate(g.elements)}
    shell = np.zeros((24, 24))
    for a, dists in nx.all_pairs_shortest_path_length(G):
        for b, d in dists.items():
            if d == D:
                shell[index[a], index[b]] = 1 / 24
    assert removed.contains(float(np.linalg.norm(shell, 2)), rtol=1e-12)


def test_ghost_profile_single_point_law(sl2_graphs):
    for m in (3, 5):
        g = sl2_graphs[m]
        q = averaging_projection(g)
        for p in (1.5, 2.0, 3.0):
            e = ghost_profile(q, [0], p).value(0, 1)
            assert e.lower == pytest.approx(g.order ** (1 / p - 1), rel=1e-12)
            assert e.upper == pytest.approx(g.order ** (1 / p - 1), rel=1e-12)


def test_ghost_profile_identity_is_not_a_ghost(sl2_box):
    prof = ghost_profile(BlockOperator.identity(sl2_box), [0, 1, 3], 2.0)
    assert all(e.lower <= 1 <= e.upper and e.upper - e.lower <= 1e-10 for e in prof.entries)


def test_ghost_profile_two_levels_decreasing(sl2):
    box = assemble_box_space(QuotientChain(sl2, (3, 5)))
    prof = ghost_profile(ghost_projection(box), [0, 1, 2], 2.0)
    assert prof.value(0, 1).lower == pytest.approx(24**-0.5, rel=1e-12)
    assert prof.value(0, 2).lower == pytest.approx(120**-0.5, rel=1e-12)
    for level in (1, 2):
        vals = [prof.value(R, level).lower for R in (0, 1, 2)]
        assert vals == sorted(vals)
        # closed ball of radius R: column block norm sqrt(|B| / N)
        N = box.component(level).order
        B = int(np.count_nonzero(box.component(level).word_length <= 2))
        assert prof.value(2, level).lower == pytest.approx((B / N) ** 0.5, rel=1e-10)
    with pytest.raises(ValidationError):
        ghost_profile(ghost_projection(box), [-1])


def test_ghost_profile_non_hilbert_on_block(sl2_graphs):
    g = sl2_graphs[3]
    q = averaging_projection(g)
    e = ghost_profile(q, [1], 3.0).value(1, 1)
    # q restricted to a ball B has p-norm |B|^(1-1/p) N^(1/p - 1) (rank one, constant entries)
    B = 5
    law = B ** (1 - 1 / 3) * 24 ** (1 / 3 - 1)
    assert e.lower <= law * (1 + 1e-9) and law <= e.upper * (1 + 1e-9)


def test_apply_support_growth_bounded_by_propagation(sl2_graphs):
    g = sl2_graphs[5]
    rng = np.random.default_rng(11)
    for R in (0, 1, 2):
        T = random_operator(g, R, rng)
        for x in (0, 17, 99):
            xi = np.zeros(g.order)
            xi[x] = 1.0
            out = np.nonzero(apply(T, xi))[0]
            assert np.all(g.pair_distances(x, out) <= propagation(T))


def test_serialization_round_trip_is_bit_exact(tmp_path, sl2_graphs, sl2_box):
    rng = np.random.default_rng(5)
    g = sl2_graphs[5]
    real = random_operator(g, 2, rng)
    blocks = random_operator(g, 1, rng, block_dim=2)
    cplx = real.with_matrix(real.matrix + 1j * random_operator(g, 2, rng).matrix)
    for T, p in ((real, 3.0), (blocks, None), (cplx, 2.0)):
        path = tmp_path / "op.txt"
        save_operator(T, path, p)
        back, p_back = load_operator(path, g)
        assert p_back == p and back.block_dim == T.block_dim
        diff = back.to_sparse() - T.to_sparse()
        assert diff.count_nonzero() == 0
    with pytest.raises(ValidationError, match="belongs to space"):
        load_operator(path, sl2_graphs[3])
    (tmp_path / "bad.txt").write_text("garbage\n")
    with pytest.raises(ValidationError):
        load_operator(tmp_path / "bad.txt", g)
    # dense operators serialize the same way
    q = averaging_projection(sl2_graphs[3])
    save_operator(q, tmp_path / "q.txt")
    back, _ = load_operator(tmp_path / "q.txt", sl2_graphs[3])
    assert np.array_equal(back.to_dense(), q.to_dense())


def test_box_space_operators(sl2_box):
    T = random_operator(BoxSpace(sl2_box.components[:2]), 1, np.random.default_rng(0))
    assert propagation(T) == 1
