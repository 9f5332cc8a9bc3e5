import itertools

import networkx as nx
import numpy as np
import pytest

import oracles
from roelab.coarse_space import (BoxSpace, DistanceMatrixSpace, assemble_box_space, ball_growth_bound,
                                 bounded_geometry_profile, distance, read_simplices, rips_complex, verify_net)
from roelab.errors import SizeBudgetError, ValidationError
from roelab.groups import QuotientChain, cayley_graph, get_family


@pytest.fixture(scope="module")
def cyc48(cyclic):
    return assemble_box_space(QuotientChain(cyclic, (4, 8)))


def test_cross_distance_cyclic_four_eight(cyc48):
    d4 = nx.diameter(nx.cycle_graph(4))
    d8 = nx.diameter(nx.cycle_graph(8))
    assert (d4, d8) == (2, 4)
    assert distance(cyc48, (1, 0), (2, 0)) == d4 + d8 + 1 + 2 == 9
    # point independent
    vals = {distance(cyc48, (1, x), (2, y)) for x in range(4) for y in range(8)}
    assert vals == {9}


def test_single_level_box_is_the_graph(sl2_graphs):
    g = sl2_graphs[5]
    box = BoxSpace([g])
    idx = np.arange(g.order)
    assert box.size == g.order
    assert np.array_equal(box.pair_distances(idx[:, None], idx[None, :]), g.dist)


def test_sl2_component_orders(sl2):
    box = assemble_box_space(QuotientChain(sl2, (3, 5)))
    assert [c.order for c in box.components] == [24, 120]
    assert box.name == "box-sl2-3-5"
    assert box.point_id(24) == (2, 0) and box.flat(2, 0) == 24


def test_distance_same_point_and_word_example(sl2_box):
    assert distance(sl2_box, (3, 17), (3, 17)) == 0
    g = sl2_box.component(1)
    AB = g.index_of(np.array([[1, 2], [0, 1]]) @ np.array([[1, 0], [2, 1]]) % 3)[0]
    assert distance(sl2_box, (1, 0), (1, int(AB))) <= 2


def _exhaustive_triangle(D):
    return bool(np.all(D[:, None, :] <= D[:, :, None] + D[None, :, :]))


def test_triangle_inequality_exhaustive(cyclic, sl2):
    for box in (assemble_box_space(QuotientChain(cyclic, (4, 8, 16))),
                assemble_box_space(QuotientChain(sl2, (3, 5)))):
        D = box.dist.astype(np.int64)
        assert box.size <= 500
        assert _exhaustive_triangle(D)
        assert np.array_equal(D, D.T) and np.all((D == 0) == np.eye(box.size, dtype=bool))


def test_triangle_inequality_sampled(sl2_box):
    rng = np.random.default_rng(0)
    x, y, z = rng.integers(0, sl2_box.size, size=(3, 100_000))
    d = sl2_box.pair_distances
    assert np.all(d(x, z) <= d(x, y) + d(y, z))


def test_levels_drift_apart(sl2_box):
    for i, j in itertools.combinations(sl2_box.levels, 2):
        assert sl2_box.cross_distance(i, j) >= i + j


def test_bounded_geometry_small_cases(cyclic, sl2_graphs):
    c4 = BoxSpace([cayley_graph(cyclic, 4)])
    assert bounded_geometry_profile(c4, 0) == 1
    assert bounded_geometry_profile(c4, 1) == 3
    box5 = BoxSpace([sl2_graphs[5]])
    _, lengths = oracles.enumerate_group(oracles.SANOV, 5)
    exact = sum(1 for w in lengths if w <= 2)
    assert bounded_geometry_profile(box5, 2) == exact <= 21
    assert exact == 17


def test_bounded_geometry_monotone_and_bounded(sl2_box):
    vals = [bounded_geometry_profile(sl2_box, R) for R in range(8)]
    assert vals == sorted(vals)
    assert all(v <= ball_growth_bound(4, R) for R, v in enumerate(vals))
    # brute force over all points for a small radius
    brute = max(len(sl2_box.ball(x, 2)) for x in range(sl2_box.size))
    assert vals[2] == brute
    with pytest.raises(ValidationError):
        bounded_geometry_profile(sl2_box, -1)


def test_bounded_geometry_counts_nearby_components(cyc48):
    # at the cross distance 9 a level-1 ball swallows all of level 2
    assert bounded_geometry_profile(cyc48, 8) == 8
    assert bounded_geometry_profile(cyc48, 9) == 4 + 8


def test_rips_zero_is_vertices(cyc48):
    rc = rips_complex(cyc48, 0, 3)
    assert rc.count(0) == 12 and rc.count(1) == 0 and rc.count(2) == 0


def test_rips_four_cycle_against_clique_oracle(cyclic):
    c4 = BoxSpace([cayley_graph(cyclic, 4)])
    rc = rips_complex(c4, 1, 2)
    cliques = list(nx.enumerate_all_cliques(nx.cycle_graph(4)))
    by_dim = [sum(1 for c in cliques if len(c) == d + 1) for d in range(3)]
    assert [rc.count(d) for d in range(3)] == by_dim == [4, 4, 0]


def test_rips_complete_cayley_graph_has_full_simplex():
    complete = BoxSpace([cayley_graph(get_family("cyclic", steps=(1, 2)), 4)])
    rc = rips_complex(complete, 1, 3)
    assert rc.simplices[3] == ((0, 1, 2, 3),)


def test_rips_is_downward_closed_and_monotone(sl2_graphs):
    space = BoxSpace([sl2_graphs[3]])
    small = rips_complex(space, 1, 3)
    big = rips_complex(space, 2, 3)
    all_small = set(small.all_simplices())
    for s in all_small:
        for face in itertools.combinations(s, len(s) - 1):
            assert not face or face in all_small
        d = space.pair_distances(np.array(s)[:, None], np.array(s)[None, :])
        assert d.max() <= 1
    assert all_small <= set(big.all_simplices())


def test_rips_budget_and_round_trip(tmp_path, sl2_graphs):
    space = BoxSpace([sl2_graphs[3]])
    with pytest.raises(SizeBudgetError, match="cap"):
        rips_complex(space, 4, 3, cap=1000)
    rc = rips_complex(space, 1, 2)
    path = tmp_path / "rips.txt"
    rc.write(path)
    assert read_simplices(path) == rc.all_simplices()
    with pytest.raises(ValidationError):
        rips_complex(space, -1, 2)


def test_verify_net_cases(cyclic):
    c8 = BoxSpace([cayley_graph(cyclic, 8)])
    assert verify_net(c8, range(8), 1)
    assert not verify_net(c8, [], 1)
    assert not verify_net(c8, [0, 4], 2)  # point 2 sits at distance exactly 2
    assert verify_net(c8, [0, 4], 3)
    assert not verify_net(c8, [0, 1, 4], 2)  # not separated


def test_distance_matrix_space_from_graph():
    space = DistanceMatrixSpace.from_graph(nx.to_numpy_array(nx.path_graph(5)))
    assert space.size == 5
    assert space.pair_distances(0, 4) == 4
    assert space.ball(2, 1).tolist() == [1, 2, 3]
