import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locdiff.graph import (
    UNREACHABLE,
    DependencyGraph,
    banded_graph,
    certify_locality,
    flatten_window,
    format_graph,
    from_edges,
    graph_distance,
    lattice_graph,
    neighborhood,
    parse_graph,
    path_graph,
    read_graph_file,
    star_graph,
    with_self_loops,
    write_graph_file,
)


@st.composite
def random_graphs(draw, max_b=12):
    b = draw(st.integers(1, max_b))
    pairs = [(i, j) for i in range(b) for j in range(i + 1, b)]
    edges = draw(st.lists(st.sampled_from(pairs), max_size=2 * b)) if pairs else []
    dims = draw(st.lists(st.integers(1, 3), min_size=b, max_size=b))
    return with_self_loops(b, edges, dims)


def bfs_oracle(g, i, j):
    """Floyd-Warshall on the adjacency lists."""
    b = g.b
    D = np.full((b, b), np.inf)
    for u, nbrs in enumerate(g.adjacency):
        for w in nbrs:
            D[u, w] = 0 if u == w else 1
    for k in range(b):
        D = np.minimum(D, D[:, [k]] + D[[k], :])
    return UNREACHABLE if np.isinf(D[i, j]) else int(D[i, j])


class TestDistance:
    def test_identity(self):
        assert graph_distance(path_graph(5), 0, 0) == 0

    def test_path_distance(self):
        assert graph_distance(path_graph(5), 0, 3) == 3

    def test_disconnected_is_sentinel(self):
        g = with_self_loops(2, [])
        assert graph_distance(g, 0, 1) == UNREACHABLE
        assert UNREACHABLE > 10**12

    @pytest.mark.parametrize("bad", [-1, 5, 2.0])
    def test_out_of_range(self, bad):
        with pytest.raises(IndexError):
            graph_distance(path_graph(5), bad, 0)
        with pytest.raises(IndexError):
            graph_distance(path_graph(5), 0, bad)

    @settings(max_examples=60, deadline=None)
    @given(random_graphs())
    def test_matches_floyd_warshall(self, g):
        for i, j in itertools.product(range(g.b), repeat=2):
            assert graph_distance(g, i, j) == bfs_oracle(g, i, j)

    @settings(max_examples=60, deadline=None)
    @given(random_graphs())
    def test_symmetry_and_triangle(self, g):
        D = np.array([g.distances_from(i) for i in range(g.b)], dtype=object)
        for i, j in itertools.product(range(g.b), repeat=2):
            assert D[i, j] == D[j, i]
            assert (D[i, j] == 0) == (i == j)
        for i, j, k in itertools.product(range(g.b), repeat=3):
            if D[i, j] != UNREACHABLE and D[j, k] != UNREACHABLE:
                assert D[i, k] <= D[i, j] + D[j, k]


class TestNeighborhood:
    def test_path_example(self):
        # vertices 1..5 in 1-based terms; j = 3 is index 2
        assert neighborhood(path_graph(5), 2, 1) == (1, 2, 3)

    @pytest.mark.parametrize("j", range(5))
    def test_radius_zero(self, j):
        assert neighborhood(path_graph(5), j, 0) == (j,)

    def test_beyond_diameter(self):
        g = lattice_graph((3, 3))
        assert neighborhood(g, 4, 10) == tuple(range(9))

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            neighborhood(path_graph(3), 0, -1)

    @settings(max_examples=40, deadline=None)
    @given(random_graphs(max_b=50), st.integers(0, 6))
    def test_monotone_and_symmetric(self, g, r):
        for j in range(g.b):
            small, big = set(neighborhood(g, j, r)), set(neighborhood(g, j, r + 1))
            assert j in small and small <= big
            assert list(neighborhood(g, j, r)) == sorted(small)
            for i in small:
                assert j in neighborhood(g, i, r)


class TestFlattenWindow:
    def test_unit_blocks(self):
        assert flatten_window(path_graph(3), [1, 2]).tolist() == [1, 2]

    def test_offset_blocks(self):
        assert flatten_window(path_graph(2, [2, 3]), [1]).tolist() == [2, 3, 4]

    def test_prefix_sums(self):
        assert flatten_window(path_graph(3, [2, 2, 2]), [0, 2]).tolist() == [0, 1, 4, 5]

    @settings(max_examples=40, deadline=None)
    @given(random_graphs(), st.data())
    def test_length_and_order(self, g, data):
        verts = data.draw(st.sets(st.integers(0, g.b - 1)))
        idx = flatten_window(g, verts)
        assert idx.size == sum(g.block_dims[v] for v in verts)
        assert np.all(np.diff(idx) > 0)


class TestConstruction:
    def test_missing_self_loop_rejected(self):
        with pytest.raises(ValueError, match="self-loop"):
            from_edges(2, [(0, 1)])

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            DependencyGraph(((0, 1), (1,)), (1, 1))

    def test_bad_block_dims(self):
        with pytest.raises(ValueError):
            with_self_loops(2, [], [1, 0])
        with pytest.raises(ValueError):
            with_self_loops(2, [], [1])

    def test_total_dim(self):
        g = path_graph(3, [1, 2, 4])
        assert g.total_dim == 7
        assert g.offsets.tolist() == [0, 1, 3, 7]

    def test_banded_graph_distance(self):
        g = banded_graph(20, 3)
        for j in range(20):
            assert graph_distance(g, 0, j) == -(-j // 3)


class TestCertify:
    def test_path_graph(self):
        assert certify_locality(path_graph(30), 2.0, 1.0, 10).holds

    @pytest.mark.parametrize("shape", [(7, 7), (4, 4, 4)])
    def test_lattice(self, shape):
        nu = len(shape)
        assert certify_locality(lattice_graph(shape), 3.0**nu, float(nu), 6).holds

    def test_star_fails_at_hub(self):
        cert = certify_locality(star_graph(50), 1.0, 1.0, 1)
        assert not cert.holds
        assert cert.worst_pair == (0, 1)
        assert cert.worst_ratio == pytest.approx(51 / 2)

    @pytest.mark.parametrize("S,nu,r_max", [(0, 1, 1), (1, 0, 1), (1, 1, 0)])
    def test_bad_args(self, S, nu, r_max):
        with pytest.raises(ValueError):
            certify_locality(path_graph(3), S, nu, r_max)


class TestGraphFile:
    def test_round_trip(self, tmp_path):
        g = with_self_loops(4, [(0, 1), (1, 3)], [1, 2, 1, 3])
        write_graph_file(g, tmp_path / "g.txt")
        assert read_graph_file(tmp_path / "g.txt") == g
        assert "edge 1 3" in format_graph(g)

    def test_comments_and_default_dims(self):
        g = parse_graph("# a path\nb 3\nedge 0 1\n\nedge 1 2  # tail\n")
        assert g == path_graph(3)

    @pytest.mark.parametrize(
        "text", ["edge 0 1\n", "b 2\nfoo 1\n", "b 2\ndims 1\n", "b 2\nedge 0 5\n", "b x\n"]
    )
    def test_malformed(self, text):
        with pytest.raises(ValueError):
            parse_graph(text)
