import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from netspill.errors import ParseError, ValidationError
from netspill.network import (Network, build_radius_graph, load_covariates, load_edge_list,
                              read_table, remove_isolated, write_edge_list)


def test_from_edges_symmetrizes_and_dedupes():
    net = Network.from_edges(4, [(0, 1), (1, 0), (0, 1), (2, 3)])
    assert net.n_edges == 2
    assert list(net.neighbors(0)) == [1]
    assert list(net.neighbors(1)) == [0]
    assert np.array_equal(net.edges(), [[0, 1], [2, 3]])


def test_self_loop_rejected():
    with pytest.raises(ValidationError, match="self-loop"):
        Network.from_edges(3, [(0, 1), (2, 2)])


def test_out_of_range_rejected():
    with pytest.raises(ValidationError, match="out of range"):
        Network.from_edges(3, [(0, 3)])


def test_averaging_rows_sum_to_one():
    net = Network.from_edges(4, [(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)])
    rows = np.asarray(net.averaging.sum(axis=1)).ravel()
    assert np.allclose(rows, 1.0)


def test_averaging_requires_no_isolates():
    net = Network.from_edges(3, [(0, 1)])
    with pytest.raises(ValidationError, match="isolated"):
        net.averaging


def test_remove_isolated_reindexes():
    net = Network.from_edges(5, [(0, 2), (2, 4)])
    vals = np.arange(5) * 10
    red, (v,), dropped = remove_isolated(net, vals)
    assert red.n == 3
    assert list(dropped) == [1, 3]
    assert list(v) == [0, 20, 40]
    assert np.array_equal(red.edges(), [[0, 1], [1, 2]])


def test_radius_graph_matches_pairwise_oracle(rng):
    pts = rng.uniform(0, 10, size=(80, 2))
    net = build_radius_graph(pts, 2.0)
    oracle = {(i, j) for i, j in itertools.combinations(range(80), 2)
              if np.hypot(*(pts[i] - pts[j])) <= 2.0}
    assert {tuple(e) for e in net.edges()} == oracle


def test_radius_graph_validation():
    with pytest.raises(ValidationError):
        build_radius_graph(np.zeros((3, 3)), 1.0)
    with pytest.raises(ValidationError):
        build_radius_graph(np.zeros((3, 2)), 0.0)


@given(st.integers(2, 12), st.lists(st.tuples(st.integers(0, 11), st.integers(0, 11)), max_size=40))
def test_graph_invariants(n, pairs):
    pairs = [(i % n, j % n) for i, j in pairs if i % n != j % n]
    net = Network.from_edges(n, pairs)
    A = net.adjacency.toarray()
    assert np.array_equal(A, A.T)
    assert not A.diagonal().any()
    assert set(np.unique(A)) <= {0.0, 1.0}
    assert net.degrees.sum() == 2 * net.n_edges


@given(st.permutations(list(range(6))))
def test_permute_preserves_structure(perm):
    net = Network.from_edges(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 3)])
    p = net.permute(np.array(perm))
    assert p.n_edges == net.n_edges
    assert np.array_equal(p.degrees, net.degrees[np.array(perm)])


def test_edge_list_roundtrip(tmp_path):
    net = Network.from_edges(6, [(0, 1), (4, 2), (3, 1)])
    for one in (False, True):
        path = tmp_path / f"e{int(one)}.csv"
        write_edge_list(net, path, one_based=one)
        assert load_edge_list(path) == net


def test_edge_list_header_and_comments(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("# comment\nsrc,dst\n1,2\n\n2,3\n")
    net = load_edge_list(path)
    assert net.n == 4 and net.n_edges == 2


def test_edge_list_parse_error_names_line(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("0,1\n1,x\n")
    with pytest.raises(ParseError) as info:
        load_edge_list(path)
    assert info.value.line == 2
    path.write_text("0,1,2\n")
    with pytest.raises(ParseError, match=":1"):
        load_edge_list(path)


def test_read_table_sorts_by_id(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("id,a,b\n2,5,6\n0,1,2\n1,3,4\n")
    names, vals = read_table(path)
    assert names == ["a", "b"]
    assert np.array_equal(vals, [[1, 2], [3, 4], [5, 6]])


def test_read_table_rejects_gapped_ids(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("id,a\n0,1\n2,3\n")
    with pytest.raises(ValidationError, match="0..n-1"):
        read_table(path)


def test_covariates_reject_nonfinite(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("id,a\n0,nan\n")
    with pytest.raises(ValidationError):
        load_covariates(path)
