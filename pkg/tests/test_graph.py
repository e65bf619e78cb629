import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hifgl import graph as G
from hifgl.graph import DatasetError, PartitionError
from hifgl.synthetic import make_citation_graph, write_dataset

from conftest import toy_graph


def write_toy(tmp_path, content_rows, cites_rows):
    c = tmp_path / "toy.content"
    k = tmp_path / "toy.cites"
    c.write_text("\n".join(content_rows) + "\n")
    k.write_text("\n".join(cites_rows) + "\n")
    return c, k


def test_load_toy_fixture(tmp_path):
    c, k = write_toy(tmp_path,
                     ["a 1 0 1 red", "b 0 1 0 blue", "c 1 1 1 red"],
                     ["a b", "b c"])
    g = G.load_dataset(c, k)
    assert g.num_nodes == 3 and g.num_features == 3 and g.num_edges == 2
    assert g.class_names == ("red", "blue")
    assert g.labels.tolist() == [0, 1, 0]
    # "cited citing": b cites a, c cites b
    assert sorted(map(tuple, g.edges.tolist())) == [(1, 0), (2, 1)]


def test_unknown_key_dropped_and_counted(tmp_path):
    c, k = write_toy(tmp_path, ["a 1 x", "b 0 y"], ["a b", "a zzz"])
    g = G.load_dataset(c, k)
    assert g.num_edges == 1 and g.load_stats.dropped_edges == 1


def test_duplicate_citations_counted(tmp_path):
    c, k = write_toy(tmp_path, ["a 1 x", "b 0 y"], ["a b", "a b", "b a"])
    g = G.load_dataset(c, k)
    assert g.num_edges == 2 and g.load_stats.duplicate_edges == 1


def test_load_errors(tmp_path):
    c, k = write_toy(tmp_path, ["a 1 0 x", "b 0 y"], [])
    with pytest.raises(DatasetError, match="inconsistent"):
        G.load_dataset(c, k)
    c.write_text("")
    with pytest.raises(DatasetError):
        G.load_dataset(c, k)
    with pytest.raises(DatasetError):
        G.load_dataset(tmp_path / "missing.content", k)


def test_synthetic_roundtrip_through_files(tmp_path):
    g = make_citation_graph(num_nodes=80, num_features=30, num_links=150, seed=4)
    c, k = write_dataset(g, tmp_path, "syn")
    back = G.load_dataset(c, k)
    assert back.num_nodes == 80 and back.num_features == 30
    np.testing.assert_array_equal(back.features, g.features)
    assert sorted(map(tuple, back.edges.tolist())) == sorted(map(tuple, g.edges.tolist()))


# -- partition -------------------------------------------------------------------------

def test_partition_sizes_10_3():
    g = toy_graph(10, [])
    p = G.partition_random(g, 3, seed=1)
    assert sorted(np.bincount(p.silo_of).tolist(), reverse=True) == [4, 3, 3]


def test_partition_cora_sized_blocks():
    g = toy_graph(2708, [])
    p = G.partition_random(g, 5, seed=0)
    assert set(np.bincount(p.silo_of).tolist()) <= {541, 542}


def test_partition_one_silo():
    g = toy_graph(6, [(0, 1), (1, 2), (3, 4)])
    p = G.partition_random(g, 1)
    assert (p.silo_of == 0).all()
    assert not p.cross_mask().any()
    assert G.cross_edge_loss(p) == 0.0
    assert G.privacy_leakage(p).mean_fraction == 0.0


def test_partition_errors():
    g = toy_graph(3, [])
    with pytest.raises(PartitionError):
        G.partition_random(g, 4)
    with pytest.raises(PartitionError):
        G.partition_random(g, 0)


def test_split_fractions_per_silo():
    p = G.partition_random(toy_graph(500, []), 5, seed=3)
    for s in range(5):
        counts = np.bincount(p.split_of[p.silo_of == s], minlength=3)
        assert counts.tolist() == [60, 20, 20]


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 300), k=st.integers(1, 12), seed=st.integers(0, 10**6))
def test_partition_is_a_partition(n, k, seed):
    k = min(k, n)
    p = G.partition_random(toy_graph(n, []), k, seed=seed)
    sizes = np.bincount(p.silo_of, minlength=k)
    assert sizes.sum() == n and sizes.min() >= 1
    assert sizes.max() - sizes.min() <= 1
    q = G.partition_random(toy_graph(n, []), k, seed=seed)
    np.testing.assert_array_equal(p.silo_of, q.silo_of)
    np.testing.assert_array_equal(p.split_of, q.split_of)


def test_partition_json_roundtrip_is_stable():
    g = toy_graph(12, [(0, 1)])
    p = G.partition_random(g, 3, seed=9)
    a = G.partition_to_json(p, seed=9)
    assert a == G.partition_to_json(G.partition_random(g, 3, seed=9), seed=9)
    back = G.apply_partition_json(g, a)
    np.testing.assert_array_equal(back.silo_of, p.silo_of)
    np.testing.assert_array_equal(back.split_of, p.split_of)
    keys = list(json.loads(a)["nodes"])
    assert keys == sorted(keys, key=int)


def test_apply_partition_wrong_size():
    p = G.partition_random(toy_graph(5, []), 2)
    with pytest.raises(PartitionError):
        G.apply_partition_json(toy_graph(6, []), G.partition_to_json(p))


# -- structure -------------------------------------------------------------------------

def test_symmetrize():
    g = G.normalize_structure(toy_graph(3, [(1, 2)]), symmetrize=True, add_self_loops=False)
    assert sorted(map(tuple, g.edges.tolist())) == [(1, 2), (2, 1)]


def test_isolated_node_gets_degree_one():
    g = G.normalize_structure(toy_graph(3, [(0, 1)]))
    assert g.degrees()[2] == 1


def test_normalize_idempotent():
    g = G.normalize_structure(toy_graph(5, [(0, 1), (1, 0), (2, 3), (3, 2)]), add_self_loops=False)
    assert g.num_edges == 4
    g2 = G.normalize_structure(G.normalize_structure(toy_graph(5, [(0, 1), (3, 4)])))
    assert g2.num_edges == 5 + 4


def path_graph():
    # 1-2-3-4 as nodes 0..3, silos {0,1} and {2,3}
    g = toy_graph(4, [(0, 1), (1, 2), (2, 3)], silo_of=[0, 0, 1, 1])
    return G.normalize_structure(g)


def test_ego_graph_silo_pointers():
    egos = G.build_ego_graphs(path_graph())
    assert (2, 1) in egos[1].out_neighbors
    assert (1, 0) in egos[2].in_neighbors
    assert egos[0].degree == 2


def test_ego_reconstruction():
    g = path_graph()
    np.testing.assert_array_equal(G.ego_edges(G.build_ego_graphs(g)), g.edges)


def test_ego_needs_partition():
    with pytest.raises(PartitionError):
        G.build_ego_graphs(toy_graph(2, [(0, 1)]))


def test_federated_subgraph_holds_ids_only():
    subs = G.federated_subgraphs(path_graph())
    assert [s.device_ids for s in subs] == [(0, 1), (2, 3)]
    assert set(G.FederatedSubgraph.__dataclass_fields__) == {"silo_id", "device_ids"}


def test_leakage_path():
    rep = G.privacy_leakage(path_graph())
    assert rep.per_silo_count == (1, 1)
    assert rep.per_silo_fraction == (0.5, 0.5)
    assert rep.mean_fraction == 0.5


def test_bipartite_everything_crosses():
    g = toy_graph(4, [(0, 2), (0, 3), (1, 2), (1, 3)], silo_of=[0, 0, 1, 1])
    assert G.cross_edge_loss(g) == 1.0
    assert G.cross_edge_fraction(g) == 1.0


def test_cross_edge_loss_hand_counts():
    # silo 0 has 2 internal edges, silo 1 has 1, one edge crosses
    g = toy_graph(5, [(0, 1), (1, 2), (3, 4), (2, 3)], silo_of=[0, 0, 0, 1, 1])
    stats = G.silo_edge_stats(g)
    assert stats.intra_edges == (2, 1) and stats.cross_edges == 1
    assert G.cross_edge_loss(g) == pytest.approx(np.mean([1 / 3, 1 / 2]))
    assert G.cross_edge_fraction(g) == pytest.approx(1 / 4)


def test_edge_counts_add_up():
    g = G.partition_random(make_citation_graph(num_nodes=400, num_features=20, num_links=900, seed=2), 5, seed=0)
    stats = G.silo_edge_stats(g)
    assert sum(stats.intra_edges) + stats.cross_edges == g.num_edges


def test_intra_silo_graph_drops_cross_edges():
    g = path_graph()
    intra = g.intra_silo_graph()
    assert not intra.cross_mask().any()
    assert intra.num_edges == g.num_edges - 2


def test_validate_catches_bad_silo():
    g = toy_graph(3, [], silo_of=[0, 1, 1])
    g.num_silos = 1
    with pytest.raises(PartitionError):
        g.validate()
