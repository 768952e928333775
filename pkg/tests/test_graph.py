import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cagnn.graph import (BundleError, Graph, add_random_edges, load_bundle, make_synthetic,
                         patterned_mixing, save_bundle)
from cagnn.metrics import homophily_edge, neighbor_entropy


def write_bundle(path, n=3, edges="0\t1\n", labels=None, classes=2, features=None, splits=None):
    path.mkdir(parents=True, exist_ok=True)
    (path / "meta.json").write_text(json.dumps(
        {"name": "tiny", "num_nodes": n, "num_classes": classes, "feature_dim": 2}))
    (path / "edges.tsv").write_text(edges)
    (path / "features.csv").write_text(features or "".join("1.0,0.0\n" for _ in range(n)))
    (path / "labels.txt").write_text(labels or "".join(f"{i % classes}\n" for i in range(n)))
    (path / "splits.json").write_text(json.dumps(splits or [{"train": [0], "val": [1], "test": [2]}]))
    return path


edge_lists = st.integers(2, 12).flatmap(
    lambda n: st.tuples(st.just(n), st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)),
                                             max_size=40)))


class TestGraph:
    def test_single_edge_is_symmetrized(self, tmp_path):
        b = load_bundle(write_bundle(tmp_path / "b"))
        assert b.graph.has_edge(0, 1) and b.graph.has_edge(1, 0)
        assert b.graph.undirected_edge_count == 1
        assert b.graph.directed_edge_count == 2

    @given(edge_lists)
    @settings(max_examples=60, deadline=None)
    def test_from_edges_invariants(self, case):
        n, edges = case
        g = Graph.from_edges(n, edges)
        g.check()
        want = {frozenset(e) for e in edges if e[0] != e[1]}
        assert g.undirected_edge_count == len(want)
        assert {frozenset(e) for e in g.edge_array().tolist()} == want

    def test_self_loops_and_duplicates_dropped(self):
        g = Graph.from_edges(3, [(0, 0), (0, 1), (1, 0), (0, 1), (2, 1)])
        assert g.undirected_edge_count == 2
        assert not g.has_edge(0, 0)

    def test_permuted_relabels(self):
        g = Graph.from_edges(3, [(0, 1)])
        h = g.permuted(np.array([2, 0, 1]))
        assert h.has_edge(2, 0) and h.undirected_edge_count == 1

    def test_arrays_are_read_only(self):
        g = Graph.from_edges(3, [(0, 1)])
        with pytest.raises(ValueError):
            g.csr_targets[0] = 2


class TestLoadBundle:
    def test_label_out_of_range(self, tmp_path):
        with pytest.raises(BundleError, match=r"labels.txt:2: label out of range"):
            load_bundle(write_bundle(tmp_path / "b", labels="0\n2\n1\n"))

    def test_missing_file(self, tmp_path):
        p = write_bundle(tmp_path / "b")
        (p / "features.csv").unlink()
        with pytest.raises(BundleError, match="features.csv: missing file"):
            load_bundle(p)

    def test_malformed_edge_row(self, tmp_path):
        with pytest.raises(BundleError, match=r"edges.tsv:2: malformed row"):
            load_bundle(write_bundle(tmp_path / "b", edges="0\t1\n0 2\n"))

    def test_dangling_endpoint(self, tmp_path):
        with pytest.raises(BundleError, match=r"edges.tsv:1: dangling edge endpoint"):
            load_bundle(write_bundle(tmp_path / "b", edges="0\t7\n"))

    def test_malformed_feature_row(self, tmp_path):
        with pytest.raises(BundleError, match=r"features.csv:3: malformed row"):
            load_bundle(write_bundle(tmp_path / "b", features="1,0\n1,0\n1,x\n"))

    def test_overlapping_split(self, tmp_path):
        with pytest.raises(BundleError, match="overlap"):
            load_bundle(write_bundle(tmp_path / "b", splits=[{"train": [0], "val": [0], "test": [2]}]))

    def test_self_loop_in_file_dropped(self, tmp_path):
        b = load_bundle(write_bundle(tmp_path / "b", edges="0\t0\n1\t2\n2\t1\n"))
        assert b.graph.undirected_edge_count == 1

    def test_round_trip(self, tmp_path):
        b = make_synthetic("patterned", 20, 3, 4, seed=3)
        save_bundle(b, tmp_path / "rt")
        c = load_bundle(tmp_path / "rt")
        assert c.graph == b.graph
        np.testing.assert_array_equal(c.features, b.features)
        np.testing.assert_array_equal(c.labels, b.labels)
        np.testing.assert_array_equal(c.splits[0].test, b.splits[0].test)
        assert c.name == b.name


class TestAddRandomEdges:
    def test_ratio_zero_is_identity(self):
        g = Graph.from_edges(4, [(0, 1), (1, 2)])
        assert add_random_edges(g, 0.0, seed=1) == g

    def test_complete_graph_saturates(self):
        k4 = Graph.from_edges(4, list(itertools.combinations(range(4), 2)))
        with pytest.raises(ValueError, match="non-edges"):
            add_random_edges(k4, 0.25, seed=0)

    def test_path_graph_new_edges_come_from_complement(self):
        path = Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)])
        complement = {frozenset(p) for p in itertools.combinations(range(4), 2)} - {
            frozenset(e) for e in path.edge_array().tolist()}
        noisy = add_random_edges(path, 1.0, seed=11)
        added = {frozenset(e) for e in noisy.edge_array().tolist()} - {
            frozenset(e) for e in path.edge_array().tolist()}
        assert len(added) == 3
        assert added <= complement

    @given(seed=st.integers(0, 10_000), ratio=st.sampled_from([0.25, 0.5, 1.0, 2.0]))
    @settings(max_examples=30, deadline=None)
    def test_superset_and_exact_count(self, seed, ratio):
        g = make_synthetic("random-neighbor", 15, 2, 3, seed=seed % 7).graph
        noisy = add_random_edges(g, ratio, seed)
        noisy.check()
        old = {tuple(e) for e in g.edge_array().tolist()}
        new = {tuple(e) for e in noisy.edge_array().tolist()}
        assert old <= new
        assert len(new) - len(old) == int(np.floor(ratio * g.undirected_edge_count))

    def test_deterministic(self):
        g = make_synthetic("patterned", 30, 3, 4, seed=0).graph
        assert add_random_edges(g, 2.0, 5) == add_random_edges(g, 2.0, 5)

    def test_dense_regime(self):
        g = Graph.from_edges(6, [(0, 1), (2, 3), (4, 5), (0, 2), (1, 3)])
        noisy = add_random_edges(g, 2.0, seed=2)
        assert noisy.undirected_edge_count == 15

    def test_input_graph_untouched(self):
        g = Graph.from_edges(5, [(0, 1)])
        before = g.csr_targets.copy()
        add_random_edges(g, 3.0, seed=0)
        np.testing.assert_array_equal(g.csr_targets, before)


class TestSynthetic:
    def test_bipartite_has_no_intra_class_edge(self):
        b = make_synthetic("bipartite", 50, 2, 6, seed=0)
        assert homophily_edge(b.graph, b.labels) == 0.0

    def test_pure_homophily(self):
        b = make_synthetic("pure-homophily", 50, 4, 6, seed=0)
        assert homophily_edge(b.graph, b.labels) == 1.0

    @pytest.mark.parametrize("kind,c", [("pure-homophily", 3), ("bipartite", 2),
                                        ("random-neighbor", 4), ("patterned", 3)])
    def test_reproducible_and_valid(self, kind, c):
        a = make_synthetic(kind, 40, c, 5, seed=9)
        b = make_synthetic(kind, 40, c, 5, seed=9)
        a.graph.check()
        assert a.graph == b.graph
        np.testing.assert_array_equal(a.features, b.features)
        assert a.graph.degrees.max() <= 5

    def test_split_is_stratified_48_32_20(self):
        b = make_synthetic("patterned", 100, 3, 5, seed=0)
        sp = b.splits[0]
        for k in range(3):
            assert np.sum(b.labels[sp.train] == k) == 48
            assert np.sum(b.labels[sp.val] == k) == 32
            assert np.sum(b.labels[sp.test] == k) == 20

    def test_features_are_noisy_one_hot(self):
        b = make_synthetic("patterned", 500, 3, 5, seed=0)
        resid = b.features - np.eye(3)[b.labels]
        assert resid.std() == pytest.approx(0.1, rel=0.05)

    def test_patterned_mixing_symmetric_doubly_stochastic(self):
        m = patterned_mixing(5)
        np.testing.assert_allclose(m, m.T)
        np.testing.assert_allclose(m.sum(axis=0), 1.0)
        np.testing.assert_allclose(m.sum(axis=1), 1.0)
        assert len({tuple(r) for r in m}) == 5

    @pytest.mark.parametrize("args", [
        ("bipartite", 10, 3, 2), ("patterned", 10, 2, 2), ("hexagonal", 10, 3, 2),
        ("random-neighbor", 2, 2, 4), ("random-neighbor", 10, 2, 0)])
    def test_inadmissible(self, args):
        with pytest.raises(ValueError):
            make_synthetic(*args, seed=0)

    def test_random_neighbor_entropy_is_high_at_low_degree(self):
        b = make_synthetic("random-neighbor", 2000, 5, 4, seed=0)
        h, _, _ = neighbor_entropy(b.graph, b.labels, 5)
        assert h >= 0.95
