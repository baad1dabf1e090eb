import numpy as np
import pytest

from hgm_ehr.graph import (NodeId, NodeType, all_nodes, build_graph, dump_jsonl, multi_hot,
                           neighbors)
from hgm_ehr.ingest import GenConfig, generate_synthetic, synthetic_vocabulary

from conftest import make_record, toy_vocab


def ph(p, h):
    return NodeId(NodeType.PATIENT_HOUR, (p, h))


class TestBuildGraph:
    def test_node_and_edge_counts(self):
        records = [make_record("p0", [], {1, 2})]
        graph = build_graph(records, toy_vocab(3, 4), 6)
        assert graph.n_patients == 1
        assert graph.xp.shape == (6, 3)
        assert graph.diagnosed_adj[0] == {1, 2}
        # diagnoses attach at patient level, shared by every hour node
        for hour in range(6):
            assert [n.index for n in neighbors(graph, ph(0, hour), NodeType.DIAGNOSIS)] == [1, 2]

    def test_tested_edges_exact(self):
        records = [make_record("p0", [(2.5, 3, 7.0)], set())]
        graph = build_graph(records, toy_vocab(5, 2), 6)
        expected = {(p, h): set() for p in range(1) for h in range(6)}
        expected[(0, 2)] = {3}
        assert graph.tested_adj == expected
        assert graph.tested_rev[3] == {(0, 2)}

    def test_corpus_scale_vocabulary_counts(self):
        vocab = toy_vocab(409, 3387)
        graph = build_graph([make_record("p0", [], set())], vocab, 6)
        assert graph.n_labs == 409
        assert graph.n_diagnoses == 3387

    def test_xp_mirrors_snapshots(self):
        records = [make_record("p0", [(1.2, 0, 2.0), (1.9, 0, 4.0)], set())]
        graph = build_graph(records, toy_vocab(2, 1), 3)
        assert graph.x_patient_hour(0, 1)[0] == pytest.approx(3.0)
        assert graph.observed[graph.ph_row(0, 1), 0]

    def test_transpose_consistency_random(self):
        cfg = GenConfig(n_patients=15, n_labs=8, n_diagnoses=10, window_hours=4)
        records = generate_synthetic(cfg, seed=7)
        graph = build_graph(records, synthetic_vocabulary(cfg), 4)
        for key, labs in graph.tested_adj.items():
            for lab in labs:
                assert key in graph.tested_rev[lab]
        for lab, keys in graph.tested_rev.items():
            for key in keys:
                assert lab in graph.tested_adj[key]
        for p, dxs in graph.diagnosed_adj.items():
            for dx in dxs:
                assert p in graph.diagnosed_rev[dx]
        for dx, ps in graph.diagnosed_rev.items():
            for p in ps:
                assert dx in graph.diagnosed_adj[p]
        # tested_adj mirrors the observation masks exactly
        for (p, h), labs in graph.tested_adj.items():
            assert labs == set(np.flatnonzero(graph.observed[graph.ph_row(p, h)]).tolist())

    def test_order_independence(self):
        cfg = GenConfig(n_patients=10, n_labs=5, n_diagnoses=6, window_hours=3)
        records = generate_synthetic(cfg, seed=3)
        vocab = synthetic_vocabulary(cfg)
        g1 = build_graph(records, vocab, 3)
        g2 = build_graph(records[::-1], vocab, 3)

        def keyed(graph):
            tested = {(graph.patient_ids[p], h): labs for (p, h), labs in graph.tested_adj.items()}
            diagnosed = {graph.patient_ids[p]: dxs for p, dxs in graph.diagnosed_adj.items()}
            return tested, diagnosed

        assert keyed(g1) == keyed(g2)

    def test_temporal_links_only_consecutive_hours(self):
        graph = build_graph([make_record("p0", [], set())], toy_vocab(), 4)
        assert graph.temporal_next == {(0, 1): (0, 0), (0, 2): (0, 1), (0, 3): (0, 2)}


class TestMultiHot:
    def test_basic(self):
        assert multi_hot({1, 3}, 5).tolist() == [0, 1, 0, 1, 0]

    def test_empty(self):
        assert multi_hot(set(), 4).tolist() == [0, 0, 0, 0]

    def test_full_width_all_ones(self):
        vec = multi_hot(set(range(409)), 409)
        assert vec.shape == (409,)
        assert np.all(vec == 1.0)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            multi_hot({4}, 4)

    def test_support_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            size = int(rng.integers(1, 30))
            idx = set(rng.choice(size, size=rng.integers(0, size), replace=False).tolist())
            assert set(np.flatnonzero(multi_hot(idx, size)).tolist()) == idx


class TestNeighbors:
    def test_no_observed_labs_gives_empty(self):
        graph = build_graph([make_record("p0", [], {0})], toy_vocab(), 2)
        assert neighbors(graph, ph(0, 0), NodeType.LAB) == []

    def test_shared_diagnosis_copatients(self, shared_dx_graph):
        graph, _, _ = shared_dx_graph
        got = neighbors(graph, ph(0, 0), NodeType.PATIENT_HOUR)
        indices = {n.index for n in got}
        # p1 shares diagnosis 1 with p0: all of p1's hours appear; p2 shares nothing
        assert (1, 0) in indices and (1, 1) in indices
        assert not any(q == 2 for q, _ in indices)
        assert not any(q == 0 for q, _ in indices)  # own patient excluded

    def test_temporal_neighbor_included(self):
        graph = build_graph([make_record("p0", [], {0})], toy_vocab(), 6)
        got = neighbors(graph, ph(0, 3), NodeType.PATIENT_HOUR)
        assert NodeId(NodeType.PATIENT_HOUR, (0, 2)) in got

    def test_lab_reverse_neighbors(self):
        records = [make_record("p0", [(0.5, 1, 2.0)], set()),
                   make_record("p1", [(1.5, 1, 3.0)], set())]
        graph = build_graph(records, toy_vocab(), 2)
        got = neighbors(graph, NodeId(NodeType.LAB, 1), NodeType.PATIENT_HOUR)
        assert [n.index for n in got] == [(0, 0), (1, 1)]

    def test_diagnosis_neighbors_are_all_patient_hours(self):
        records = [make_record("p0", [], {2}), make_record("p1", [], {0})]
        graph = build_graph(records, toy_vocab(), 2)
        got = neighbors(graph, NodeId(NodeType.DIAGNOSIS, 2), NodeType.PATIENT_HOUR)
        assert [n.index for n in got] == [(0, 0), (0, 1)]


def test_all_nodes_covers_every_type(toy_graph):
    graph, _, _ = toy_graph
    nodes = all_nodes(graph)
    assert len(nodes) == 2 * 2 + 3 + 3
    assert len({n for n in nodes}) == len(nodes)


def test_dump_jsonl_writes_lines(tmp_path, toy_graph):
    graph, _, _ = toy_graph
    out = tmp_path / "graph.jsonl"
    dump_jsonl(graph, out)
    lines = out.read_text().strip().splitlines()
    assert len(lines) > 10
