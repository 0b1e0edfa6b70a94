import numpy as np
import pytest

from counterlink.errors import ConfigError
from counterlink.synth import (
    SyntheticGraphSpec,
    ba_edges,
    near_equal_blocks,
    synth_graph,
    write_graph_files,
)


def reference_ba(n, m, seed):
    """Independent preferential-attachment build with the same seed-graph
    convention (complete graph on m nodes, m distinct targets per arrival),
    used to cross-check edge accounting."""
    rng = np.random.default_rng(seed)
    edges = set()
    degree = [0] * n
    for i in range(m):
        for j in range(i + 1, m):
            edges.add((i, j))
            degree[i] += 1
            degree[j] += 1
    for new in range(m, n):
        chosen = set()
        while len(chosen) < m:
            weights = np.array(degree[:new], dtype=float)
            if weights.sum() == 0:
                pick = int(rng.integers(0, new))
            else:
                pick = int(rng.choice(new, p=weights / weights.sum()))
            chosen.add(pick)
        for t in chosen:
            edges.add((min(t, new), max(t, new)))
            degree[t] += 1
            degree[new] += 1
    return len(edges)


class TestSpecValidation:
    def test_small_n_rejected(self):
        with pytest.raises(ConfigError):
            SyntheticGraphSpec(family="er", n=5)

    def test_bad_family(self):
        with pytest.raises(ConfigError):
            SyntheticGraphSpec(family="torus", n=20)

    def test_bad_probabilities(self):
        with pytest.raises(ConfigError):
            SyntheticGraphSpec(family="sbm", n=20, p_in=1.5)
        with pytest.raises(ConfigError):
            SyntheticGraphSpec(family="er", n=20, p=-0.1)

    def test_bad_ba_m(self):
        with pytest.raises(ConfigError):
            SyntheticGraphSpec(family="ba", n=20, m=0)


class TestDeterminism:
    def test_sbm_twice_identical_files(self, tmp_path):
        spec = SyntheticGraphSpec(family="sbm", n=100, blocks=2, p_in=0.5,
                                  p_out=0.01, seed=7)
        for tag in ("a", "b"):
            g = synth_graph(spec)
            write_graph_files(g, tmp_path / f"edges_{tag}.tsv",
                              tmp_path / f"feats_{tag}.csv")
        assert (tmp_path / "edges_a.tsv").read_bytes() == (tmp_path / "edges_b.tsv").read_bytes()
        assert (tmp_path / "feats_a.csv").read_bytes() == (tmp_path / "feats_b.csv").read_bytes()

    def test_seed_changes_output(self):
        a = synth_graph(SyntheticGraphSpec(family="er", n=40, p=0.2, seed=1))
        b = synth_graph(SyntheticGraphSpec(family="er", n=40, p=0.2, seed=2))
        assert not np.array_equal(a.edges(), b.edges())


class TestFamilies:
    def test_er_p_zero_warns_and_succeeds(self):
        with pytest.warns(UserWarning, match="empty edge list"):
            g = synth_graph(SyntheticGraphSpec(family="er", n=50, p=0.0,
                                               feature_mode="constant:4"))
        assert g.edge_count == 0
        assert g.num_nodes == 50

    def test_ba_edge_count_matches_reference_accounting(self):
        g = synth_graph(SyntheticGraphSpec(family="ba", n=100, m=2,
                                           feature_mode="constant:4", seed=3))
        assert g.edge_count == 2 * (100 - 2) + 1
        assert g.edge_count == reference_ba(100, 2, 3)

    def test_ba_every_new_node_adds_m_edges(self):
        rng = np.random.default_rng(0)
        for m in (1, 2, 3):
            edges = ba_edges(30, m, rng)
            assert edges.shape[0] == m * (m - 1) // 2 + m * (30 - m)

    def test_sbm_block_structure(self):
        g = synth_graph(SyntheticGraphSpec(family="sbm", n=100, blocks=2,
                                           p_in=0.4, p_out=0.0, seed=5,
                                           feature_mode="constant:2"))
        for u, v in g.edges():
            assert (u < 50) == (v < 50)

    def test_near_equal_blocks(self):
        assert near_equal_blocks(10, 3) == [4, 3, 3]
        assert sum(near_equal_blocks(101, 4)) == 101


class TestFeatures:
    def test_degree_onehot_mode(self):
        g = synth_graph(SyntheticGraphSpec(family="er", n=30, p=0.2,
                                           feature_mode="degree-onehot:8", seed=2))
        assert g.features.shape == (30, 8)
        deg = g.degrees()
        assert all(g.features[i, min(int(deg[i]), 7)] == 1.0 for i in range(30))

    def test_node_onehot_mode(self):
        g = synth_graph(SyntheticGraphSpec(family="er", n=20, p=0.2,
                                           feature_mode="node-onehot", seed=2))
        assert np.array_equal(g.features, np.eye(20))
