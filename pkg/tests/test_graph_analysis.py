import itertools

import numpy as np
import pytest

from dccm import graph_analysis as ga
from dccm.errors import DimensionError


def weight_matrix(n, seed):
    """Random symmetric matrix with pairwise-distinct off-diagonal weights."""
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    w = rng.permutation(len(iu)) / (len(iu) + 1.0) + rng.uniform(0, 0.5 / (len(iu) + 1))
    m = np.ones((n, n))
    m[iu, ju] = w
    m[ju, iu] = w
    return m


def components_oracle(m, t):
    """Connected components of {edges with weight > t} by exhaustive BFS."""
    n = m.shape[0]
    seen, comps = set(), 0
    for start in range(n):
        if start in seen:
            continue
        comps += 1
        stack = [start]
        while stack:
            u = stack.pop()
            if u in seen:
                continue
            seen.add(u)
            for v in range(n):
                if v != u and m[u, v] > t and v not in seen:
                    stack.append(v)
    return comps


THREE_NODE = np.array(
    [
        [1.0, 0.9, 0.2],
        [0.9, 1.0, 0.5],
        [0.2, 0.5, 1.0],
    ]
)


class TestSweep:
    def test_three_node_example(self):
        sweep = ga.threshold_partition_sweep(THREE_NODE)
        assert sweep.count_at(0.3) == 1
        assert sweep.count_at(0.7) == 2
        assert sweep.count_at(0.95) == 3

    def test_extremes(self):
        sweep = ga.threshold_partition_sweep(weight_matrix(6, 0))
        assert sweep.count_at(sweep.weights[0] - 1e-6) == 1
        assert sweep.count_at(sweep.weights[-1]) == 6

    def test_counts_monotone(self):
        for seed in range(20):
            sweep = ga.threshold_partition_sweep(weight_matrix(7, seed))
            assert np.all(np.diff(sweep.counts) >= 0)
            assert sweep.counts[0] == 1 and sweep.counts[-1] == 7

    def test_matches_bfs_oracle(self):
        for seed in range(10):
            m = weight_matrix(6, seed + 100)
            sweep = ga.threshold_partition_sweep(m)
            for t in np.linspace(0.0, 1.0, 23):
                assert sweep.count_at(t) == components_oracle(m, t), (seed, t)

    def test_tie_perturbation_flagged(self):
        m = np.ones((3, 3)) * 0.5
        np.fill_diagonal(m, 1.0)
        sweep = ga.threshold_partition_sweep(m)
        assert sweep.ties_perturbed
        assert sweep.counts[0] == 1 and sweep.counts[-1] == 3

    def test_single_node(self):
        sweep = ga.threshold_partition_sweep(np.array([[1.0]]))
        assert sweep.counts.tolist() == [1]

    def test_empty_rejected(self):
        with pytest.raises(DimensionError):
            ga.threshold_partition_sweep(np.zeros((0, 0)))


class TestFindKPartition:
    def test_three_node_k2_smallest(self):
        sweep = ga.threshold_partition_sweep(THREE_NODE)
        t = ga.find_k_partition_threshold(sweep, 2)
        assert t == pytest.approx(0.5, abs=1e-9)
        assert sweep.count_at(t) == 2

    def test_k1_below_min_weight(self):
        sweep = ga.threshold_partition_sweep(THREE_NODE)
        t = ga.find_k_partition_threshold(sweep, 1)
        assert t < sweep.weights[0]

    def test_kn_at_max_weight(self):
        sweep = ga.threshold_partition_sweep(THREE_NODE)
        t = ga.find_k_partition_threshold(sweep, 3)
        assert t == pytest.approx(0.9, abs=1e-9)

    def test_every_k_reachable_with_distinct_weights(self):
        # the existence claim, against the exhaustive interval oracle
        for seed in range(15):
            n = int(np.random.default_rng(seed).integers(2, 11))
            m = weight_matrix(n, seed + 7)
            sweep = ga.threshold_partition_sweep(m)
            for k in range(1, n + 1):
                t = ga.find_k_partition_threshold(sweep, k)
                assert t is not None
                assert components_oracle(m, t) == k

    def test_partition_exposed(self):
        sweep = ga.threshold_partition_sweep(THREE_NODE)
        part = ga.sweep_partition(sweep, 2)
        assert part.num_clusters == 2
        assert part.assignment[0] == part.assignment[1] != part.assignment[2]

    def test_k_out_of_range(self):
        sweep = ga.threshold_partition_sweep(THREE_NODE)
        with pytest.raises(ValueError):
            ga.find_k_partition_threshold(sweep, 4)


class TestVerifyOneHot:
    def test_clear_cases(self):
        frac, flags = ga.verify_one_hot(np.array([[1.0, 0.0, 0.0]]), tol=0.05)
        assert frac == 1.0 and flags[0]
        frac, _ = ga.verify_one_hot(np.array([[0.5, 0.5]]), tol=0.05)
        assert frac == 0.0

    def test_mixed_batch(self):
        z = np.array([[1.0, 0.0], [0.5, 0.5]])
        frac, flags = ga.verify_one_hot(z, tol=0.05)
        assert frac == 0.5
        assert flags.tolist() == [True, False]


class TestBcubedCurve:
    def test_perfect_similarity(self):
        truth = np.array([0, 0, 1, 1])
        s = (truth[:, None] == truth[None, :]).astype(float)
        for t, p, r in ga.bcubed_curve(s, truth, [0.1, 0.5, 0.9]):
            assert p == pytest.approx(1.0)
            assert r == pytest.approx(1.0)

    def test_high_threshold_self_edges_only(self):
        rng = np.random.default_rng(5)
        s = rng.uniform(0, 0.8, (5, 5))
        s = (s + s.T) / 2
        np.fill_diagonal(s, 1.0)
        rows = ga.bcubed_curve(s, [0, 0, 1, 1, 2], [0.99])
        assert rows[0][1] == pytest.approx(1.0)  # self-pairs are always correct

    def test_all_ones_graph(self):
        s = np.ones((4, 4))
        [(_, p, r)] = ga.bcubed_curve(s, [0, 0, 1, 1], [0.5])
        assert p == pytest.approx(0.5)
        assert r == pytest.approx(1.0)

    def test_empty_threshold_list(self):
        with pytest.raises(ValueError):
            ga.bcubed_curve(np.eye(3), [0, 1, 2], [])

    def test_precision_tendency_on_random_instances(self):
        # not guaranteed in general; flag rather than assert per instance
        rng = np.random.default_rng(6)
        violations = 0
        for _ in range(10):
            truth = rng.integers(0, 3, size=12)
            s = 0.5 * (truth[:, None] == truth[None, :]) + rng.uniform(0, 0.5, (12, 12))
            s = (s + s.T) / 2
            np.fill_diagonal(s, 1.0)
            rows = ga.bcubed_curve(s, truth, [0.3, 0.5, 0.7, 0.9])
            precisions = [p for _, p, _ in rows]
            recalls = [r for _, _, r in rows]
            if any(np.diff(precisions) < -1e-12):
                violations += 1
            assert np.all(np.diff(recalls) <= 1e-12)  # recall does shrink
        assert violations <= 5


class TestConcentrationHistogram:
    def test_uniform_rows_in_first_bin(self):
        z = np.full((7, 10), 0.1)
        edges, counts = ga.concentration_histogram(z)
        assert counts[0] == 7 and counts[1:].sum() == 0

    def test_one_hot_rows_in_last_bin(self):
        z = np.eye(10)[np.array([0, 3, 5])]
        edges, counts = ga.concentration_histogram(z)
        assert counts[-1] == 3 and counts[:-1].sum() == 0

    def test_nine_bins_for_ten_classes(self):
        edges, counts = ga.concentration_histogram(np.full((2, 10), 0.1))
        assert len(counts) == 9
        assert edges[0] == pytest.approx(0.1)
        assert edges[-1] == pytest.approx(1.0)

    def test_bin_count_adapts_to_k(self):
        _, counts4 = ga.concentration_histogram(np.full((2, 4), 0.25))
        assert len(counts4) == 8  # [0.25, 0.3) then deciles up to 1.0
        _, counts2 = ga.concentration_histogram(np.full((2, 2), 0.5))
        assert len(counts2) == 5

    def test_total_mass_preserved(self):
        rng = np.random.default_rng(8)
        e = np.exp(rng.normal(size=(40, 10), scale=2.0))
        z = e / e.sum(axis=1, keepdims=True)
        _, counts = ga.concentration_histogram(z)
        assert counts.sum() == 40
