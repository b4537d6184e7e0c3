"""k-means contract, budget arithmetic, centers, and propagation."""

import numpy as np
import pytest

from milliseg.clustering import (
    Clustering,
    ClusterBudget,
    budget_to_k,
    cluster_centers,
    cluster_frame,
    kmeans,
    load_clustering,
    propagate_labels,
    save_clustering,
    with_center_points,
)
from milliseg.datamodel import SOURCE_CLICKED, UNLABELED, Frame
from milliseg.errors import (
    BadKError,
    EmptyClusterError,
    LengthMismatchError,
    MalformedFileError,
)


def blobs(rng, means, per_blob, std):
    means = np.asarray(means, dtype=float)
    xs, ys = [], []
    for c, mu in enumerate(means):
        xs.append(mu + std * rng.standard_normal((per_blob, means.shape[1])))
        ys.append(np.full(per_blob, c))
    return np.vstack(xs), np.concatenate(ys)


class TestBudgetToK:
    def test_alpha_dominates(self):
        b = ClusterBudget(alpha=0.01)
        assert budget_to_k(b, 100000, 19) == 1000

    def test_floor_dominates(self):
        b = ClusterBudget(alpha=0.0001)
        assert budget_to_k(b, 100000, 19) == 190

    def test_clamped_to_frame(self):
        b = ClusterBudget(alpha=0.01)
        assert budget_to_k(b, 50, 19) == 50

    def test_click_budget_derives_alpha(self):
        b = ClusterBudget(clicks=500, total_points=50000)
        assert b.alpha == pytest.approx(0.01)
        assert budget_to_k(b, 10000, 4) == 100

    def test_ceiling_is_exact_for_decimal_alpha(self):
        # 0.01 * 300 must give 3 clusters, not 4 via float dust.
        assert budget_to_k(ClusterBudget(alpha=0.01, min_factor=1), 300, 1) == 3
        assert budget_to_k(ClusterBudget(alpha=0.01, min_factor=1), 301, 1) == 4

    def test_bad_alpha(self):
        with pytest.raises(BadKError):
            ClusterBudget(alpha=0.0)
        with pytest.raises(BadKError):
            ClusterBudget(alpha=1.5)


class TestKMeans:
    def test_k_equals_m(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((12, 4))
        res = kmeans(x, 12, seed=1)
        assert sorted(res.assignments) == list(range(12))
        assert res.objective_trace[-1] <= 1e-9
        got = res.centroids[np.lexsort(res.centroids.T)]
        exp = x[np.lexsort(x.T)]
        np.testing.assert_allclose(got, exp, atol=1e-12)

    def test_k_one_is_the_mean(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((50, 3))
        res = kmeans(x, 1, seed=0)
        np.testing.assert_allclose(res.centroids[0], x.mean(axis=0), rtol=1e-12)

    def test_three_blobs_recovered_exactly(self):
        rng = np.random.default_rng(2)
        x, y = blobs(rng, np.eye(3) * 20.0, per_blob=100, std=1.0)
        res = kmeans(x, 3, seed=3)
        # label-match clusters to blobs, then demand identical membership
        for c in range(3):
            members = y[res.assignments == c]
            assert members.size > 0
            assert np.all(members == members[0])

    def test_objective_non_increasing(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((200, 5))
        res = kmeans(x, 10, seed=4)
        trace = np.array(res.objective_trace)
        assert np.all(np.diff(trace) <= 1e-8 * np.maximum(1.0, trace[:-1]))

    def test_deterministic_for_seed(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((100, 6))
        a = kmeans(x, 7, seed=99)
        b = kmeans(x, 7, seed=99)
        np.testing.assert_array_equal(a.assignments, b.assignments)
        np.testing.assert_array_equal(a.centroids, b.centroids)
        assert a.objective_trace == b.objective_trace

    def test_duplicate_points_still_fill_every_cluster(self):
        # Only 3 distinct locations but k=5: seeding must reuse locations and
        # the first assignment leaves clusters empty until repair moves points in.
        x = np.repeat(np.eye(3), 10, axis=0)
        res = kmeans(x, 5, seed=0)
        counts = np.bincount(res.assignments, minlength=5)
        assert counts.min() >= 1

    def test_bad_k(self):
        x = np.zeros((5, 2))
        with pytest.raises(BadKError):
            kmeans(x, 0, seed=0)
        with pytest.raises(BadKError):
            kmeans(x, 6, seed=0)


class TestClusterCenters:
    def test_singleton_cluster(self):
        x = np.array([[1.0, 1.0]])
        res = kmeans(x, 1, seed=0)
        assert list(cluster_centers(res, x)) == [0]

    def test_tie_goes_to_lowest_index(self):
        x = np.array([[0.0, 0.0], [2.0, 0.0]])
        clustering = Clustering(
            assignments=np.zeros(2, dtype=np.uint32),
            centroids=np.array([[1.0, 0.0]]),
        )
        assert list(cluster_centers(clustering, x)) == [0]

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((80, 4))
        res = kmeans(x, 6, seed=6)
        centers = cluster_centers(res, x)
        for c in range(6):
            members = np.flatnonzero(res.assignments == c)
            dists = [float(np.sum((x[i] - res.centroids[c]) ** 2)) for i in members]
            best = members[int(np.argmin(dists))]
            assert centers[c] == best
            assert res.assignments[centers[c]] == c


class TestPropagateLabels:
    def test_k_equals_m_everything_clicked(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((9, 3))
        res = with_center_points(kmeans(x, 9, seed=7), x)
        labels = rng.integers(0, 4, size=9).astype(np.uint32)
        center_labels = labels[res.center_points]
        pl = propagate_labels(res, center_labels, frame_id="f")
        np.testing.assert_array_equal(pl.labels, labels)
        assert np.all(pl.source == SOURCE_CLICKED)
        assert pl.num_clicked == 9

    def test_uniform_center_labels(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((40, 3))
        res = with_center_points(kmeans(x, 5, seed=8), x)
        pl = propagate_labels(res, np.zeros(5, dtype=np.uint32), frame_id="f")
        assert np.all(pl.labels == 0)
        assert pl.num_clicked == 5

    def test_separable_blobs_pure_clusters(self):
        rng = np.random.default_rng(8)
        x, y = blobs(rng, [[0.0, 0.0], [30.0, 0.0]], per_blob=150, std=1.0)
        res = with_center_points(kmeans(x, 2, seed=9), x)
        center_labels = y[res.center_points].astype(np.uint32)
        pl = propagate_labels(res, center_labels, frame_id="f")
        assert np.mean(pl.labels == y) == 1.0

    def test_center_keeps_its_own_label(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((60, 4))
        res = with_center_points(kmeans(x, 8, seed=10), x)
        center_labels = rng.integers(0, 3, size=8).astype(np.uint32)
        pl = propagate_labels(res, center_labels, frame_id="f")
        for c in range(8):
            assert pl.labels[res.center_points[c]] == center_labels[c]

    def test_click_count_equals_k(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((100, 3))
        res = with_center_points(kmeans(x, 13, seed=11), x)
        pl = propagate_labels(res, np.ones(13, dtype=np.uint32), frame_id="f")
        assert pl.num_clicked == 13

    def test_length_mismatch(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((20, 3))
        res = with_center_points(kmeans(x, 4, seed=12), x)
        with pytest.raises(LengthMismatchError):
            propagate_labels(res, np.zeros(5, dtype=np.uint32))
        with pytest.raises(LengthMismatchError):
            propagate_labels(res, np.full(4, UNLABELED, dtype=np.uint32))


class TestPurityUnderSeparation:
    def test_four_sigma_mixture_better_than_99(self):
        # Between-class distance 4x the RMS within-class deviation (std * sqrt(D));
        # over 20 clustering seeds, propagation should essentially never miss.
        rng = np.random.default_rng(12)
        means = np.zeros((4, 16))
        for c in range(4):
            means[c, c] = 4.0 * np.sqrt(16.0 / 2.0)
        x, y = blobs(rng, means, per_blob=500, std=1.0)
        accs = []
        for seed in range(20):
            res = with_center_points(kmeans(x, 40, seed=seed), x)
            pl = propagate_labels(res, y[res.center_points].astype(np.uint32))
            per_class = [
                np.mean(pl.labels[y == c] == c) for c in range(4)
            ]
            accs.append(np.mean(per_class))
        assert np.mean(accs) >= 0.99

    def test_beats_random_labeling(self):
        rng = np.random.default_rng(13)
        means = np.zeros((4, 16))
        for c in range(4):
            means[c, c] = 4.0 * np.sqrt(16.0 / 2.0)
        x, y = blobs(rng, means, per_blob=300, std=1.0)
        prop_accs, rand_accs = [], []
        for seed in range(20):
            res = with_center_points(kmeans(x, 40, seed=seed), x)
            pl = propagate_labels(res, y[res.center_points].astype(np.uint32))
            prop_accs.append(np.mean(pl.labels == y))
            rand = np.random.default_rng(1000 + seed).integers(0, 4, size=y.size)
            rand_accs.append(np.mean(rand == y))
        assert min(prop_accs) > max(rand_accs)


class TestClusteringFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((50, 4))
        res = with_center_points(kmeans(x, 6, seed=15), x)
        p = tmp_path / "c.mlnc"
        save_clustering(res, p)
        back = load_clustering(p, features=x)
        np.testing.assert_array_equal(back.assignments, res.assignments)
        np.testing.assert_array_equal(back.center_points, res.center_points)
        np.testing.assert_allclose(back.centroids, res.centroids, rtol=1e-12)

    def test_malformed(self, tmp_path):
        p = tmp_path / "bad.mlnc"
        p.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(MalformedFileError):
            load_clustering(p)


class TestClusterFrame:
    def test_coords_ablation_clusters_geometry(self):
        rng = np.random.default_rng(15)
        feats = rng.standard_normal((100, 8)).astype(np.float32)
        points = np.vstack(
            [rng.standard_normal((50, 3)) + [0, 0, 0], rng.standard_normal((50, 3)) + [100, 0, 0]]
        ).astype(np.float32)
        frame = Frame("f", "s", points, feats)
        res = cluster_frame(frame, ClusterBudget(alpha=0.02, min_factor=1), 2, seed=0, use_coords=True)
        # with k=2 on coordinates, the two spatial blobs separate perfectly
        left = res.assignments[:50]
        right = res.assignments[50:]
        assert np.all(left == left[0]) and np.all(right == right[0]) and left[0] != right[0]
