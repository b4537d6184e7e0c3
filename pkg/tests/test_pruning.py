"""Cosine similarity and the sequence-pruning sweep."""

import numpy as np
import pytest

from milliseg.datamodel import FrameDescriptor
from milliseg.errors import DimMismatchError, EmptySequenceError, ZeroVectorError
from milliseg.pruning import PruneConfig, cosine_similarity, prune_sequence


def descs(vectors):
    return [FrameDescriptor(f"f{i}", np.asarray(v, dtype=float)) for i, v in enumerate(vectors)]


class TestCosineSimilarity:
    def test_identical(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 1.0

    def test_orthogonal(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_hand_computed(self):
        # 32 / (sqrt(14) * sqrt(77)) worked out by hand
        got = cosine_similarity(np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0]))
        assert abs(got - 0.9746318461970762) < 1e-6

    def test_clamped_to_unit_interval(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            v = rng.standard_normal(5)
            s = cosine_similarity(v, v * float(rng.uniform(0.1, 10)))
            assert -1.0 <= s <= 1.0

    def test_zero_vector(self):
        with pytest.raises(ZeroVectorError):
            cosine_similarity(np.zeros(3), np.ones(3))

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatchError):
            cosine_similarity(np.ones(3), np.ones(4))


class TestPruneSequence:
    def test_identical_frames_keep_first_only(self):
        d = descs([[1.0, 2.0]] * 100)
        assert prune_sequence(d, PruneConfig(tau=0.9)) == [0]

    def test_orthogonal_frames_all_kept(self):
        d = descs(np.eye(8))
        assert prune_sequence(d, PruneConfig(tau=0.9)) == list(range(8))

    def test_three_frame_sweep_trace(self):
        # cos(a, b) ~ 0.990 >= tau so b drops; cos(a, c) = 0 < tau so c is
        # kept and becomes the base.
        a = [1.0, 0.0]
        b = [0.99, 0.141]
        c = [0.0, 1.0]
        assert cosine_similarity(np.array(a), np.array(b)) > 0.95
        assert prune_sequence(descs([a, b, c]), PruneConfig(tau=0.95)) == [0, 2]

    def test_tau_minus_one_keeps_only_first(self):
        rng = np.random.default_rng(1)
        d = descs(rng.standard_normal((30, 6)))
        assert prune_sequence(d, PruneConfig(tau=-1.0)) == [0]

    def test_tau_one_keeps_everything_not_exactly_equal(self):
        rng = np.random.default_rng(2)
        vecs = rng.standard_normal((30, 6))
        d = descs(vecs)
        kept = prune_sequence(d, PruneConfig(tau=1.0))
        expect = [0]
        base = vecs[0]
        for i in range(1, 30):
            if cosine_similarity(base, vecs[i]) < 1.0:
                expect.append(i)
                base = vecs[i]
        assert kept == expect

    def test_deterministic_across_runs(self):
        rng = np.random.default_rng(3)
        d = descs(rng.standard_normal((50, 4)))
        cfg = PruneConfig(tau=0.5)
        runs = [prune_sequence(d, cfg) for _ in range(5)]
        assert all(r == runs[0] for r in runs)

    def test_first_frame_always_kept(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            d = descs(rng.standard_normal((int(rng.integers(1, 20)), 3)))
            kept = prune_sequence(d, PruneConfig(tau=float(rng.uniform(-1, 1))))
            assert kept[0] == 0
            assert kept == sorted(set(kept))

    def test_empty_sequence(self):
        with pytest.raises(EmptySequenceError):
            prune_sequence([], PruneConfig(tau=0.5))

    def test_tau_out_of_range(self):
        with pytest.raises(ValueError):
            PruneConfig(tau=1.5)
        with pytest.raises(ValueError):
            PruneConfig(tau=float("nan"))
