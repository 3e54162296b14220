import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lpmt.core import FeatureSet, PipelineConfig, Ranking, euclidean_distance_matrix, ground_cost


class TestFeatureSet:
    def test_widens_and_freezes(self):
        fs = FeatureSet.from_array(np.ones((2, 3), dtype=np.float32))
        assert fs.data.dtype == np.float64
        assert (fs.n, fs.d) == (2, 3)
        with pytest.raises(ValueError):
            fs.data[0, 0] = 2.0

    def test_rejects_non_finite_naming_row(self):
        data = np.zeros((3, 2))
        data[2, 1] = np.nan
        with pytest.raises(ValueError, match="row 2"):
            FeatureSet.from_array(data)

    def test_rejects_duplicate_ids(self):
        with pytest.raises(ValueError, match="duplicate instance id 'a'"):
            FeatureSet(("a", "b", "a"), np.zeros((3, 1)))

    @pytest.mark.parametrize("shape", [(0, 3), (3, 0), (3,)])
    def test_rejects_bad_shapes(self, shape):
        with pytest.raises(ValueError):
            FeatureSet.from_array(np.zeros(shape))

    def test_id_count_must_match(self):
        with pytest.raises(ValueError, match="2 ids"):
            FeatureSet(("a", "b"), np.zeros((3, 1)))

    def test_index_and_subset(self):
        fs = FeatureSet(("x", "y", "z"), np.arange(6.0).reshape(3, 2))
        assert fs.index_of("z") == 2
        with pytest.raises(KeyError):
            fs.index_of("w")
        sub = fs.subset([2, 0])
        assert sub.ids == ("z", "x")
        np.testing.assert_array_equal(sub.data, [[4, 5], [0, 1]])

    def test_l2_normalized_leaves_zero_rows(self):
        fs = FeatureSet.from_array([[3.0, 4.0], [0.0, 0.0]])
        np.testing.assert_allclose(fs.l2_normalized().data, [[0.6, 0.8], [0.0, 0.0]])


class TestRanking:
    def test_scores_must_be_sorted(self):
        with pytest.raises(ValueError, match="non-decreasing"):
            Ranking("q", ("a", "b"), [2.0, 1.0])

    def test_lengths_must_match(self):
        with pytest.raises(ValueError):
            Ranking("q", ("a",), [1.0, 2.0])


class TestEuclideanDistance:
    def test_identical_rows(self):
        D = euclidean_distance_matrix(np.array([[1.0, 2.0], [1.0, 2.0]]))
        assert D[0, 1] == 0.0

    def test_pythagorean_triple(self):
        D = euclidean_distance_matrix(np.array([[0.0, 0.0], [3.0, 4.0]]))
        assert D[0, 1] == 5.0 and D[1, 0] == 5.0

    def test_brute_force_oracle(self, rng):
        X = rng.standard_normal((5, 3))
        expected = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                expected[i, j] = math.sqrt(sum((X[i, c] - X[j, c]) ** 2 for c in range(3)))
        np.testing.assert_allclose(euclidean_distance_matrix(X), expected, rtol=0, atol=1e-12)

    def test_exactly_symmetric_zero_diagonal(self, rng):
        D = euclidean_distance_matrix(rng.standard_normal((20, 7)))
        assert np.array_equal(D, D.T)
        assert np.all(np.diag(D) == 0)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="row 1"):
            euclidean_distance_matrix(np.array([[0.0], [np.inf]]))

    def test_single_instance(self):
        assert euclidean_distance_matrix(np.ones((1, 4))).shape == (1, 1)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 5)),
                  elements=st.floats(-100, 100, allow_nan=False)))
    def test_triangle_inequality(self, X):
        D = euclidean_distance_matrix(X)
        lhs = D[:, None, :]
        rhs = D[:, :, None] + D[None, :, :]
        assert np.all(lhs <= rhs + 1e-9 * (1 + rhs))

    def test_rotation_invariance(self, rng):
        X = rng.standard_normal((15, 4))
        Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        np.testing.assert_allclose(euclidean_distance_matrix(X @ Q), euclidean_distance_matrix(X), atol=1e-9)


class TestGroundCost:
    def test_gamma_one_is_identity(self, rng):
        D = euclidean_distance_matrix(rng.standard_normal((6, 2)))
        C = ground_cost(D, 1.0)
        assert np.array_equal(C, D) and C is not D

    def test_square(self):
        assert ground_cost(np.array([[0.0, 2.0], [2.0, 0.0]]), 2.0)[0, 1] == 4.0

    def test_sqrt_oracle(self, rng):
        D = euclidean_distance_matrix(rng.standard_normal((6, 2)))
        expected = np.array([[math.sqrt(v) for v in row] for row in D])
        np.testing.assert_allclose(ground_cost(D, 0.5), expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("gamma", [0.0, -1.0])
    def test_rejects_non_positive_gamma(self, gamma):
        with pytest.raises(ValueError):
            ground_cost(np.zeros((2, 2)), gamma)


class TestPipelineConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert (cfg.k, cfg.k1, cfg.k2, cfg.kappa, cfg.theta, cfg.gamma) == (10, 60, 7, 2.0, 0.5, 1.0)
        assert cfg.inner_iters == 3
        assert abs(1 / (1 + cfg.mu) - 0.99) < 1e-5

    @pytest.mark.parametrize("change", [
        {"k2": 60}, {"k2": 0}, {"theta": 1.5}, {"theta": -0.1}, {"mu": 0.0}, {"lam": -1.0},
        {"epsilon": 0.0}, {"gamma": 0.0}, {"kappa": -1.0}, {"solver": "lu"},
        {"regularizer": "zero"}, {"path_region": "all"}, {"k": 0}, {"scale_factors": ()},
        {"rerank_depth": 0}, {"sigma": 0.0},
    ])
    def test_rejects_invalid(self, change):
        with pytest.raises(ValueError):
            PipelineConfig(**change)

    def test_replace(self):
        cfg = PipelineConfig().replace(theta=1.0)
        assert cfg.theta == 1.0 and cfg.k == 10
