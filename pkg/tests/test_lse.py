import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from lpmt.affinity import knn_sets, reciprocal_sets
from lpmt.core import euclidean_distance_matrix
from lpmt.lse import StateDistribution, aggregate, embed

from conftest import random_points


def _setup(rng, n, k1, k2):
    D = euclidean_distance_matrix(random_points(rng, n))
    nb = knn_sets(D, k1)
    return D, nb, reciprocal_sets(nb, k1), reciprocal_sets(nb, k2)


def _dense_aggregate(P_hat, nb, R2, kappa):
    n, k2 = nb.shape
    out = np.zeros_like(P_hat)
    for i in range(n):
        denom = kappa * len(R2[i]) + k2
        for j in nb[i]:
            out[i] += (kappa * (j in R2[i]) + 1) * P_hat[j] / denom
    return out


class TestStateDistribution:
    def test_point_mass(self):
        p = StateDistribution.point_mass(4)
        assert p.support.tolist() == [4] and p.mass.tolist() == [1.0]

    @pytest.mark.parametrize("support,mass", [
        ([1, 0], [0.5, 0.5]), ([0, 0], [0.5, 0.5]), ([0, 1], [1.0, 0.0]), ([0, 1], [0.3, 0.3]),
    ])
    def test_invariants(self, support, mass):
        with pytest.raises(ValueError):
            StateDistribution(np.array(support), np.array(mass))

    def test_dense_round_trip(self):
        v = np.array([0.0, 0.25, 0.0, 0.75])
        np.testing.assert_array_equal(StateDistribution.from_dense(v).dense(4), v)


class TestEmbed:
    def test_singleton_region_is_point_mass(self, rng):
        n = 5
        R = reciprocal_sets(np.arange(n)[:, None], 1)
        P = embed(rng.uniform(0.1, 1, (n, n)), R)
        np.testing.assert_array_equal(P.toarray(), np.eye(n))

    def test_dense_oracle(self, rng):
        D, nb, R1, _ = _setup(rng, 10, 6, 3)
        F = rng.uniform(0, 1, (10, 10))
        mask = R1.matrix.toarray()
        expected = F * mask
        expected /= expected.sum(axis=1, keepdims=True)
        P = embed(F, R1)
        np.testing.assert_allclose(P.toarray(), expected, rtol=0, atol=1e-12)
        np.testing.assert_allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0, atol=1e-12)

    def test_clamps_negative(self, rng):
        D, nb, R1, _ = _setup(rng, 8, 5, 2)
        F = np.eye(8) - 1e-17
        P = embed(F, R1).toarray()
        np.testing.assert_array_equal(P, np.eye(8))

    def test_zero_mass_rejected(self, rng):
        D, nb, R1, _ = _setup(rng, 6, 3, 2)
        with pytest.raises(ValueError, match="instance 0"):
            embed(np.zeros((6, 6)), R1)


class TestAggregate:
    def test_degenerate_neighborhood(self, rng):
        n = 6
        D, nb, R1, _ = _setup(rng, n, 4, 1)
        P_hat = embed(rng.uniform(0.1, 1, (n, n)), R1)
        R_self = reciprocal_sets(nb[:, :1], 1)
        emb = aggregate(P_hat, nb[:, :1], R_self, kappa=0.0)
        np.testing.assert_allclose(emb.P.toarray(), P_hat.toarray(), atol=1e-15)

    def test_identical_rows_fixpoint(self, rng):
        n = 9
        D, nb, R1, R2 = _setup(rng, n, 6, 3)
        row = rng.uniform(0.1, 1, n)
        row /= row.sum()
        P_hat = sparse.csr_matrix(np.tile(row, (n, 1)))
        for kappa in (0.0, 2.0, 7.5):
            emb = aggregate(P_hat, nb[:, :3], R2, kappa)
            np.testing.assert_allclose(emb.P.toarray(), np.tile(row, (n, 1)), atol=1e-15)

    def test_dense_oracle(self, rng):
        n = 12
        D, nb, R1, R2 = _setup(rng, n, 8, 4)
        P_hat = embed(rng.uniform(0, 1, (n, n)), R1)
        emb = aggregate(P_hat, nb[:, :4], R2, 2.0, 8)
        expected = _dense_aggregate(P_hat.toarray(), nb[:, :4], R2, 2.0)
        np.testing.assert_allclose(emb.P.toarray(), expected, rtol=0, atol=1e-12)
        np.testing.assert_allclose(np.asarray(emb.P.sum(axis=1)).ravel(), 1.0, atol=1e-10)
        for i in range(n):
            p = emb[i]
            assert p.support.tolist() == sorted(p.support.tolist())

    def test_mismatched_k(self, rng):
        D, nb, R1, R2 = _setup(rng, 8, 5, 3)
        with pytest.raises(ValueError):
            aggregate(embed(np.ones((8, 8)), R1), nb[:, :2], R2, 1.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(4, 20), st.integers(0, 2**32 - 1), st.floats(0, 5), st.data())
    def test_properties(self, n, seed, kappa, data):
        rng = np.random.default_rng(seed)
        k1 = data.draw(st.integers(2, n))
        k2 = data.draw(st.integers(1, k1 - 1))
        D, nb, R1, R2 = _setup(rng, n, k1, k2)
        F = rng.uniform(0.01, 1, (n, n))
        F = F + F.T
        emb = aggregate(embed(F, R1), nb[:, :k2], R2, kappa, k1)
        P = emb.P.toarray()
        assert np.all(P >= 0)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-10)
        assert np.all(emb.support_sizes() <= k1 * k2)
        # Self is in R(i, k1) and in N(i, k2), so it keeps positive mass.
        assert np.all(np.diag(P) > 0)
        # Support lies inside the union of the neighbors' regions.
        R = R1.matrix.toarray()
        for i in range(n):
            allowed = R[nb[i, :k2]].any(axis=0)
            assert not np.any((P[i] > 0) & ~allowed)

    def test_permutation_equivariance(self, rng):
        n = 16
        X = random_points(rng, n)
        perm = rng.permutation(n)

        def run(points):
            D = euclidean_distance_matrix(points)
            nb = knn_sets(D, 6)
            R1, R2 = reciprocal_sets(nb, 6), reciprocal_sets(nb, 3)
            F = np.exp(-D)
            return aggregate(embed(F, R1), nb[:, :3], R2, 2.0).P.toarray()

        base = run(X)
        permuted = run(X[perm])
        np.testing.assert_allclose(permuted, base[np.ix_(perm, perm)], atol=1e-14)
