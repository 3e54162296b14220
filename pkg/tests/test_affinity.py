import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from lpmt.affinity import (AffinityGraph, GraphEnsemble, INCLUDE_SELF, build_affinity, build_ensemble, knn_sets,
                           normalize, reciprocal_sets, resolve_sigma, scaled_ks, spectral_radius)
from lpmt.core import euclidean_distance_matrix

from conftest import random_points


def _dist(rng, n, d=3):
    return euclidean_distance_matrix(random_points(rng, n, d))


class TestKnnSets:
    def test_single_node(self):
        assert knn_sets(np.zeros((1, 1)), 1).tolist() == [[0]]

    def test_colinear(self):
        D = euclidean_distance_matrix(np.array([[0.0], [1.0], [3.0]]))
        assert knn_sets(D, 2)[1].tolist() == [1, 0]

    def test_full_sort_oracle(self, rng):
        D = _dist(rng, 20)
        for k in (1, 5, 20):
            got = knn_sets(D, k)
            for i in range(20):
                others = sorted((D[i, j], j) for j in range(20) if j != i)
                assert got[i].tolist() == [i] + [j for _, j in others][:k - 1]

    def test_ties_broken_by_index(self):
        # Square corners: every node has two neighbors at distance 1.
        X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        nb = knn_sets(euclidean_distance_matrix(X), 3)
        assert nb.tolist() == [[0, 1, 2], [1, 0, 3], [2, 0, 3], [3, 1, 2]]

    def test_self_first_even_with_duplicates(self):
        X = np.array([[0.0], [0.0], [0.0]])
        nb = knn_sets(euclidean_distance_matrix(X), 2)
        assert nb[:, 0].tolist() == [0, 1, 2]

    @pytest.mark.parametrize("k", [0, 6])
    def test_rejects_bad_k(self, rng, k):
        with pytest.raises(ValueError):
            knn_sets(_dist(rng, 5), k)


class TestAffinity:
    def test_weights(self, rng):
        D = _dist(rng, 12)
        g = build_affinity(D, 4, sigma=0.7)
        W = g.W.toarray()
        nb = knn_sets(D, 4)
        for i in range(12):
            assert W[i, i] == 1.0
            for j in range(12):
                if j in nb[i]:
                    assert W[i, j] == pytest.approx(math.exp(-D[i, j] ** 2 / 0.49), abs=1e-15)
                else:
                    assert W[i, j] == 0.0
        assert np.all((g.W.data > 0) & (g.W.data <= 1))
        assert np.all(np.diff(g.W.indptr) <= 4)

    def test_distance_equal_sigma(self):
        D = np.array([[0.0, 2.0], [2.0, 0.0]])
        W = build_affinity(D, 2, sigma=2.0).W.toarray()
        assert abs(W[0, 1] - 0.36787944117144233) <= 1e-12

    def test_rejects_non_positive_sigma(self, rng):
        with pytest.raises(ValueError):
            build_affinity(_dist(rng, 4), 2, sigma=0.0)

    def test_default_sigma(self, rng):
        D = _dist(rng, 15)
        nb = knn_sets(D, 15)
        expected = np.mean([D[i, nb[i, 3]] for i in range(15)])  # ceil(5/2) = 3rd neighbor
        assert resolve_sigma(D, 5) == pytest.approx(expected, rel=1e-12)

    def test_self_loop_convention(self):
        assert INCLUDE_SELF


class TestNormalize:
    def _graph(self, W):
        return AffinityGraph(W=sparse.csr_matrix(np.array(W, dtype=float)), k=2, sigma=1.0)

    def test_unit_row_sums(self):
        ng = normalize(self._graph([[0, 1], [1, 0]]))
        np.testing.assert_array_equal(ng.D, [1, 1])
        np.testing.assert_array_equal(ng.S.toarray(), [[0, 1], [1, 0]])

    def test_all_ones(self):
        ng = normalize(self._graph(np.ones((2, 2))))
        np.testing.assert_allclose(ng.S.toarray(), 0.5 * np.ones((2, 2)), atol=1e-15)

    def test_directed_edges_are_united(self):
        ng = normalize(self._graph([[1, 0.5], [0, 1]]))
        np.testing.assert_array_equal(ng.W.toarray(), [[1, 0.5], [0.5, 1]])
        np.testing.assert_allclose(ng.S_bar.toarray(), ng.S.toarray(), atol=1e-16)

    def test_directed_normalization_can_exceed_one(self, rng):
        # Why the union is taken: the raw directed k-NN graph breaks the bound.
        D = _dist(rng, 25)
        g = build_affinity(D, 5)
        W = g.W.toarray()
        d = W.sum(axis=1)
        S = W / np.sqrt(np.outer(d, d))
        raw = np.max(np.abs(np.linalg.eigvalsh((S + S.T) / 2)))
        assert raw > 1
        assert spectral_radius(normalize(g).S_bar) <= 1 + 1e-9

    def test_isolated_node(self):
        with pytest.raises(ValueError, match="node 1 has zero degree"):
            normalize(self._graph([[1, 0], [0, 0]]))

    def test_dense_oracle(self, rng):
        D = _dist(rng, 25)
        g = build_affinity(D, 5)
        ng = normalize(g)
        W = g.W.toarray()
        W = np.where(W > 0, W, W.T)
        np.testing.assert_array_equal(ng.W.toarray(), W)
        deg = W.sum(axis=1)
        S = W / np.sqrt(np.outer(deg, deg))
        np.testing.assert_allclose(ng.S.toarray(), S, atol=1e-12)
        np.testing.assert_allclose(ng.S_bar.toarray(), (S + S.T) / 2, atol=1e-12)
        assert (ng.S_bar != ng.S_bar.T).nnz == 0
        assert spectral_radius(ng.S_bar) <= 1 + 1e-9
        assert np.max(np.abs(np.linalg.eigvalsh(ng.S_bar.toarray()))) <= 1 + 1e-9


class TestEnsemble:
    def test_default_ks(self):
        assert scaled_ks(10, (1 / math.sqrt(2), 1.0, math.sqrt(2))) == (7, 10, 14)

    def test_half_rounds_up(self):
        assert scaled_ks(5, (0.5,)) == (3,)

    def test_duplicates_collapse(self):
        assert scaled_ks(2, (1.0, 1.1, 1.2)) == (2,)

    def test_single_factor_matches_single_graph(self, rng):
        D = _dist(rng, 20)
        ens = build_ensemble(D, 6, (1.0,))
        ref = normalize(build_affinity(D, 6))
        assert len(ens) == 1
        assert (ens[0].S_bar != ref.S_bar).nnz == 0

    def test_members_share_sigma(self, rng):
        D = _dist(rng, 30)
        ens = build_ensemble(D, 10)
        assert ens.ks == (7, 10, 14)
        assert ens.sigma == resolve_sigma(D, 10)

    def test_too_large(self, rng):
        with pytest.raises(ValueError, match="exceeds"):
            build_ensemble(_dist(rng, 12), 10)

    def test_invariants(self):
        with pytest.raises(ValueError):
            GraphEnsemble(graphs=(), ks=(), sigma=1.0)


class TestReciprocal:
    def test_mutual_pair(self):
        D = euclidean_distance_matrix(np.array([[0.0], [1.0], [5.0]]))
        R = reciprocal_sets(knn_sets(D, 2), 2)
        assert 1 in R[0] and 0 in R[1]
        # 2's nearest other node is 1, but 1 prefers 0.
        assert 1 not in R[2] and 2 not in R[1]

    def test_brute_force_oracle(self, rng):
        D = _dist(rng, 30)
        nb = knn_sets(D, 8)
        R = reciprocal_sets(nb, 8)
        for i in range(30):
            expected = sorted(j for j in range(30) if j in nb[i] and i in nb[j])
            assert R[i].tolist() == expected

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 50), st.integers(0, 2**32 - 1), st.data())
    def test_mutuality_and_self(self, n, seed, data):
        k = data.draw(st.integers(1, n))
        D = _dist(np.random.default_rng(seed), n)
        R = reciprocal_sets(knn_sets(D, k), k)
        M = R.matrix.toarray()
        assert np.array_equal(M, M.T)
        assert np.all(np.diag(M))


class TestSpectralRadius:
    def test_known_matrix(self):
        M = sparse.csr_matrix(np.diag([0.5, -2.0, 1.0]))
        assert spectral_radius(M) == pytest.approx(2.0, rel=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(3, 40), st.integers(0, 2**32 - 1))
    def test_normalized_graphs_bounded(self, n, seed):
        rng = np.random.default_rng(seed)
        D = _dist(rng, n)
        k = int(rng.integers(1, n + 1))
        S_bar = normalize(build_affinity(D, k)).S_bar
        assert spectral_radius(S_bar) <= 1 + 1e-9
