"""Shared fixtures and brute-force oracles for the test-suite."""

import itertools

import numpy as np
import pytest

from lpmt.affinity import GraphEnsemble, build_affinity, normalize, resolve_sigma
from lpmt.core import euclidean_distance_matrix


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_points(rng, n, d=3):
    return rng.standard_normal((n, d))


def make_ensemble(dist, ks, sigma=None):
    """Ensemble with explicit neighbor counts (bypasses the scale-factor rounding)."""
    ks = tuple(sorted(set(ks)))
    sigma = resolve_sigma(dist, ks[len(ks) // 2], sigma)
    graphs = tuple(normalize(build_affinity(dist, k, sigma)) for k in ks)
    return GraphEnsemble(graphs=graphs, ks=ks, sigma=sigma)


def random_ensemble(rng, n, m):
    """``m`` graphs over ``n`` random points with distinct k values in [2, n]."""
    dist = euclidean_distance_matrix(random_points(rng, n))
    ks = sorted(rng.choice(np.arange(2, n + 1), size=m, replace=False).tolist())
    return make_ensemble(dist, ks)


def kron_closed_form(ensemble, alpha, E):
    """``(1 - alpha) vec^-1((I - sum_v alpha_v (S (x) I + I (x) S) / 2)^-1 vec E)``, dense."""
    n = ensemble.n
    eye = np.eye(n)
    M = np.eye(n * n)
    for a, g in zip(alpha, ensemble):
        S = g.S_bar.toarray()
        M -= a * 0.5 * (np.kron(S, eye) + np.kron(eye, S))
    vec = np.linalg.solve(M, E.reshape(-1, order="F"))
    return (1.0 - float(np.sum(alpha))) * vec.reshape(n, n, order="F")


def triple_loop_objective(F, W, E, mu):
    """Pairwise bidirectional smoothness evaluated literally, plus ``mu ||F - E||^2``."""
    n = F.shape[0]
    D = W.sum(axis=1)
    s = 0.0
    for k in range(n):
        for i in range(n):
            for j in range(n):
                if W[i, j] == 0:
                    continue
                a = F[k, i] / np.sqrt(D[i]) - F[k, j] / np.sqrt(D[j])
                b = F[i, k] / np.sqrt(D[i]) - F[j, k] / np.sqrt(D[j])
                s += W[i, j] * (a * a + b * b)
    return 0.25 * s + mu * float(np.sum((F - E) ** 2))


def coordinate_descent_beta(H, lam, sweeps=10_000, tol=1e-15):
    """Pairwise coordinate descent on ``beta.H + lam/2 |beta|^2`` over the simplex."""
    H = np.asarray(H, dtype=float)
    m = len(H)
    beta = np.full(m, 1.0 / m)
    for _ in range(sweeps):
        change = 0.0
        for i, j in itertools.combinations(range(m), 2):
            total = beta[i] + beta[j]
            bi = (lam * total + (H[j] - H[i])) / (2 * lam)
            bi = min(max(bi, 0.0), total)
            change = max(change, abs(bi - beta[i]))
            beta[i], beta[j] = bi, total - bi
        if change < tol:
            break
    return beta


def grid_beta(H, lam, steps=1000):
    """Exact minimizer of the beta objective over the simplex grid of spacing ``1/steps``.

    The objective is separable and convex per coordinate, so handing out the
    ``steps`` grid units one at a time to the coordinate with the smallest
    marginal increase is optimal on the grid.
    """
    H = np.asarray(H, dtype=float)
    h = 1.0 / steps
    units = np.zeros(len(H), dtype=int)

    def marginal(v):
        b = units[v] * h
        return H[v] * h + 0.5 * lam * ((b + h) ** 2 - b**2)

    for _ in range(steps):
        v = min(range(len(H)), key=marginal)
        units[v] += 1
    return units * h


def brute_grid_beta(H, lam, steps=1000):
    """Exhaustive grid search (m <= 3 only)."""
    H = np.asarray(H, dtype=float)
    m = len(H)
    grid = np.arange(steps + 1) / steps
    if m == 2:
        B = np.column_stack([grid, 1 - grid])
    elif m == 3:
        a, b = np.meshgrid(np.arange(steps + 1), np.arange(steps + 1), indexing="ij")
        keep = a + b <= steps
        a, b = a[keep], b[keep]
        B = np.column_stack([a, b, steps - a - b]) / steps
    else:
        raise ValueError("brute force limited to m <= 3")
    values = B @ H + 0.5 * lam * np.sum(B * B, axis=1)
    return B[np.argmin(values)]


def enumerate_shortest_paths(costs, source):
    """Min over all simple paths of the left-to-right edge-cost sum (inf if unreachable)."""
    C = costs.toarray()
    present = np.zeros_like(C, dtype=bool)
    coo = costs.tocoo()
    present[coo.row, coo.col] = True
    n = C.shape[0]
    best = np.full(n, np.inf)
    best[source] = 0.0

    def walk(node, total, visited):
        for nxt in range(n):
            if present[node, nxt] and nxt not in visited:
                value = total + C[node, nxt]
                if value < best[nxt]:
                    best[nxt] = value
                walk(nxt, value, visited | {nxt})

    walk(source, 0.0, {source})
    return best
