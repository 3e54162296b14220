"""End-to-end re-ranking: graphs, diffusion, state embedding, transition distances."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .affinity import build_ensemble, knn_sets, reciprocal_sets, scaled_ks
from .bcd import bcd_solve, regularizer_matrix
from .core import FeatureSet, PipelineConfig, Ranking, euclidean_distance_matrix, ground_cost
from .lse import aggregate, embed
from .tmt import blended_order, build_transition_graph, fuse, transition_distances

log = logging.getLogger(__name__)


@dataclass
class RerankResult:
    rankings: list
    converged: bool
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)


def _clamped(config: PipelineConfig, n: int, warnings: list) -> PipelineConfig:
    """Shrink neighborhood sizes that do not fit ``n`` nodes."""
    changes = {}
    top_k = max(scaled_ks(config.k, config.scale_factors))
    if top_k > n:
        k = config.k
        while k > 1 and max(scaled_ks(k, config.scale_factors)) > n:
            k -= 1
        changes["k"] = k
    if config.k1 > n:
        changes["k1"] = n
    k1 = changes.get("k1", config.k1)
    if config.k2 >= k1:
        changes["k2"] = max(1, k1 - 1)
    if changes:
        msg = f"n={n} is too small for the configured neighborhoods; using " + ", ".join(
            f"{key}={value}" for key, value in changes.items())
        log.warning(msg)
        warnings.append(msg)
        config = config.replace(**changes)
    return config


def transition_stage(dist: np.ndarray, config: PipelineConfig, sources: Sequence[int],
                     timings: Optional[dict] = None) -> tuple:
    """Run the re-ranking stages on one node set.

    ``dist`` must already fit ``config`` (see :func:`_clamped`). Returns the
    transition distances from ``sources`` to every node plus diagnostics.
    """
    timings = {} if timings is None else timings
    n = dist.shape[0]

    def tick(name, start):
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - start

    start = time.perf_counter()
    ensemble = build_ensemble(dist, config.k, config.scale_factors, config.sigma)
    tick("graphs", start)

    start = time.perf_counter()
    E = regularizer_matrix(ensemble, config.regularizer)
    bcd = bcd_solve(ensemble, E, mu=config.mu, lam=config.lam, maxiter=config.maxiter,
                    inner_iters=config.inner_iters, solver=config.solver, delta=config.delta,
                    outer_tol=config.outer_tol)
    tick("diffusion", start)

    start = time.perf_counter()
    neighbors = knn_sets(dist, config.k1)
    region = reciprocal_sets(neighbors, config.k1)
    near = reciprocal_sets(neighbors, config.k2)
    embeddings = aggregate(embed(bcd.F, region), neighbors[:, :config.k2], near, config.kappa, config.k1)
    tick("embedding", start)

    start = time.perf_counter()
    C = ground_cost(dist, config.gamma)
    path_region = region if config.path_region == "reciprocal-k1" else neighbors[:, :config.k2]
    graph = build_transition_graph(embeddings, path_region, C, config.epsilon, tol=config.sinkhorn_tol,
                                   maxiter=config.sinkhorn_maxiter, epsilon_scale=config.epsilon_scale)
    tick("transport", start)

    start = time.perf_counter()
    d_prime = transition_distances(graph, sources)
    tick("paths", start)

    diagnostics = {
        "n": n,
        "sigma": ensemble.sigma,
        "ks": ensemble.ks,
        "lambda": bcd.lam,
        "beta": bcd.weights.beta.tolist(),
        "bcd_iterations": bcd.iterations,
        "bcd_converged": bcd.converged,
        "epsilon": graph.epsilon,
        "edges": graph.n_edges,
        "sinkhorn_unconverged": graph.n_unconverged,
    }
    return d_prime, diagnostics


def _ranking_from_block(query: int, block: np.ndarray, d_block: np.ndarray, dp_block: np.ndarray,
                        d_full: np.ndarray, config: PipelineConfig, ids: Sequence[str]) -> Ranking:
    """Order the re-ranked block, then append the rest of the gallery in Euclidean order."""
    d_used, dp_used = d_block, dp_block
    if config.normalize_distances and config.theta < 1.0:
        d_used = d_block / _finite_max(d_block)
        dp_used = dp_block / _finite_max(dp_block)
    d_star = fuse(d_used, dp_used, config.theta)
    keep = block != query
    block, d_star, d_block = block[keep], d_star[keep], d_block[keep]
    order = blended_order(d_star, d_block, keys=block)
    ranked = block[order]
    scores = d_star[order]

    rest = np.setdiff1d(np.arange(len(d_full)), np.append(block, query))
    if rest.size:
        rest = rest[np.lexsort((rest, d_full[rest]))]
        ranked = np.concatenate([ranked, rest])
        scores = np.concatenate([scores, d_full[rest]])
    # Galleries past the re-ranked block keep their Euclidean order; their
    # scores are floored at the running maximum so scores stay sorted.
    scores = np.maximum.accumulate(scores) if scores.size else scores
    return Ranking(ids[query], tuple(ids[j] for j in ranked), scores)


def _finite_max(x: np.ndarray) -> float:
    finite = x[np.isfinite(x)]
    top = float(finite.max()) if finite.size else 0.0
    return top if top > 0 else 1.0


def _query_indices(features: FeatureSet, queries: Optional[Sequence[str]]) -> np.ndarray:
    if queries is None:
        return np.arange(features.n)
    return np.array([features.index_of(q) for q in queries], dtype=np.intp)


def baseline(features: FeatureSet, queries: Optional[Sequence[str]] = None) -> list:
    """Plain Euclidean rankings (self excluded, ties broken by index)."""
    dist = euclidean_distance_matrix(features)
    out = []
    for q in _query_indices(features, queries):
        idx = np.delete(np.arange(features.n), q)
        order = idx[np.lexsort((idx, dist[q, idx]))]
        out.append(Ranking(features.ids[q], tuple(features.ids[j] for j in order), dist[q, order]))
    return out


def rerank(features: FeatureSet, queries: Optional[Sequence[str]] = None,
           config: Optional[PipelineConfig] = None) -> RerankResult:
    """Re-rank the gallery (all instances except the query) for each query.

    Without ``rerank_depth`` (or with a depth covering every instance) one
    transition graph over the whole set serves all queries. Otherwise each
    query gets its own pipeline over its ``rerank_depth`` nearest instances
    (itself included), and the rest of the gallery follows in Euclidean
    order.
    """
    config = config or PipelineConfig()
    qidx = _query_indices(features, queries)
    timings: dict = {}
    warnings: list = []
    start = time.perf_counter()
    dist = euclidean_distance_matrix(features)
    timings["distances"] = time.perf_counter() - start
    n = features.n
    if n < 2:
        raise ValueError("need at least two instances to rank a gallery")
    rankings, diagnostics = [], []

    depth = config.rerank_depth
    if depth is None or depth >= n:
        local = _clamped(config, n, warnings)
        d_prime, diag = transition_stage(dist, local, qidx, timings)
        diagnostics.append(diag)
        nodes = np.arange(n)
        for row, q in enumerate(qidx):
            rankings.append(_ranking_from_block(q, nodes, dist[q], d_prime[row], dist[q], local,
                                                features.ids))
    else:
        if depth < 2:
            raise ValueError("rerank_depth must cover the query and at least one gallery item")
        local = _clamped(config, depth, warnings)
        for q in qidx:
            idx = np.arange(n)
            block = idx[np.lexsort((idx, dist[q]))][:depth]
            if block[0] != q:
                # A duplicate of the query at distance 0 with a lower index.
                block = np.concatenate([[q], block[block != q][:depth - 1]])
            sub = dist[np.ix_(block, block)]
            d_prime, diag = transition_stage(sub, local, [0], timings)
            diag["query"] = features.ids[q]
            diagnostics.append(diag)
            rankings.append(_ranking_from_block(q, block, dist[q, block], d_prime[0], dist[q], local,
                                                features.ids))
    converged = all(d["sinkhorn_unconverged"] == 0 for d in diagnostics)
    return RerankResult(rankings=rankings, converged=converged, timings=timings, warnings=warnings,
                        diagnostics=diagnostics)
