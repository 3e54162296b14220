"""Transition distances between state distributions.

Edge costs are entropy-regularized Wasserstein-1 distances between the
distributions of neighboring instances; the distance between two arbitrary
instances is the cheapest chain of such local transitions (a shortest path),
finally blended with the raw Euclidean distance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.sparse.csgraph import dijkstra
from scipy.special import logsumexp

from .affinity import ReciprocalSets
from .lse import EmbeddingSet, StateDistribution

log = logging.getLogger(__name__)

# exp(-x) underflows to subnormals beyond ~708; past this ratio work in logs.
_LOG_DOMAIN_RATIO = 600.0
_EXACT_MAX_SUPPORT = 12
_CHUNK_BYTES = 64 * 2**20
_STAGE_TOL = 1e-6
# Over-relaxation of the scaling updates; same fixed point, fewer sweeps.
DEFAULT_RELAXATION = "auto"
_CHECK_EVERY = 10


@dataclass(frozen=True)
class TransportPlan:
    rows: np.ndarray
    cols: np.ndarray
    Q: np.ndarray

    def marginals(self):
        return self.Q.sum(axis=1), self.Q.sum(axis=0)


@dataclass(frozen=True)
class SinkhornResult:
    cost: float
    plan: TransportPlan
    converged: bool
    iterations: int
    marginal_error: float
    log_domain: bool = False


def _as_distribution(p) -> StateDistribution:
    if isinstance(p, StateDistribution):
        return p
    return StateDistribution.from_dense(p)


def round_to_marginals(Q: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project a near-feasible plan onto the exact transport polytope.

    Rows and columns are scaled down where they overshoot, and the remaining
    deficit is filled with a rank-one correction (Altschuler et al., 2017).
    """
    row = Q.sum(axis=-1)
    scale = np.minimum(1.0, np.divide(a, row, out=np.ones_like(a), where=row > 0))
    X = Q * scale[..., :, None]
    col = X.sum(axis=-2)
    scale = np.minimum(1.0, np.divide(b, col, out=np.ones_like(b), where=col > 0))
    X = X * scale[..., None, :]
    ea = a - X.sum(axis=-1)
    eb = b - X.sum(axis=-2)
    total = ea.sum(axis=-1)
    safe = np.where(total > 0, total, 1.0)
    X = X + ea[..., :, None] * eb[..., None, :] / safe[..., None, None]
    return X


class _Relaxation:
    """Over-relaxation factor for the single-pair solvers, with a safeguard.

    ``omega="auto"`` runs plain updates for ``warm`` iterations, reads the
    linear rate ``r`` off the error decay and switches to the SOR-optimal
    ``2 / (1 + sqrt(1 - r))``. Relaxed iterations are checkpointed every
    ``_CHECK_EVERY`` steps; a non-finite error or ``patience`` checks without
    a new best restore the checkpoint and fall back to plain updates.
    """

    warm, window, patience, cap = 100, 50, 20, 1.95

    def __init__(self, omega):
        self.auto = omega == "auto"
        self.w = 1.0 if self.auto else float(omega)
        self.best = np.inf
        self.saved = None
        self.stale = 0
        self.reference = None

    def update(self, it, err, state):
        """Record the error after iteration ``it``; returns a state to restore, or None."""
        if self.auto:
            if it == self.warm - self.window:
                self.reference = err
            elif it == self.warm:
                self.auto = False
                if self.reference and 0 < err < self.reference:
                    r = (err / self.reference) ** (1.0 / self.window)
                    self.w = min(self.cap, 2.0 / (1.0 + np.sqrt(1.0 - r)))
                    self.saved = state
            return None
        if self.w == 1.0:
            return None
        if self.saved is None:
            self.saved = state
        if not np.isfinite(err):
            self.w = 1.0
            return self.saved
        if it % _CHECK_EVERY:
            return None
        if err < self.best:
            self.best, self.saved, self.stale = err, state, 0
            return None
        self.stale += 1
        if self.stale >= self.patience:
            self.w = 1.0
            return self.saved
        return None


def _sinkhorn_scaling(a, b, K, tol, maxiter, omega=1.0):
    relax = _Relaxation(omega)
    v = np.ones_like(b)
    u = a / (K @ v)
    err = np.inf
    it = 0
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        for it in range(1, maxiter + 1):
            w = relax.w
            if it > 1:
                un = a / (K @ v)
                u = un if w == 1.0 else u ** (1 - w) * un ** w
            vn = b / (K.T @ u)
            v = vn if it == 1 or w == 1.0 else v ** (1 - w) * vn ** w
            err = float(np.abs(u * (K @ v) - a).sum())
            if err <= tol:
                break
            back = relax.update(it, err, (u, v))
            if back is not None:
                u, v = back
            elif not np.isfinite(err):
                return None
    return u[:, None] * K * v[None, :], it, err


def _sinkhorn_symmetric(a, Cs, eps, tol, maxiter):
    """Self-transport with a symmetric cost: the optimal scalings coincide.

    Alternating updates crawl here once ``K`` is nearly diagonal, while the
    geometric-mean step ``u <- sqrt(u a / (K u))`` reaches the same fixed
    point in a few sweeps. Runs in log domain when ``K`` would underflow.
    """
    log_domain = Cs.max() / eps > _LOG_DOMAIN_RATIO
    err = np.inf
    it = 0
    if log_domain:
        log_a = np.log(a)
        f = np.zeros_like(a)
        for it in range(1, maxiter + 1):
            f = 0.5 * (f + eps * (log_a - logsumexp((f[None, :] - Cs) / eps, axis=1)))
            logQ = (f[:, None] + f[None, :] - Cs) / eps
            err = float(np.abs(np.exp(logsumexp(logQ, axis=1)) - a).sum())
            if err <= tol:
                break
        return np.exp(logQ), it, err, True
    K = np.exp(-Cs / eps)
    u = np.ones_like(a)
    for it in range(1, maxiter + 1):
        u = np.sqrt(u * a / (K @ u))
        err = float(np.abs(u * (K @ u) - a).sum())
        if err <= tol:
            break
    return u[:, None] * K * u[None, :], it, err, False


def _same_distribution(p: StateDistribution, q: StateDistribution) -> bool:
    return np.array_equal(p.support, q.support) and np.array_equal(p.mass, q.mass)


def _sinkhorn_log(a, b, Cs, eps, tol, maxiter, omega=1.0):
    """Log-domain iterations with epsilon annealing as a warm start.

    Intermediate stages are solved to ``_STAGE_TOL``: at small ``eps`` the
    cross-block kernel entries vanish in floating point, so mass the warm
    start leaves on the wrong side can no longer move. Each intermediate
    stage may use at most half of the remaining budget.
    """
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    top = max(float(Cs.max()), eps)
    schedule = []
    e = top
    while e > eps:
        schedule.append(e)
        e *= 0.5
    schedule.append(eps)
    it = 0
    err = np.inf
    for stage_eps in schedule:
        final = stage_eps == eps
        relax = _Relaxation(omega)
        budget = maxiter - it if final else (maxiter - it) // 2
        stage_tol = tol if final else max(tol, _STAGE_TOL)
        for step in range(1, budget + 1):
            it += 1
            w = relax.w
            fn = stage_eps * (log_a - logsumexp((g[None, :] - Cs) / stage_eps, axis=1))
            f = f + w * (fn - f) if it > 1 else fn
            gn = stage_eps * (log_b - logsumexp((f[:, None] - Cs) / stage_eps, axis=0))
            g = g + w * (gn - g) if it > 1 else gn
            logQ = (f[:, None] + g[None, :] - Cs) / stage_eps
            err = float(np.abs(np.exp(logsumexp(logQ, axis=1)) - a).sum())
            if err <= stage_tol:
                break
            back = relax.update(step, err, (f, g))
            if back is not None:
                f, g = back
    Q = np.exp((f[:, None] + g[None, :] - Cs) / eps)
    return Q, it, err


def sinkhorn_w1(p_start, p_end, C: np.ndarray, epsilon: float, tol: float = 1e-9,
                maxiter: int = 10_000, omega=DEFAULT_RELAXATION) -> SinkhornResult:
    """Entropy-regularized W1 between two sparse distributions.

    Works on the ``support(p_start) x support(p_end)`` block of ``C`` only.
    Alternates ``u = a / (K v)``, ``v = b / (K' u)`` with ``K = exp(-C / eps)``
    until the row-marginal l1 violation is at most ``tol``; falls back to
    log-domain updates when ``K`` would underflow. The reported cost is the
    plain transport cost of the plan after rounding it onto the exact
    marginals, so it never undercuts the true optimum.

    ``omega`` in ``[1, 2)`` over-relaxes the updates (same fixed point);
    ``1.0`` is the plain alternating scheme and ``"auto"`` picks the factor
    from the observed convergence rate.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if omega != "auto" and not (isinstance(omega, (int, float)) and 1.0 <= omega < 2.0):
        raise ValueError(f"relaxation must be 'auto' or lie in [1, 2), got {omega!r}")
    p, q = _as_distribution(p_start), _as_distribution(p_end)
    a, b = p.mass, q.mass
    Cs = np.asarray(C, dtype=np.float64)[np.ix_(p.support, q.support)]
    if not np.all(np.isfinite(Cs)):
        raise ValueError("ground cost is not finite on the joint support")
    if len(a) == 1 or len(b) == 1:
        Q = np.outer(a, b)
        plan = TransportPlan(p.support, q.support, Q)
        return SinkhornResult(float(np.sum(Q * Cs)), plan, True, 0, 0.0)

    out = None
    log_domain = Cs.max() / epsilon > _LOG_DOMAIN_RATIO
    if _same_distribution(p, q) and np.array_equal(Cs, Cs.T):
        *out, log_domain = _sinkhorn_symmetric(a, Cs, epsilon, tol, maxiter)
    elif not log_domain:
        K = np.exp(-Cs / epsilon)
        if np.all(K.sum(axis=1) > 0) and np.all(K.sum(axis=0) > 0):
            out = _sinkhorn_scaling(a, b, K, tol, maxiter, omega)
    if out is None:
        log_domain = True
        out = _sinkhorn_log(a, b, Cs, epsilon, tol, maxiter, omega)
    Q, iterations, err = out
    converged = err <= tol
    if not converged:
        log.debug("sinkhorn stopped at %d iterations, marginal error %.3g", iterations, err)
    Q = round_to_marginals(Q, a, b)
    plan = TransportPlan(p.support, q.support, Q)
    return SinkhornResult(float(np.sum(Q * Cs)), plan, bool(converged), iterations, err, log_domain)


def exact_w1(p_start, p_end, C: np.ndarray) -> float:
    """Exact optimal transport cost by linear programming (small supports only)."""
    p, q = _as_distribution(p_start), _as_distribution(p_end)
    joint = np.union1d(p.support, q.support)
    if len(joint) > _EXACT_MAX_SUPPORT:
        raise ValueError(f"joint support of {len(joint)} nodes exceeds the exact-solver limit "
                         f"of {_EXACT_MAX_SUPPORT}")
    Cs = np.asarray(C, dtype=np.float64)[np.ix_(p.support, q.support)]
    na, nb = Cs.shape
    A_eq = np.zeros((na + nb, na * nb))
    for i in range(na):
        A_eq[i, i * nb:(i + 1) * nb] = 1.0
    for j in range(nb):
        A_eq[na + j, j::nb] = 1.0
    b_eq = np.concatenate([p.mass, q.mass])
    res = linprog(Cs.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def default_epsilon(embeddings: EmbeddingSet, C: np.ndarray, scale: float = 0.05) -> float:
    """``scale`` times the median positive ground cost among supported nodes."""
    nodes = np.unique(embeddings.P.indices)
    block = np.asarray(C)[np.ix_(nodes, nodes)]
    vals = block[np.triu_indices(len(nodes), 1)]
    vals = vals[vals > 0]
    if vals.size == 0:
        return scale
    return float(scale * np.median(vals))


def _batch_sinkhorn(A, B, Cb, eps, tol, maxiter, omega=1.0, check_every=_CHECK_EVERY):
    """Scaling iterations for a padded batch; zero mass marks padding.

    Over-relaxation follows :class:`_Relaxation` per problem: a fixed
    ``omega``, or ``"auto"`` to estimate the factor from the error decay
    (``u <- u^(1-w) (a / K v)^w``, same fixed point). Relaxed problems are
    checkpointed at every check and restored to plain updates on overflow
    or stagnation. Returns (cost, converged, usable) per problem; ``usable``
    is False where the kernel underflowed or plain updates overflowed, so
    the problem must be redone in log domain.
    """
    K = np.exp(-Cb / eps)
    nb = len(A)
    usable = (((K.sum(axis=2) > 0) | (A == 0)).all(axis=1)
              & ((K.sum(axis=1) > 0) | (B == 0)).all(axis=1))
    auto = omega == "auto"
    V = (B > 0).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        U = np.where(A > 0, A / np.matmul(K, V[:, :, None])[:, :, 0], 0.0)
    W = np.full(nb, 1.0 if auto else float(omega))
    err = np.full(nb, np.inf)
    best = np.full(nb, np.inf)
    reference = np.full(nb, np.nan)
    stale = np.zeros(nb, dtype=int)
    saved_U, saved_V = U.copy(), V.copy()
    warm_check = _Relaxation.warm // check_every
    ref_check = (_Relaxation.warm - _Relaxation.window) // check_every
    active = np.flatnonzero(usable)
    it = 0
    checks = 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        while active.size and it < maxiter:
            Ka, Aa, Ba = K[active], A[active], B[active]
            Ua, Va = U[active], V[active]
            w = W[active][:, None]
            relax = bool(np.any(w != 1.0))
            steps = min(check_every, maxiter - it)
            for _ in range(steps):
                Un = np.where(Aa > 0, Aa / np.matmul(Ka, Va[:, :, None])[:, :, 0], 0.0)
                Ua = np.where(Aa > 0, Ua ** (1 - w) * Un ** w, 0.0) if relax else Un
                Vn = np.where(Ba > 0, Ba / np.matmul(Ua[:, None, :], Ka)[:, 0, :], 0.0)
                Va = np.where(Ba > 0, Va ** (1 - w) * Vn ** w, 0.0) if relax else Vn
            it += steps
            checks += 1
            e = np.abs(Ua * np.matmul(Ka, Va[:, :, None])[:, :, 0] - Aa).sum(axis=1)
            U[active] = Ua
            V[active] = Va
            err[active] = e
            finite = np.isfinite(e)
            relaxed = W[active] != 1.0
            # Overflow under plain updates: hand over to the log-domain solver.
            usable[active[~finite & ~relaxed]] = False
            # Relaxed problems: checkpoint on a new best, restore on overflow or stagnation.
            improved = relaxed & finite & (e < best[active])
            idx = active[improved]
            best[idx] = e[improved]
            saved_U[idx], saved_V[idx] = U[idx], V[idx]
            stale[idx] = 0
            stale[active[relaxed & ~improved]] += 1
            back = active[relaxed & (~finite | (stale[active] >= _Relaxation.patience))]
            U[back], V[back] = saved_U[back], saved_V[back]
            W[back] = 1.0
            err[back] = best[back]
            if auto and checks == ref_check:
                reference[active] = e
            elif auto and checks == warm_check:
                ref = reference[active]
                ok = finite & (e > 0) & (e < ref)
                r = np.where(ok, e / np.where(ok, ref, 1.0), 1.0) ** (1.0 / _Relaxation.window)
                fresh = active[ok]
                W[fresh] = np.minimum(_Relaxation.cap, 2.0 / (1.0 + np.sqrt(1.0 - r[ok])))
                saved_U[fresh], saved_V[fresh] = U[fresh], V[fresh]
            keep = usable[active] & (err[active] > tol)
            active = active[keep]
    with np.errstate(invalid="ignore"):
        Q = U[:, :, None] * K * V[:, None, :]
        Q = round_to_marginals(Q, A, B)
    cost = np.einsum("bij,bij->b", Q, Cb)
    return cost, err <= tol, usable


@dataclass(frozen=True)
class TransitionGraph:
    """Symmetric sparse matrix of local transition costs (explicit zeros are edges)."""

    costs: sparse.csr_matrix
    epsilon: float
    n_unconverged: int = 0

    @property
    def n(self) -> int:
        return self.costs.shape[0]

    @property
    def n_edges(self) -> int:
        return self.costs.nnz


def region_pairs(regions) -> np.ndarray:
    """Unordered pairs ``(i, j), i < j`` with ``j`` in the region of ``i`` or vice versa."""
    if isinstance(regions, ReciprocalSets):
        M = regions.matrix
    else:
        regions = np.asarray(regions)
        n, k = regions.shape
        M = sparse.csr_matrix((np.ones(n * k), (np.repeat(np.arange(n), k), regions.ravel())), shape=(n, n))
    M = (M + M.T).tocoo()
    keep = M.row < M.col
    pairs = np.stack([M.row[keep], M.col[keep]], axis=1)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order].astype(np.intp)


def build_transition_graph(embeddings: EmbeddingSet, regions, C: np.ndarray, epsilon: Optional[float] = None,
                           tol: float = 1e-9, maxiter: int = 10_000, epsilon_scale: float = 0.05,
                           omega=DEFAULT_RELAXATION) -> TransitionGraph:
    """Edges ``i -- j`` for ``j`` in the local region of ``i`` (self excluded),
    weighted by the regularized W1 between their distributions.

    The ground cost is symmetric and the regularized problem is invariant
    under transposing the plan, so each unordered pair is solved once and the
    cost is shared by both directions.
    """
    C = np.asarray(C, dtype=np.float64)
    n = len(embeddings)
    if epsilon is None:
        epsilon = default_epsilon(embeddings, C, epsilon_scale)
    pairs = region_pairs(regions)
    costs = np.zeros(len(pairs))
    unconverged = 0
    if len(pairs):
        P = embeddings.P
        sizes = np.diff(P.indptr)
        # Identical distributions get the symmetric solver instead of the batch.
        same = np.array([_same_distribution(embeddings[i], embeddings[j]) for i, j in pairs], dtype=bool)
        for e in np.flatnonzero(same):
            i, j = pairs[e]
            res = sinkhorn_w1(embeddings[i], embeddings[j], C, epsilon, tol, maxiter)
            costs[e] = res.cost
            unconverged += int(not res.converged)
        # Group pairs of similar support size so padding stays small.
        rest = np.flatnonzero(~same)
        order = rest[np.lexsort((sizes[pairs[rest, 1]], sizes[pairs[rest, 0]]))]
        start = 0
        while start < len(order):
            la = sizes[pairs[order[start], 0]]
            max_b = sizes[pairs[order[start:], 1]].max()
            per = max(1, int(_CHUNK_BYTES // (8 * 4 * max(la, 1) * max(max_b, 1))))
            idx = order[start:start + per]
            la = sizes[pairs[idx, 0]].max()
            lb = sizes[pairs[idx, 1]].max()
            A = np.zeros((len(idx), la))
            B = np.zeros((len(idx), lb))
            SA = np.zeros((len(idx), la), dtype=np.intp)
            SB = np.zeros((len(idx), lb), dtype=np.intp)
            for r, e in enumerate(idx):
                i, j = pairs[e]
                si, sj = slice(P.indptr[i], P.indptr[i + 1]), slice(P.indptr[j], P.indptr[j + 1])
                A[r, :sizes[i]] = P.data[si]
                SA[r, :sizes[i]] = P.indices[si]
                B[r, :sizes[j]] = P.data[sj]
                SB[r, :sizes[j]] = P.indices[sj]
            Cb = C[SA[:, :, None], SB[:, None, :]]
            got, ok, usable = _batch_sinkhorn(A, B, Cb, epsilon, tol, maxiter, omega)
            for r in np.flatnonzero(~usable):
                i, j = pairs[idx[r]]
                res = sinkhorn_w1(embeddings[i], embeddings[j], C, epsilon, tol, maxiter, omega)
                got[r], ok[r] = res.cost, res.converged
            costs[idx] = got
            unconverged += int(np.count_nonzero(~ok))
            start += len(idx)
    if unconverged:
        log.warning("%d of %d transport problems hit the iteration limit", unconverged, len(pairs))
    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    vals = np.concatenate([costs, costs])
    M = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    M.sort_indices()
    return TransitionGraph(costs=M, epsilon=float(epsilon), n_unconverged=unconverged)


def transition_distances(graph: TransitionGraph, sources: Optional[Sequence[int]] = None) -> np.ndarray:
    """Cheapest multi-hop transition cost from each source to every node (inf if unreachable).

    Without ``sources`` the full matrix is returned, made exactly symmetric:
    a path and its reverse have equal cost but are summed in opposite order.
    """
    full = sources is None
    if full:
        sources = np.arange(graph.n)
    sources = np.atleast_1d(np.asarray(sources, dtype=np.intp))
    if graph.n_edges == 0:
        out = np.full((len(sources), graph.n), np.inf)
        out[np.arange(len(sources)), sources] = 0.0
        return out
    out = dijkstra(graph.costs, directed=True, indices=sources)
    return np.minimum(out, out.T) if full else out


def min_transition_cost(graph: TransitionGraph, query: int) -> np.ndarray:
    return transition_distances(graph, [query])[0]


def fuse(d: np.ndarray, d_prime: np.ndarray, theta: float) -> np.ndarray:
    """``theta * d + (1 - theta) * d'``; unreachable (inf) ``d'`` stays inf unless theta is 1."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    d = np.asarray(d, dtype=np.float64)
    d_prime = np.asarray(d_prime, dtype=np.float64)
    if theta == 1.0:
        return d.copy()
    if theta == 0.0:
        return d_prime.copy()
    return theta * d + (1.0 - theta) * d_prime


def blended_order(d_star: np.ndarray, d: np.ndarray, keys: Optional[np.ndarray] = None) -> np.ndarray:
    """Ascending ``d*``, ties (including inf) broken by raw ``d``, then by ``keys`` (default: position)."""
    keys = np.arange(len(d_star)) if keys is None else np.asarray(keys)
    return np.lexsort((keys, d, d_star))
