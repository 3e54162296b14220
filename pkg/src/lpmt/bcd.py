"""Collaborative diffusion over a graph ensemble.

The similarity matrix ``F`` and the ensemble weights ``beta`` are optimized
alternately: ``F`` by diffusion (fixed point or conjugate gradient on the
equivalent Lyapunov equation) with ``beta`` fixed, then ``beta`` in closed
form from the per-graph objective values with ``F`` fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from .affinity import GraphEnsemble

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WeightVector:
    beta: np.ndarray
    mu: float

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        object.__setattr__(self, "beta", beta)
        if np.any(beta < 0) or np.any(beta > 1) or abs(beta.sum() - 1.0) > 1e-10:
            raise ValueError(f"beta is not on the probability simplex: {beta}")
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")

    @classmethod
    def uniform(cls, m: int, mu: float) -> "WeightVector":
        return cls(np.full(m, 1.0 / m), mu)

    @property
    def alpha(self) -> np.ndarray:
        """Per-graph diffusion weights ``beta_v / (mu + 1)``."""
        return self.beta / (self.mu + 1.0)

    @property
    def alpha_sum(self) -> float:
        return 1.0 / (self.mu + 1.0)


def _alphas(weights) -> np.ndarray:
    if isinstance(weights, WeightVector):
        return weights.alpha
    return np.asarray(weights, dtype=np.float64)


def combined_operator(ensemble: GraphEnsemble, alpha: np.ndarray) -> sparse.csr_matrix:
    """``sum_v alpha_v * S_bar^v`` as one sparse matrix."""
    if len(alpha) != len(ensemble):
        raise ValueError(f"{len(alpha)} weights for an ensemble of {len(ensemble)} graphs")
    total = sparse.csr_matrix((ensemble.n, ensemble.n))
    for a, g in zip(alpha, ensemble):
        if a != 0:
            total = total + a * g.S_bar
    total = total.tocsr()
    total.sort_indices()
    return total


def _is_symmetric(M: np.ndarray) -> bool:
    return np.array_equal(M, M.T)


def _sym_apply(A: sparse.csr_matrix, F: np.ndarray, symmetric: bool) -> np.ndarray:
    """``F A + A F`` for symmetric sparse ``A``."""
    AF = np.asarray(A @ F)
    if symmetric:
        # F symmetric => F A = (A F)^T; the sum is then exactly symmetric.
        return AF + AF.T
    return AF + np.asarray(A @ F.T).T


def _check_shapes(F, E, ensemble):
    n = ensemble.n
    if F.shape != (n, n) or E.shape != (n, n):
        raise ValueError(f"F {F.shape} and E {E.shape} must both be {(n, n)}")


def diffusion_step(F: np.ndarray, ensemble: GraphEnsemble, weights, E: np.ndarray) -> np.ndarray:
    """One fixed-point update ``F' = 1/2 sum_v alpha_v (F S_bar^v + S_bar^v F) + (1 - alpha) E``.

    ``weights`` is a :class:`WeightVector` or a raw vector of ``alpha_v``.
    """
    F = np.asarray(F, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    _check_shapes(F, E, ensemble)
    alpha = _alphas(weights)
    A = combined_operator(ensemble, alpha)
    return _diffuse(F, A, float(alpha.sum()), E, _is_symmetric(F) and _is_symmetric(E))


def _diffuse(F, A, alpha_sum, E, symmetric):
    out = _sym_apply(A, F, symmetric)
    out *= 0.5
    out += (1.0 - alpha_sum) * E
    return out


@dataclass
class CGResult:
    F: np.ndarray
    iterations: int
    residual: float
    converged: bool


def lyapunov_residual(F: np.ndarray, ensemble: GraphEnsemble, weights, E: np.ndarray) -> np.ndarray:
    """``2(1 - alpha) E - (I - S)F - F(I - S)`` with ``S = sum_v alpha_v S_bar^v``."""
    alpha = _alphas(weights)
    A = combined_operator(ensemble, alpha)
    return 2.0 * (1.0 - alpha.sum()) * E - (2.0 * F - _sym_apply(A, F, False))


def cg_solve(ensemble: GraphEnsemble, weights, E: np.ndarray, F0: Optional[np.ndarray] = None,
             delta: float = 1e-8, maxiter: int = 1000) -> CGResult:
    """Conjugate gradient on ``(I - S)F + F(I - S) = 2(1 - alpha) E``.

    The operator is symmetric positive definite on matrices (its spectrum lies
    in ``[2(1 - alpha), 2(1 + alpha)]``). Iterates until the Frobenius norm of
    the residual drops below ``delta``; on hitting ``maxiter`` the iterate
    with the smallest residual is returned with ``converged=False``.
    """
    E = np.asarray(E, dtype=np.float64)
    F = E.copy() if F0 is None else np.array(F0, dtype=np.float64)
    _check_shapes(F, E, ensemble)
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    alpha = _alphas(weights)
    A = combined_operator(ensemble, alpha)
    symmetric = _is_symmetric(F) and _is_symmetric(E)

    def op(P):
        return 2.0 * P - _sym_apply(A, P, symmetric)

    R = 2.0 * (1.0 - alpha.sum()) * E - op(F)
    rr = float(np.vdot(R, R))
    best = (np.sqrt(rr), F.copy())
    if np.sqrt(rr) < delta:
        return CGResult(F, 0, float(np.sqrt(rr)), True)
    P = R.copy()
    for it in range(1, maxiter + 1):
        LP = op(P)
        step = rr / float(np.vdot(P, LP))
        F += step * P
        R -= step * LP
        rr_new = float(np.vdot(R, R))
        res = np.sqrt(rr_new)
        if res < best[0]:
            best = (res, F.copy())
        if res < delta:
            return CGResult(F, it, float(res), True)
        P *= rr_new / rr
        P += R
        rr = rr_new
    return CGResult(best[1], maxiter, float(best[0]), False)


def compute_objectives(F: np.ndarray, ensemble: GraphEnsemble, E: np.ndarray, mu: float) -> np.ndarray:
    """Per-graph objective ``H^v``: bidirectional smoothness plus ``mu ||F - E||^2``.

    Smoothness is evaluated as ``||F||^2 - (tr(F'F S) + tr(F'S F)) / 2`` with
    ``S = S_bar^v``. This is the quadratic form the diffusion update
    minimizes; since normalized graphs carry symmetric ``W`` it equals the
    pairwise (triple-sum) definition.
    """
    F = np.asarray(F, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    _check_shapes(F, E, ensemble)
    sq = float(np.vdot(F, F))
    reg = mu * float(np.sum((F - E) ** 2))
    symmetric = _is_symmetric(F)
    H = np.empty(len(ensemble))
    for v, g in enumerate(ensemble):
        SF = np.asarray(g.S_bar @ F)
        left = float(np.vdot(F, SF))  # tr(F' S F)
        right = left if symmetric else float(np.vdot(F.T, np.asarray(g.S_bar @ F.T)))  # tr(F' F S)
        H[v] = sq - 0.5 * (left + right) + reg
    return H


def update_beta(H: Sequence[float], lam: float) -> np.ndarray:
    """Closed-form minimizer of ``sum_v beta_v H^v + lam/2 ||beta||^2`` on the simplex.

    Indices are peeled in order of decreasing ``H`` until every survivor
    satisfies ``H^v < (sum_I H + lam) / |I|``; the rest get weight 0.
    """
    H = np.asarray(H, dtype=np.float64)
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    order = np.argsort(-H, kind="stable")
    start = 0
    total = float(H.sum())
    # The smallest H always satisfies the test, so the loop never empties I.
    while start < len(H) - 1:
        size = len(H) - start
        if H[order[start]] < (total + lam) / size:
            break
        total -= H[order[start]]
        start += 1
    valid = order[start:]
    size = len(valid)
    total = float(H[valid].sum())
    beta = np.zeros_like(H)
    beta[valid] = (total - size * H[valid] + lam) / (lam * size)
    return beta


def bcd_objective(H: np.ndarray, beta: np.ndarray, lam: float) -> float:
    return float(beta @ H + 0.5 * lam * beta @ beta)


@dataclass
class BCDResult:
    F: np.ndarray
    weights: WeightVector
    lam: Optional[float]
    iterations: int
    converged: bool
    objective: list = field(default_factory=list)
    beta_trace: list = field(default_factory=list)
    inner_converged: bool = True


def regularizer_matrix(ensemble: GraphEnsemble, kind: str = "identity", reference: int = None) -> np.ndarray:
    """Regularization target ``E``: identity, or ``S_bar`` of the reference graph."""
    if kind == "identity":
        return np.eye(ensemble.n)
    if kind == "reference-graph":
        idx = len(ensemble) // 2 if reference is None else reference
        return ensemble[idx].S_bar.toarray()
    raise ValueError(f"unknown regularizer {kind!r}")


def bcd_solve(ensemble: GraphEnsemble, E: np.ndarray, *, mu: float = 0.0101, lam: Optional[float] = None,
              maxiter: int = 30, inner_iters: int = 3, solver: str = "fixed-point", delta: float = 1e-8,
              outer_tol: float = 1e-6, freeze_beta: bool = False, beta0: Optional[Sequence[float]] = None) -> BCDResult:
    """Alternate ``inner_iters`` F-updates with one closed-form beta update.

    Starts from ``F = E`` and uniform ``beta``. Stops when the relative change
    of ``F`` over an outer iteration is at most ``outer_tol`` or after
    ``maxiter`` outer iterations. With ``lam=None`` the regularizer is set to
    the mean objective value at the first beta update and then held fixed.
    ``objective`` records the joint objective after every beta update.
    """
    E = np.asarray(E, dtype=np.float64)
    m = len(ensemble)
    weights = WeightVector.uniform(m, mu) if beta0 is None else WeightVector(np.asarray(beta0, float), mu)
    F = E.copy()
    _check_shapes(F, E, ensemble)
    result = BCDResult(F=F, weights=weights, lam=lam, iterations=0, converged=False)
    result.beta_trace.append(weights.beta.copy())
    if maxiter == 0:
        return result
    if solver not in ("fixed-point", "cg"):
        raise ValueError(f"unknown solver {solver!r}")

    symmetric = _is_symmetric(E)
    for t in range(1, maxiter + 1):
        alpha = weights.alpha
        F_prev = F
        if solver == "fixed-point":
            A = combined_operator(ensemble, alpha)
            for _ in range(inner_iters):
                F = _diffuse(F, A, float(alpha.sum()), E, symmetric)
        else:
            cg = cg_solve(ensemble, alpha, E, F0=F, delta=delta, maxiter=inner_iters)
            F = cg.F
            result.inner_converged = cg.converged
        H = compute_objectives(F, ensemble, E, mu)
        if lam is None:
            mean_h = float(np.mean(H))
            lam = mean_h if mean_h > 0 else 1.0
            log.debug("lambda resolved to %.6g", lam)
        if not freeze_beta and m > 1:
            weights = WeightVector(update_beta(H, lam), mu)
        result.objective.append(bcd_objective(H, weights.beta, lam))
        result.beta_trace.append(weights.beta.copy())
        result.iterations = t
        change = np.linalg.norm(F - F_prev)
        scale = np.linalg.norm(F_prev)
        if change <= outer_tol * (scale if scale > 0 else 1.0):
            result.converged = True
            break
    result.F = F
    result.weights = weights
    result.lam = lam
    return result
