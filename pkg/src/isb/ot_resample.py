"""Entropy-regularized optimal transport for deterministic resampling.

A weighted ensemble (states X, simplex weights w) is transported onto the
same support with uniform weights.  The coupling P lives on the polytope

    sum_n P[i, n] = 1/N   (rows: the uniformly weighted output particles)
    sum_i P[i, n] = w[n]  (columns: the weighted input particles)

and the ensemble transform is T = N * P, so each row of T is a convex
combination and the resampled states are X' = T @ X.  Feasibility of the
column marginal makes the resampled mean equal the w-weighted input mean
exactly, and for uniform weights with small regularization T approaches the
identity, turning resampling into a no-op.

The solver is a log-domain Sinkhorn iteration with over-relaxation and a
geometric epsilon-annealing warm start; with squared-distance costs many
times larger than epsilon, plain Sinkhorn needs thousands of iterations
while the annealed variant typically converges in a few hundred.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SinkhornConfig",
    "SinkhornError",
    "TransportPlan",
    "cost_matrix",
    "sinkhorn",
    "resample",
    "write_plan_csv",
]

_WEIGHT_FLOOR = 1e-30  # zero weights make Gibbs-kernel columns degenerate


class SinkhornError(RuntimeError):
    """Raised when the iteration budget runs out; carries the last error."""

    def __init__(self, message: str, marginal_error: float):
        super().__init__(message)
        self.marginal_error = marginal_error


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.01
    max_iters: int = 10_000
    marginal_tol: float = 1e-8
    log_domain: bool = True
    # solver accelerations; both are exact at the fixed point
    over_relaxation: float = 1.5
    anneal: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.marginal_tol <= 0:
            raise ValueError("marginal_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0.0 < self.over_relaxation < 2.0:
            raise ValueError("over_relaxation must lie in (0, 2)")


@dataclass(frozen=True)
class TransportPlan:
    """Optimal coupling P, transform T = N*P, and solve diagnostics."""

    plan: np.ndarray
    transform: np.ndarray
    epsilon: float
    iterations_used: int
    marginal_error: float

    @property
    def n(self) -> int:
        return self.plan.shape[0]


def cost_matrix(X: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances; exactly symmetric, zero diagonal."""
    X = np.asarray(X, dtype=np.float64)
    if not np.isfinite(X).all():
        raise ValueError("states must be finite")
    sq = np.einsum("ij,ij->i", X, X)
    C = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    C = 0.5 * (C + C.T)
    np.maximum(C, 0.0, out=C)
    np.fill_diagonal(C, 0.0)
    return C


def _lse_rows(M):
    mx = M.max(axis=1)
    return mx + np.log(np.exp(M - mx[:, None]).sum(axis=1))


def _lse_cols(M):
    mx = M.max(axis=0)
    return mx + np.log(np.exp(M - mx[None, :]).sum(axis=0))


def _marginal_error(P, row_target, col_target):
    return max(
        float(np.abs(P.sum(axis=1) - row_target).max()),
        float(np.abs(P.sum(axis=0) - col_target).max()),
    )


def _sinkhorn_log(a, b, C, cfg):
    """Potentials solve: P = exp((f_i + g_j - C_ij)/eps), rows->a, cols->b."""
    la, lb = np.log(a), np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    omega = cfg.over_relaxation
    eps = cfg.epsilon

    levels = [eps]
    if cfg.anneal:
        pos = C[C > 0.0]
        start = 0.5 * float(np.median(pos)) if pos.size else eps
        e = start
        while e > eps * 10.0:
            levels.append(e)
            e *= 0.1
        levels = sorted(set(levels), reverse=True)

    total = 0
    err = np.inf
    for e in levels:
        final = e == eps
        budget = cfg.max_iters if final else min(30, cfg.max_iters)
        for it in range(budget):
            ft = e * la - e * _lse_rows((g[None, :] - C) / e)
            f = (1.0 - omega) * f + omega * ft
            gt = e * lb - e * _lse_cols((f[:, None] - C) / e)
            g = (1.0 - omega) * g + omega * gt
            total += 1
            if final and (it % 10 == 9 or it == budget - 1):
                P = np.exp((f[:, None] + g[None, :] - C) / e)
                err = _marginal_error(P, a, b)
                if err <= cfg.marginal_tol:
                    return P, total, err
    P = np.exp((f[:, None] + g[None, :] - C) / eps)
    return P, total, _marginal_error(P, a, b)


def _sinkhorn_linear(a, b, C, cfg):
    K = np.exp(-C / cfg.epsilon)
    if not np.all(K.sum(axis=1) > 0.0) or not np.all(K.sum(axis=0) > 0.0):
        raise FloatingPointError(
            "Gibbs kernel underflowed to zero; use log_domain=True"
        )
    u = np.ones_like(a)
    v = np.ones_like(b)
    err = np.inf
    for it in range(cfg.max_iters):
        u = a / (K @ v)
        v = b / (K.T @ u)
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise FloatingPointError(
                "Sinkhorn scalings overflowed; use log_domain=True"
            )
        if it % 10 == 9:
            P = u[:, None] * K * v[None, :]
            err = _marginal_error(P, a, b)
            if err <= cfg.marginal_tol:
                return P, it + 1, err
    P = u[:, None] * K * v[None, :]
    return P, cfg.max_iters, _marginal_error(P, a, b)


def sinkhorn(w: np.ndarray, C: np.ndarray, cfg: SinkhornConfig) -> TransportPlan:
    """Solve for the coupling between weights w and the uniform measure.

    Raises SinkhornError when the marginal tolerance is not reached within
    the iteration budget.
    """
    w = np.asarray(w, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    n = w.shape[0]
    if C.shape != (n, n):
        raise ValueError(f"cost matrix shape {C.shape} does not match {n} weights")
    if not np.isfinite(C).all() or C.min() < 0:
        raise ValueError("cost matrix must be finite and non-negative")
    if abs(w.sum() - 1.0) > 1e-10 or w.min() < 0:
        raise ValueError("weights must lie on the simplex")
    w = np.maximum(w, _WEIGHT_FLOOR)
    w = w / w.sum()
    uniform = np.full(n, 1.0 / n)

    solver = _sinkhorn_log if cfg.log_domain else _sinkhorn_linear
    inner = SinkhornConfig(cfg.epsilon, cfg.max_iters, 0.5 * cfg.marginal_tol,
                           cfg.log_domain, cfg.over_relaxation, cfg.anneal)
    # columns whose weight cannot move the marginals by a fraction of the
    # tolerance are coupled independently and excluded from the solve
    thresh = cfg.marginal_tol * 1e-3 / n
    sig = w >= thresh
    if cfg.log_domain and 0 < sig.sum() < n:
        w_sig = w[sig] / w[sig].sum()
        P_sig, iters, err = solver(uniform, w_sig, C[:, sig], inner)
        P = np.empty((n, n))
        P[:, sig] = P_sig * w[sig].sum()
        P[:, ~sig] = uniform[:, None] * w[~sig][None, :]
    else:
        P, iters, err = solver(uniform, w, C, inner)
    # rebalance columns exactly onto w so the resampled mean preserves the
    # weighted input mean to machine precision; rows absorb the slack
    col = P.sum(axis=0)
    P = P * (w / col)[None, :]
    err = _marginal_error(P, uniform, w)
    if err > cfg.marginal_tol:
        raise SinkhornError(
            f"no convergence in {cfg.max_iters} iterations "
            f"(marginal error {err:.3e} > tol {cfg.marginal_tol:.1e})",
            marginal_error=err,
        )
    return TransportPlan(P, n * P, cfg.epsilon, iters, err)


def resample(X: np.ndarray, w: np.ndarray, cfg: SinkhornConfig):
    """Deterministic ensemble-transform resampling.

    Output row i is sum_n T[i, n] * X[n]; the returned plan is cached by the
    caller for loss evaluation.  The output carries implicit uniform weights.
    """
    X = np.asarray(X, dtype=np.float64)
    plan = sinkhorn(w, cost_matrix(X), cfg)
    return plan.transform @ X, plan


def write_plan_csv(path: str, plan: TransportPlan, threshold: float = 1e-12) -> None:
    """Dump entries of P above threshold as rows `i,j,P_ij` (debug aid)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "P_ij"])
        ii, jj = np.nonzero(plan.plan > threshold)
        for i, j in zip(ii, jj):
            writer.writerow([int(i), int(j), repr(float(plan.plan[i, j]))])
