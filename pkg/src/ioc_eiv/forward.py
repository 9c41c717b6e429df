"""Forward solver: optimal inputs and multipliers for a given weight vector.

Because the dynamics are linear and every feature is a squared deviation,
the stage cost summed over the horizon is a strictly convex quadratic in
the stacked input ``U`` whenever the weighted curvature ``sum_j theta_j Mj``
is positive definite (guaranteed in practice by giving every input channel
its own quadratic feature).  The constrained problem is therefore one QP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .numerics import Infeasible, Qp, solve_qp

__all__ = ["ForwardSolution", "solve", "objective"]

_ZERO_ROW_TOL = 1e-13


@dataclass(frozen=True, eq=False)
class ForwardSolution:
    """Optimal stacked input, full multiplier vector, and binding rows."""

    U: np.ndarray
    lam: np.ndarray
    active_set: tuple
    objective: float


def objective(fp: model.ForwardProblem, theta, U) -> float:
    """Cost of input sequence ``U`` evaluated by explicit rollout."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape[0] != fp.q:
        raise ValueError(f"theta has length {theta.shape[0]}, expected q = {fp.q}")
    m, N = fp.system.m, fp.horizon
    U = np.asarray(U, dtype=float).ravel()
    X = model.rollout(fp.system, fp.x0, U, N)
    total = 0.0
    for k in range(N):
        total += float(theta @ model.feature_values(fp, X[k], U[k * m : (k + 1) * m]))
    return total


def solve(fp: model.ForwardProblem, theta) -> ForwardSolution:
    """Solve the forward problem for weights ``theta`` (elementwise > 0).

    Returns the optimal ``U``, the multiplier vector (flat, step-major,
    zero on rows excluded at the terminal step), and the binding rows.
    The result satisfies the stationarity, complementarity, and
    feasibility blocks of :func:`ioc_eiv.model.kkt_residual` to 1e-6.
    """
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.shape[0] != fp.q:
        raise ValueError(f"theta has length {theta.shape[0]}, expected q = {fp.q}")
    if np.any(theta <= 0):
        raise ValueError("theta must be elementwise positive")
    bs = model.build_stationarity(fp)

    H = bs.M_beta(theta)
    c = bs.E_theta @ theta

    # constraint rows: g(U) = J_lambda' U + g_offset <= 0
    G = bs.J_lambda.T
    g0 = bs.g_offset
    row_norm = np.max(np.abs(G), axis=1, initial=0.0) if G.shape[0] else np.zeros(0)
    nonzero = row_norm > _ZERO_ROW_TOL
    const_viol = g0[~nonzero]
    if const_viol.size and np.max(const_viol) > 1e-9:
        k_bad = int(np.argmax(~nonzero & (g0 > 1e-9)))
        raise Infeasible(
            f"constraint row {k_bad} is constant and violated (value {g0[k_bad]:.3e})"
        )
    idx = np.flatnonzero(nonzero)
    qp = Qp(H=H, c=c, Ain=G[idx], bin=-g0[idx]) if idx.size else Qp(H=H, c=c)
    sol = solve_qp(qp)

    lam = np.zeros(fp.n_multipliers)
    if idx.size:
        lam[idx] = sol.mult_in
    active = tuple(int(idx[i]) for i in sol.active_set) if idx.size else ()
    return ForwardSolution(
        U=sol.z, lam=lam, active_set=active, objective=objective(fp, theta, sol.z)
    )
