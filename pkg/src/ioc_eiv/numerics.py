"""Dense numerical kernels: Cholesky factorization and a strictly convex QP solver.

The QP solver is a textbook primal active-set method.  The choice is
deliberate: every estimator in this package needs *exact* active sets and
bit-reproducible solves, which first-order or interior-point methods do not
give.  Determinism is pinned down by two rules:

* the entering constraint is the lowest-index row among those blocking at
  the minimal step length;
* a constraint is deemed active when ``|a z - b| <= 1e-7 * (1 + |b|)``.

If the Hessian fails to factor, ``1e-10 * trace(H)/dim`` is added to the
diagonal once and the factorization retried; a second failure raises
:class:`NotPositiveDefinite`.

Solves the problem

    min  0.5 z' H z + c' z
    s.t. Aeq z  = beq
         Ain z <= bin

with H symmetric positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.linalg import lapack
from scipy.optimize import linprog

__all__ = [
    "NotPositiveDefinite",
    "Infeasible",
    "IterationLimit",
    "Qp",
    "QpSolution",
    "cholesky",
    "solve_qp",
    "ACTIVE_TOL",
    "DUAL_TOL",
]

# constraint row i counts as active when |a_i z - b_i| <= ACTIVE_TOL * (1 + |b_i|)
ACTIVE_TOL = 1e-7
# inequality multipliers may dip this far below zero before we call it an error
DUAL_TOL = 1e-10
_FEAS_TOL = 1e-9


class NotPositiveDefinite(ValueError):
    """Matrix is not positive definite.

    ``minor_index`` is the 1-based order of the first failing leading minor.
    """

    def __init__(self, minor_index: int, message: str | None = None):
        self.minor_index = int(minor_index)
        super().__init__(
            message or f"matrix is not positive definite (leading minor {minor_index})"
        )


class Infeasible(RuntimeError):
    """Constraint set is empty (or inconsistent beyond tolerance)."""


class IterationLimit(RuntimeError):
    """Active-set loop exceeded its iteration budget (100 * dim)."""


def cholesky(M) -> np.ndarray:
    """Lower-triangular factor L with ``L L' = M`` for symmetric PD ``M``.

    Raises :class:`NotPositiveDefinite` carrying the index of the first
    non-positive leading minor, and ValueError for an asymmetric input.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    scale = np.max(np.abs(M)) if M.size else 0.0
    if M.size and np.max(np.abs(M - M.T)) > 1e-10 * (1.0 + scale):
        raise ValueError("matrix is not symmetric to tolerance 1e-10")
    if M.shape[0] == 0:
        return np.zeros((0, 0))
    Msym = 0.5 * (M + M.T)
    L, info = lapack.dpotrf(Msym, lower=1)
    if info > 0:
        raise NotPositiveDefinite(info)
    if info < 0:
        raise ValueError(f"invalid input to factorization (argument {-info})")
    return np.tril(L)


@dataclass(frozen=True, eq=False)
class Qp:
    """One strictly convex quadratic program."""

    H: np.ndarray
    c: np.ndarray
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None
    Ain: np.ndarray | None = None
    bin: np.ndarray | None = None

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        c = np.asarray(self.c, dtype=float).ravel()
        n = c.shape[0]
        if H.shape != (n, n):
            raise ValueError(f"H has shape {H.shape}, expected ({n}, {n})")
        Aeq, beq = _normalize_block(self.Aeq, self.beq, n, "Aeq", "beq")
        Ain, bin_ = _normalize_block(self.Ain, self.bin, n, "Ain", "bin")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "Aeq", Aeq)
        object.__setattr__(self, "beq", beq)
        object.__setattr__(self, "Ain", Ain)
        object.__setattr__(self, "bin", bin_)

    @property
    def dim(self) -> int:
        return self.c.shape[0]


def _normalize_block(A, b, n, a_name, b_name):
    if A is None and b is None:
        return np.zeros((0, n)), np.zeros(0)
    if A is None or b is None:
        raise ValueError(f"{a_name} and {b_name} must be given together")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float)).ravel()
    if A.shape != (b.shape[0], n):
        raise ValueError(
            f"{a_name} has shape {A.shape}, expected ({b.shape[0]}, {n})"
    )
    return A, b


@dataclass
class QpSolution:
    """Solution report of :func:`solve_qp`. ``status`` is always 'optimal'
    on return; failure modes raise instead."""

    z: np.ndarray
    active_set: tuple
    mult_eq: np.ndarray
    mult_in: np.ndarray
    status: str
    n_iter: int
    kkt_residual: float = field(default=0.0)


def _chol_with_regularization(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Factor H, retrying once with the documented diagonal bump."""
    try:
        return cholesky(H), H
    except NotPositiveDefinite:
        n = H.shape[0]
        bump = 1e-10 * np.trace(H) / max(n, 1)
        if bump <= 0:
            bump = 1e-10
        Hreg = H + bump * np.eye(n)
        return cholesky(Hreg), Hreg  # second failure propagates


def _cho_solve(L: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    return scipy.linalg.cho_solve((L, True), rhs)


def _eliminate_equalities(Aeq, beq, n):
    """Particular solution plus orthonormal null-space basis.

    Raises Infeasible when the equalities are inconsistent.
    """
    U, s, Vt = np.linalg.svd(Aeq, full_matrices=True)
    tol = max(Aeq.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    r = int(np.sum(s > tol))
    if r == 0:
        z_part = np.zeros(n)
    else:
        z_part = Vt[:r].T @ ((U[:, :r].T @ beq) / s[:r])
    resid = np.max(np.abs(Aeq @ z_part - beq), initial=0.0)
    if resid > _FEAS_TOL * (1.0 + np.max(np.abs(beq), initial=0.0)):
        raise Infeasible(f"equality constraints are inconsistent (residual {resid:.3e})")
    Z = Vt[r:].T  # n x (n - r), orthonormal columns
    return z_part, Z


def _eqp(L, c, A, b):
    """Solve min 0.5 y'Hy + c'y s.t. A y = b given L = chol(H).

    Returns (y, mu) with stationarity H y + c + A' mu = 0.
    """
    Hinv_c = _cho_solve(L, c)
    if A.shape[0] == 0:
        return -Hinv_c, np.zeros(0)
    Hinv_At = _cho_solve(L, A.T)
    S = A @ Hinv_At
    rhs = -(b + A @ Hinv_c)
    mu = np.linalg.solve(S, rhs)
    y = -(Hinv_c + Hinv_At @ mu)
    return y, mu


def _independent_rows(A, rows):
    """Greedy prune of ``rows`` so that A[rows] has full row rank."""
    kept = []
    for i in rows:
        cand = A[kept + [i]]
        if np.linalg.matrix_rank(cand) == len(kept) + 1:
            kept.append(i)
    return kept


def _feasible(A, b, y, tol):
    if A.shape[0] == 0:
        return True
    return bool(np.all(A @ y - b <= tol))


def _phase1(Ar, br):
    """LP feasibility: min sum(s) s.t. Ar y - s <= br, s >= 0."""
    ni, nz = Ar.shape
    cost = np.concatenate([np.zeros(nz), np.ones(ni)])
    A_ub = np.hstack([Ar, -np.eye(ni)])
    bounds = [(None, None)] * nz + [(0, None)] * ni
    res = linprog(cost, A_ub=A_ub, b_ub=br, bounds=bounds, method="highs")
    scale = 1.0 + np.max(np.abs(br), initial=0.0)
    if not res.success or res.fun > 1e-7 * scale:
        raise Infeasible("inequality constraints have no feasible point")
    return res.x[:nz]


def _active_set_loop(L, Hr, cr, Ar, br, y, W, max_iter):
    """Primal active-set iteration on the reduced (equality-free) problem."""
    n_in = Ar.shape[0]
    W = sorted(W)
    stall = 0
    full_prev = False
    for it in range(1, max_iter + 1):
        g = Hr @ y + cr
        A_W = Ar[W] if W else np.zeros((0, y.shape[0]))
        p, mu = _eqp(L, g, A_W, np.zeros(len(W)))
        at_minimum = np.max(np.abs(p), initial=0.0) <= 1e-10 * (
            1.0 + np.max(np.abs(y), initial=0.0)
        )
        alpha = 1.0
        blocker = -1
        if not at_minimum:
            # step length to the nearest blocking constraint
            for i in range(n_in):
                if i in W:
                    continue
                ai_p = float(Ar[i] @ p)
                denom = 1.0 + float(np.abs(Ar[i]).max(initial=0.0)) * float(np.abs(p).max(initial=0.0))
                if ai_p <= 1e-12 * denom:
                    continue
                slack = max(float(br[i] - Ar[i] @ y), 0.0)
                a = slack / ai_p
                if a < alpha - 1e-13 * (1.0 + alpha):
                    alpha, blocker = a, i
                # ties resolve to the lowest index automatically (ascending scan)
            if full_prev and blocker < 0:
                # the previous iteration already took an exact full Newton
                # step on this working set, so a second unblocked direction
                # is round-off at the current conditioning, not descent
                at_minimum = True
        if at_minimum:
            if not W or (mu.size and np.min(mu) >= -DUAL_TOL) or mu.size == 0:
                return y, dict(zip(W, mu)), it
            # drop the most negative multiplier; once degenerate pivots pile
            # up, drop the lowest-indexed negative one instead, which cannot
            # revisit a working set
            if stall > n_in + 20:
                j = int(np.flatnonzero(mu < -DUAL_TOL)[0])
            else:
                j = int(np.argmin(mu))
            W.pop(j)
            stall += 1
            full_prev = False
            continue
        y = y + alpha * p
        stall = stall + 1 if alpha <= 1e-13 else 0
        full_prev = blocker < 0
        if blocker >= 0:
            W.append(blocker)
            W.sort()
    raise IterationLimit(f"active-set loop exceeded {max_iter} iterations")


def solve_qp(qp: Qp, warm_start=None) -> QpSolution:
    """Solve a strictly convex QP with a primal active-set method.

    ``warm_start`` is an optional iterable of inequality row indices to try
    as the initial working set.  Warm and cold starts reach the same
    minimizer (it is unique); only the path differs.

    Raises Infeasible, IterationLimit, or NotPositiveDefinite.
    """
    n = qp.dim
    L_full, H = _chol_with_regularization(qp.H)
    c = qp.c
    Aeq, beq, Ain, bin_ = qp.Aeq, qp.beq, qp.Ain, qp.bin

    if Aeq.shape[0]:
        z_part, Z = _eliminate_equalities(Aeq, beq, n)
    else:
        z_part, Z = np.zeros(n), np.eye(n)

    nz = Z.shape[1]
    n_in = Ain.shape[0]
    feas_scale = _FEAS_TOL * (1.0 + np.max(np.abs(bin_), initial=0.0))

    if nz == 0:
        z = z_part
        if not _feasible(Ain, bin_, z, feas_scale):
            raise Infeasible("equality constraints pin an infeasible point")
        mult_in = np.zeros(n_in)
        n_iter = 0
    else:
        Hr = Z.T @ H @ Z
        cr = Z.T @ (H @ z_part + c)
        Lr = cholesky(Hr)  # SPD because H is
        Ar = Ain @ Z
        br = bin_ - Ain @ z_part

        y0, W0 = None, []
        if warm_start is not None and n_in:
            ws = [int(i) for i in warm_start if 0 <= int(i) < n_in]
            ws = _independent_rows(Ar, sorted(set(ws)))
            if ws:
                y_try, _ = _eqp(Lr, cr, Ar[ws], br[ws])
                if _feasible(Ar, br, y_try, feas_scale):
                    y0, W0 = y_try, ws
        if y0 is None:
            y_unc = -_cho_solve(Lr, cr)
            if _feasible(Ar, br, y_unc, feas_scale):
                y0, W0 = y_unc, []
        if y0 is None and _feasible(Ar, br, np.zeros(nz), feas_scale):
            y0, W0 = np.zeros(nz), []
        if y0 is None:
            y0 = _phase1(Ar, br)
            resid = Ar @ y0 - br
            if np.max(resid, initial=0.0) > 1e-7 * (1.0 + np.max(np.abs(br), initial=0.0)):
                raise Infeasible("inequality constraints have no feasible point")
            cand = [i for i in range(n_in) if resid[i] >= -ACTIVE_TOL * (1.0 + abs(br[i]))]
            W0 = _independent_rows(Ar, cand)

        max_iter = 100 * max(nz, 1)
        y, mu_map, n_iter = _active_set_loop(Lr, Hr, cr, Ar, br, y0, list(W0), max_iter)

        # polish: place the iterate exactly on its working faces
        W = sorted(mu_map)
        if W:
            y_pol, mu_pol = _eqp(Lr, cr, Ar[W], br[W])
            if _feasible(Ar, br, y_pol, feas_scale) and (mu_pol.size == 0 or np.min(mu_pol) >= -DUAL_TOL):
                y = y_pol
                mu_map = dict(zip(W, mu_pol))

        z = z_part + Z @ y
        mult_in = np.zeros(n_in)
        for i, mi in mu_map.items():
            mult_in[i] = max(mi, 0.0) if mi >= -DUAL_TOL else mi

    # equality multipliers from stationarity
    grad = H @ z + c + (Ain.T @ mult_in if n_in else 0.0)
    if Aeq.shape[0]:
        mult_eq = np.linalg.lstsq(Aeq.T, -grad, rcond=None)[0]
    else:
        mult_eq = np.zeros(0)

    active = tuple(
        i for i in range(n_in)
        if abs(float(Ain[i] @ z - bin_[i])) <= ACTIVE_TOL * (1.0 + abs(bin_[i]))
    )
    stat = H @ z + c
    if n_in:
        stat = stat + Ain.T @ mult_in
    if Aeq.shape[0]:
        stat = stat + Aeq.T @ mult_eq
    kkt = float(np.max(np.abs(stat), initial=0.0))
    if n_in:
        kkt = max(kkt, float(np.max(Ain @ z - bin_, initial=0.0)))
        kkt = max(kkt, float(np.max(np.abs(mult_in * (Ain @ z - bin_)), initial=0.0)))
    if Aeq.shape[0]:
        kkt = max(kkt, float(np.max(np.abs(Aeq @ z - beq), initial=0.0)))
    return QpSolution(
        z=z,
        active_set=active,
        mult_eq=mult_eq,
        mult_in=mult_in,
        status="optimal",
        n_iter=n_iter,
        kkt_residual=kkt,
    )
