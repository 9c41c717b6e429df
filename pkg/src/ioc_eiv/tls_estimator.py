"""Total least squares estimator with hard stationarity.

Solves, for a fixed demo covariance, the projection problem

    min_{U, beta}  sum_d (U - U_d)' Sigma_U^{-1} (U - U_d)
    s.t.           J(U) beta = 0,  complementarity, signs, normalization,

and iterates it with a covariance update computed from the current latent
input (outer loop).  The bilinear constraint is handled blockwise: at fixed
``beta`` it is linear in ``U`` (slope ``M_beta``), at fixed ``U`` linear in
``beta``.  The TLS cost does not involve ``beta``, so the beta-step
minimizes the distance to the previous iterate subject to the hard
constraints, which keeps the step well-posed and deterministic.

With noisy data the hard constraint set at fixed ``U`` is usually empty
(more stationarity rows than free multipliers), so the inner solver falls
back to a penalty homotopy on ``||J(U) beta||^2`` with increasing weights
and finishes with an exact re-projection: a joint ``(U, lambda)`` equality
step at fixed ``theta`` that restores ``J(U) beta = 0`` and
complementarity.  When no face pattern admits such a projection the inner
solve completes with the exact optimizer for the current weights instead,
which satisfies all optimality blocks by construction.  The result reports
which path ran.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model
from .demos import DemoSet, sample_mean
from .forward import solve as forward_solve
from .kkt_baseline import NormalizationRule, kkt_single
from .numerics import Infeasible, IterationLimit, NotPositiveDefinite, Qp, solve_qp

__all__ = ["TlsConfig", "TlsResult", "tls_inner", "estimate"]

_ZERO_ROW_TOL = 1e-13
_PROX_WEIGHT = 1e-6


@dataclass(frozen=True, eq=False)
class TlsConfig:
    norm: NormalizationRule | None = None
    max_outer_iters: int = 50
    sigma_tol: float = 1e-6
    ridge: float = 1e-8
    max_inner_iters: int = 100
    cost_tol: float = 1e-9
    active_tol: float = 1e-7
    penalty_weights: tuple = (1e2, 1e4, 1e6)


@dataclass(frozen=True, eq=False)
class TlsResult:
    theta: np.ndarray
    lam: np.ndarray
    U_hat: np.ndarray
    Sigma_U_hat: np.ndarray
    residuals: tuple
    outer_trace: tuple
    path: str
    inner_traces: tuple


class _Inner:
    """Workspace for one tls_inner call (fixed Sigma_U)."""

    def __init__(self, ds, fp, Sigma_U, cfg, bs):
        self.ds = ds
        self.fp = fp
        self.cfg = cfg
        self.bs = bs
        self.q = bs.n_features
        self.L = bs.n_multipliers
        import scipy.linalg

        from .numerics import cholesky

        Lc = cholesky(np.asarray(Sigma_U, dtype=float))
        self.SU_inv = scipy.linalg.cho_solve((Lc, True), np.eye(bs.n_inputs))
        self.SU_inv = 0.5 * (self.SU_inv + self.SU_inv.T)
        self.stackd = ds.stacked()
        self.demo_sum = self.stackd.sum(axis=0)
        self.h_ref = np.abs(np.tile(fp.constraints.h, fp.horizon + 1))
        G = bs.J_lambda.T
        self.G = G
        self.g0 = bs.g_offset
        row_norm = np.max(np.abs(G), axis=1, initial=0.0) if G.shape[0] else np.zeros(0)
        self.nonzero_rows = row_norm > _ZERO_ROW_TOL

    def demo_cost(self, U):
        R = self.stackd - U
        return float(np.sum((R @ self.SU_inv) * R))

    def stationarity_norm(self, U, beta):
        s = self.bs.stationarity(U, beta[: self.q], beta[self.q :])
        return float(np.max(np.abs(s), initial=0.0))

    def activity(self, U):
        g = self.bs.constraint_values(U)
        return (np.abs(g) <= self.cfg.active_tol * (1.0 + self.h_ref)) & self.nonzero_rows

    def beta_step(self, U, beta_prev, weight=None):
        """Update beta at fixed U; exact when weight is None."""
        act = np.flatnonzero(self.activity(U))
        B = np.hstack([self.bs.J_theta(U), self.bs.J_lambda[:, act]])
        nv = self.q + act.size
        v_prev = np.concatenate([beta_prev[: self.q], beta_prev[self.q + act]])
        norm_row = np.zeros(nv)
        norm_row[: self.q] = self.cfg.norm.row(self.q)
        if weight is None:
            Aeq = np.vstack([B, norm_row])
            beq = np.concatenate([np.zeros(B.shape[0]), [self.cfg.norm.value]])
            qp = Qp(H=np.eye(nv), c=-v_prev, Aeq=Aeq, beq=beq,
                    Ain=-np.eye(nv), bin=np.zeros(nv))
        else:
            H = 2.0 * weight * (B.T @ B) + _PROX_WEIGHT * np.eye(nv)
            qp = Qp(H=0.5 * (H + H.T), c=-_PROX_WEIGHT * v_prev,
                    Aeq=norm_row[None, :], beq=np.array([self.cfg.norm.value]),
                    Ain=-np.eye(nv), bin=np.zeros(nv))
        sol = solve_qp(qp)
        beta = np.zeros(self.q + self.L)
        beta[: self.q] = sol.z[: self.q]
        beta[self.q + act] = sol.z[self.q :]
        return beta

    def u_step(self, beta, weight=None):
        """Update U at fixed beta; hard stationarity when weight is None."""
        theta, lam = beta[: self.q], beta[self.q :]
        Mb = self.bs.M_beta(theta)
        Ebeta = self.bs.E_theta @ theta + self.bs.J_lambda @ lam
        D = self.ds.n_demos
        H = 2.0 * D * self.SU_inv
        c = -2.0 * (self.SU_inv @ self.demo_sum)
        pinned = (lam > self.cfg.active_tol) & self.nonzero_rows
        free_rows = self.nonzero_rows & ~pinned
        kw = {}
        if weight is None:
            Aeq = [Mb]
            beq = [-Ebeta]
            if np.any(pinned):
                Aeq.append(self.G[pinned])
                beq.append(-self.g0[pinned])
            kw["Aeq"] = np.vstack(Aeq)
            kw["beq"] = np.concatenate(beq)
        else:
            H = H + 2.0 * weight * (Mb.T @ Mb)
            c = c + 2.0 * weight * (Mb.T @ Ebeta)
            if np.any(pinned):
                kw["Aeq"] = self.G[pinned]
                kw["beq"] = -self.g0[pinned]
        if np.any(free_rows):
            kw["Ain"] = self.G[free_rows]
            kw["bin"] = -self.g0[free_rows]
        sol = solve_qp(Qp(H=0.5 * (H + H.T), c=c, **kw))
        return sol.z

    def project(self, U, beta):
        """Joint (U, lambda) equality projection at fixed theta.

        Restores hard stationarity and complementarity; tries the faces of
        the current iterate first, then the multiplier support, then no
        faces at all.  Returns (U, beta) or None if every pattern fails.
        """
        theta, lam = beta[: self.q], beta[self.q :]
        Mb = self.bs.M_beta(theta)
        Etheta = self.bs.E_theta @ theta
        D = self.ds.n_demos
        mN = self.bs.n_inputs
        candidates = [
            np.flatnonzero(self.activity(U)),
            np.flatnonzero((lam > self.cfg.active_tol) & self.nonzero_rows),
            np.zeros(0, dtype=int),
        ]
        for S in candidates:
            nS = S.size
            H = np.zeros((mN + nS, mN + nS))
            H[:mN, :mN] = 2.0 * D * self.SU_inv
            H[mN:, mN:] = _PROX_WEIGHT * np.eye(nS)
            c = np.concatenate([-2.0 * (self.SU_inv @ self.demo_sum), -_PROX_WEIGHT * lam[S]])
            Aeq = np.zeros((mN + nS, mN + nS))
            Aeq[:mN, :mN] = Mb
            Aeq[:mN, mN:] = self.bs.J_lambda[:, S]
            beq = np.concatenate([-Etheta, -self.g0[S]])
            Aeq[mN : mN + nS, :mN] = self.G[S]
            rest = self.nonzero_rows.copy()
            rest[S] = False
            blocks = {"Aeq": Aeq, "beq": beq}
            ain = []
            bin_ = []
            if np.any(rest):
                ain.append(np.hstack([self.G[rest], np.zeros((int(rest.sum()), nS))]))
                bin_.append(-self.g0[rest])
            if nS:
                lam_block = np.hstack([np.zeros((nS, mN)), -np.eye(nS)])
                ain.append(lam_block)
                bin_.append(np.zeros(nS))
            if ain:
                blocks["Ain"] = np.vstack(ain)
                blocks["bin"] = np.concatenate(bin_)
            try:
                sol = solve_qp(Qp(H=0.5 * (H + H.T), c=c, **blocks))
            except Infeasible:
                continue
            U_new = sol.z[:mN]
            beta_new = np.zeros(self.q + self.L)
            beta_new[: self.q] = theta
            beta_new[self.q + S] = sol.z[mN:]
            return U_new, beta_new
        return None


def tls_inner(ds: DemoSet, fp: model.ForwardProblem, Sigma_U, cfg: TlsConfig,
              init_U, init_beta, bs: model.BilinearStationarity | None = None):
    """One inner solve at fixed covariance.

    Returns ``(U, theta, lam, cost, path, step_trace)`` where ``cost`` is
    the attained demo term and ``step_trace`` records (label, merit value)
    per half-step; the merit is non-increasing within each labelled phase.
    """
    if cfg.norm is None:
        raise ValueError(
            "a NormalizationRule is required: without one the zero solution "
            "satisfies the stationarity constraint trivially"
        )
    if bs is None:
        bs = model.build_stationarity(fp)
    ws = _Inner(ds, fp, Sigma_U, cfg, bs)
    U = np.asarray(init_U, dtype=float).ravel().copy()
    beta = np.asarray(init_beta, dtype=float).ravel().copy()
    trace = []
    path = "exact"

    def alternate(weight):
        nonlocal U, beta
        label = "exact" if weight is None else f"penalty_{weight:g}"

        def merit(U_, beta_):
            val = ws.demo_cost(U_)
            if weight is not None:
                s = ws.bs.stationarity(U_, beta_[: ws.q], beta_[ws.q :])
                val += weight * float(s @ s)
            return val

        last = merit(U, beta)
        trace.append((label, last))
        for _ in range(cfg.max_inner_iters):
            beta_new = ws.beta_step(U, beta, weight)
            m_b = merit(U, beta_new)
            if m_b > last + 1e-12 * max(1.0, abs(last)):
                break
            U_new = ws.u_step(beta_new, weight)
            m_u = merit(U_new, beta_new)
            if m_u > m_b + 1e-12 * max(1.0, abs(m_b)):
                beta = beta_new
                trace.append((label, m_b))
                break
            moved = max(
                float(np.max(np.abs(U_new - U), initial=0.0)),
                float(np.max(np.abs(beta_new - beta), initial=0.0)),
            )
            U, beta = U_new, beta_new
            trace.append((label, m_b))
            trace.append((label, m_u))
            if last - m_u <= cfg.cost_tol * max(1.0, abs(last)) and moved <= 1e-9 * (
                1.0 + float(np.max(np.abs(U), initial=0.0))
            ):
                break
            last = m_u

    try:
        alternate(None)
    except Infeasible:
        path = "penalty"
        for w in cfg.penalty_weights:
            alternate(w)
        proj = ws.project(U, beta)
        if proj is None:
            # the joint projection found no workable face pattern; completing
            # the estimate with the exact optimizer for the current weights
            # restores every optimality block at once
            try:
                fsol = forward_solve(fp, beta[: ws.q])
                proj = fsol.U, np.concatenate([beta[: ws.q], fsol.lam])
            except (Infeasible, IterationLimit, NotPositiveDefinite, ValueError):
                proj = None
        if proj is not None:
            U, beta = proj
        else:
            path = "penalty_unprojected"
    cost = ws.demo_cost(U)
    return U, beta[: ws.q], beta[ws.q :], cost, path, tuple(trace)


def _covariance(ds: DemoSet, U, ridge: float) -> np.ndarray:
    R = ds.stacked() - np.asarray(U, dtype=float).ravel()
    return (R.T @ R) / ds.n_demos + ridge * np.eye(R.shape[1])


def estimate(ds: DemoSet, fp: model.ForwardProblem, cfg: TlsConfig | None = None) -> TlsResult:
    """Full TLS pipeline: alternate covariance updates with inner solves."""
    cfg = cfg or TlsConfig()
    if cfg.norm is None:
        raise ValueError("TlsConfig.norm is required")
    bs = model.build_stationarity(fp)
    U = sample_mean(ds)
    fit = kkt_single(U, fp, cfg.norm)
    beta = np.concatenate([fit.theta, fit.lam_list[0]])

    Sigma_prev = None
    outer_trace = []
    inner_traces = []
    path = "exact"
    theta, lam = beta[: fp.q], beta[fp.q :]
    for _ in range(cfg.max_outer_iters):
        Sigma_U = _covariance(ds, U, cfg.ridge)
        delta = (
            float(np.linalg.norm(Sigma_U - Sigma_prev, ord="fro"))
            if Sigma_prev is not None
            else float("nan")
        )
        if Sigma_prev is not None and delta < cfg.sigma_tol:
            outer_trace.append((float("nan"), delta))
            break
        Sigma_prev = Sigma_U
        U, theta, lam, cost, path, steps = tls_inner(
            ds, fp, Sigma_U, cfg, U, np.concatenate([theta, lam]), bs=bs
        )
        outer_trace.append((cost, delta))
        inner_traces.append(steps)

    U_hat = U
    Sigma_hat = _covariance(ds, U_hat, cfg.ridge)
    residuals = tuple(U_d - U_hat for U_d in ds.U_list)
    return TlsResult(
        theta=theta,
        lam=lam,
        U_hat=U_hat,
        Sigma_U_hat=Sigma_hat,
        residuals=residuals,
        outer_trace=tuple(outer_trace),
        path=path,
        inner_traces=tuple(inner_traces),
    )
