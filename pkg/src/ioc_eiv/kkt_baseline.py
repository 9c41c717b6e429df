"""Baseline inverse KKT estimator: least squares on the stationarity residual.

Weights ``theta`` are shared across demonstrations while each demonstration
gets its own multipliers.  Complementarity is handled by classifying each
constraint row as active or inactive at the (noisy) demonstration itself:
inactive rows have their multiplier pinned to zero, active rows keep a free
nonnegative multiplier.  Because the stationarity residual is homogeneous
in ``(theta, lam)``, a normalization rule is mandatory; without one the
zero vector is a perfect minimizer and the estimator refuses to run.

This estimator treats the noisy inputs as exact regressors, which is what
makes it inconsistent: the quadratic terms of the residual accumulate a
noise-variance bias that does not average away with more demonstrations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .demos import DemoSet
from .numerics import Qp, solve_qp

__all__ = ["NormalizationRule", "KktLsResult", "kkt_ls", "kkt_single", "demo_activity"]

# |g| <= ACTIVITY_TOL * (1 + |h_row|) marks a row active at a demonstration
ACTIVITY_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class NormalizationRule:
    """Scale anchor for the homogeneous stationarity fit.

    ``kind='sum'`` fixes ``sum(theta) = value``; ``kind='component'`` fixes
    ``theta[index] = value``.
    """

    kind: str
    value: float = 1.0
    index: int = 0

    def __post_init__(self):
        if self.kind not in ("sum", "component"):
            raise ValueError(f"kind must be 'sum' or 'component', got {self.kind!r}")
        if self.value <= 0:
            raise ValueError(f"normalization value must be positive, got {self.value}")
        object.__setattr__(self, "value", float(self.value))

    def row(self, q: int) -> np.ndarray:
        r = np.zeros(q)
        if self.kind == "sum":
            r[:] = 1.0
        else:
            if not 0 <= self.index < q:
                raise ValueError(f"component index {self.index} out of range for q = {q}")
            r[self.index] = 1.0
        return r


@dataclass(frozen=True, eq=False)
class KktLsResult:
    theta: np.ndarray
    lam_list: tuple
    residual: float


def demo_activity(bs: model.BilinearStationarity, U, tol: float = ACTIVITY_TOL, h_ref=None) -> np.ndarray:
    """Boolean mask of rows counted active at ``U``.

    ``h_ref`` supplies the per-row scale (defaults to |g_offset| which
    contains the -h part); the classification is |g| <= tol * (1 + scale).
    """
    g = bs.constraint_values(U)
    scale = np.abs(h_ref) if h_ref is not None else np.abs(bs.g_offset)
    return np.abs(g) <= tol * (1.0 + scale)


def kkt_ls(ds: DemoSet, fp: model.ForwardProblem, norm: NormalizationRule) -> KktLsResult:
    """Joint least-squares fit of shared weights and per-demo multipliers.

    Minimizes the summed squared stationarity residual over all
    demonstrations subject to ``theta >= 0``, active multipliers >= 0, and
    the normalization rule.  Returns full-length multiplier vectors with
    zeros on inactive rows; ``residual`` is the attained sum of squares.
    """
    if norm is None:
        raise ValueError(
            "a NormalizationRule is required: without one the zero solution "
            "minimizes the homogeneous residual"
        )
    bs = model.build_stationarity(fp)
    q, L = fp.q, fp.n_multipliers
    if not any(np.any(np.abs(E) > 0) or np.any(np.abs(M) > 0)
               for E, M in zip(bs.E_theta.T, bs.Mj)):
        raise ValueError("all features have identically zero gradients")

    h_ref = np.abs(np.tile(fp.constraints.h, fp.horizon + 1))
    # multipliers with a zero stationarity column (rows that no input can
    # influence) are unidentifiable; leave them out of the fit
    identifiable = np.max(np.abs(bs.J_lambda), axis=0, initial=0.0) > 1e-13
    blocks = []   # per demo: (J_theta_d, J_act_d, active_idx)
    offsets = [q]
    for U_d in ds.U_list:
        act = np.flatnonzero(demo_activity(bs, U_d, h_ref=h_ref) & identifiable)
        Jt = bs.J_theta(U_d)
        Ja = bs.J_lambda[:, act]
        blocks.append((Jt, Ja, act))
        offsets.append(offsets[-1] + act.size)
    nvar = offsets[-1]

    H = np.zeros((nvar, nvar))
    for d, (Jt, Ja, act) in enumerate(blocks):
        s = slice(offsets[d], offsets[d + 1])
        H[:q, :q] += 2.0 * Jt.T @ Jt
        if act.size:
            H[:q, s] = 2.0 * Jt.T @ Ja
            H[s, :q] = H[:q, s].T
            H[s, s] = 2.0 * Ja.T @ Ja
    c = np.zeros(nvar)

    Aeq = np.zeros((1, nvar))
    Aeq[0, :q] = norm.row(q)
    beq = np.array([norm.value])
    Ain = -np.eye(nvar)  # theta >= 0 and active multipliers >= 0
    bin_ = np.zeros(nvar)

    sol = solve_qp(Qp(H=H, c=c, Aeq=Aeq, beq=beq, Ain=Ain, bin=bin_))
    theta = sol.z[:q].copy()
    lam_list = []
    for d, (_, _, act) in enumerate(blocks):
        lam = np.zeros(L)
        lam[act] = sol.z[offsets[d] : offsets[d + 1]]
        lam_list.append(lam)
    resid = 0.5 * float(sol.z @ H @ sol.z)
    return KktLsResult(theta=theta, lam_list=tuple(lam_list), residual=resid)


def kkt_single(U, fp: model.ForwardProblem, norm: NormalizationRule) -> KktLsResult:
    """Single-trajectory inverse KKT fit (the D = 1 case of :func:`kkt_ls`)."""
    U = np.asarray(U, dtype=float).ravel()
    ds = DemoSet(U_list=(U,), x0=fp.x0, fp_ref=fp, U_star=None)
    return kkt_ls(ds, fp, norm)
