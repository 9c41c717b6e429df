"""Rollout, stacked dynamics, stationarity assembly, and KKT residuals."""

import numpy as np

import oracles
from ioc_eiv import (
    ForwardProblem,
    LinearSystem,
    QuadraticFeature,
    build_stationarity,
    kkt_residual,
    rollout,
    solve_forward,
    stack_dynamics,
)
from ioc_eiv.model import lagrangian, multiplier_index


def test_rollout_zero_everything():
    sysd = LinearSystem(oracles.SPRING_A, oracles.SPRING_B)
    xs = rollout(sysd, np.zeros(2), np.zeros(5), 5)
    assert xs.shape == (6, 2)
    assert np.all(xs == 0.0)


def test_rollout_identity_accumulates_inputs():
    sysd = LinearSystem(np.eye(1), np.eye(1))
    xs = rollout(sysd, np.array([1.0]), np.array([1.0, 1.0]), 2)
    np.testing.assert_allclose(xs.ravel(), [1.0, 2.0, 3.0])


def test_rollout_matches_scalar_recursion():
    # free response of the benchmark system against an explicit loop
    sysd = LinearSystem(oracles.SPRING_A, oracles.SPRING_B)
    x0 = np.array([1.0, 0.1])
    N = 10
    xs = rollout(sysd, x0, np.zeros(N), N)
    x = x0.copy()
    for k in range(N):
        np.testing.assert_allclose(xs[k], x, rtol=0, atol=1e-14)
        x = oracles.SPRING_A @ x
    np.testing.assert_allclose(xs[N], x, rtol=0, atol=1e-14)


def test_stack_dynamics_scalar_blocks():
    a, b = 0.7, 1.3
    sysd = LinearSystem(np.array([[a]]), np.array([[b]]))
    sd = stack_dynamics(sysd, 2)
    np.testing.assert_allclose(sd.Abar.ravel(), [1.0, a, a * a])
    np.testing.assert_allclose(sd.Bbar, [[0.0, 0.0], [b, 0.0], [a * b, b]])


def test_stack_dynamics_first_block_identity():
    rng = np.random.default_rng(3)
    n, m, N = 3, 2, 4
    sysd = LinearSystem(rng.standard_normal((n, n)), rng.standard_normal((n, m)))
    sd = stack_dynamics(sysd, N)
    np.testing.assert_allclose(sd.Abar[:n], np.eye(n))
    assert np.all(sd.Bbar[:n] == 0.0)


def test_stack_dynamics_reproduces_rollout():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(1, 4))
        m = int(rng.integers(1, 3))
        N = int(rng.integers(1, 7))
        sysd = LinearSystem(rng.standard_normal((n, n)), rng.standard_normal((n, m)))
        x0 = rng.standard_normal(n)
        U = rng.standard_normal(m * N)
        sd = stack_dynamics(sysd, N)
        stacked = sd.Abar @ x0 + sd.Bbar @ U
        np.testing.assert_allclose(
            stacked, rollout(sysd, x0, U, N).ravel(), rtol=1e-12, atol=1e-12
        )


def _stationarity(bs, theta, lam, U):
    MU = sum(t * (M @ U) for t, M in zip(theta, bs.Mj))
    return MU + bs.E_theta @ theta + bs.J_lambda @ lam


def _gradient_oracle(fp, theta, lam, U):
    """Lagrangian gradient in U by explicit chain-rule loops."""
    n = fp.system.A.shape[0]
    m = fp.system.B.shape[1]
    N = fp.horizon
    sd = stack_dynamics(fp.system, N)
    xs = (sd.Abar @ fp.x0 + sd.Bbar @ U).reshape(N + 1, n)
    grad = np.zeros(m * N)
    for j, feat in enumerate(fp.features):
        for k in range(N):
            if feat.kind == "state":
                dev = xs[k, feat.index] - feat.target
                grad += 2.0 * theta[j] * dev * sd.Bbar[k * n + feat.index]
            else:
                dev = U[k * m + feat.index] - feat.target
                grad[k * m + feat.index] += 2.0 * theta[j] * dev
    Hx, Hu = fp.constraints.Hx, fp.constraints.Hu
    n_rows = Hx.shape[0]
    for k in range(N + 1):
        for i in range(n_rows):
            lam_ik = lam[multiplier_index(i, k, n_rows)]
            grad += lam_ik * (Hx[i] @ sd.Bbar[k * n : (k + 1) * n])
            if k < N:
                grad[k * m : (k + 1) * m] += lam_ik * Hu[i]
    return grad


def test_stationarity_matches_chain_rule_oracle():
    fp = oracles.spring_damper()
    bs = build_stationarity(fp)
    rng = np.random.default_rng(7)
    n_lam = fp.constraints.h.shape[0] * (fp.horizon + 1)
    for _ in range(100):
        theta = rng.uniform(0.1, 5.0, 3)
        lam = rng.uniform(0.0, 2.0, n_lam)
        U = rng.standard_normal(10)
        s = _stationarity(bs, theta, lam, U)
        g = _gradient_oracle(fp, theta, lam, U)
        assert np.max(np.abs(s - g)) <= 1e-10 * (1.0 + np.max(np.abs(g)))


def test_stationarity_matches_finite_differences():
    fp = oracles.spring_damper()
    bs = build_stationarity(fp)
    rng = np.random.default_rng(19)
    theta = rng.uniform(0.5, 4.0, 3)
    lam = rng.uniform(0.0, 1.0, 11)
    U = rng.standard_normal(10)
    s = _stationarity(bs, theta, lam, U)
    h = 1e-5
    for i in range(10):
        e = np.zeros(10)
        e[i] = h
        fd = (lagrangian(fp, theta, lam, U + e) - lagrangian(fp, theta, lam, U - e)) / (
            2.0 * h
        )
        assert abs(fd - s[i]) <= 1e-6 * (1.0 + abs(fd))


def test_residual_doubles_with_parameters():
    # the stationarity and complementarity blocks are linear in (theta, lam),
    # and doubling is exact in binary floating point
    fp = oracles.spring_damper()
    rng = np.random.default_rng(23)
    theta = rng.uniform(0.1, 3.0, 3)
    lam = rng.uniform(0.0, 1.0, 11)
    U = rng.standard_normal(10)
    r1 = kkt_residual(fp, theta, lam, U)
    r2 = kkt_residual(fp, 2.0 * theta, 2.0 * lam, U)
    assert np.array_equal(r2.stationarity, 2.0 * r1.stationarity)
    assert np.array_equal(r2.complementarity, 2.0 * r1.complementarity)
    assert np.array_equal(r2.primal_violation, r1.primal_violation)


def test_input_feature_hessian_is_two_identity():
    fp = oracles.scalar_problem(horizon=3)
    bs = build_stationarity(fp)
    # second feature is the input quadratic: curvature 2 on every input
    np.testing.assert_allclose(bs.Mj[1], 2.0 * np.eye(3))
    # first feature is a state quadratic: no direct input curvature mixing
    # with the input rows beyond what Bbar induces, checked by symmetry
    assert np.allclose(bs.Mj[0], bs.Mj[0].T)


def test_cap_constraint_gradient_unit_entry():
    fp = oracles.spring_damper()
    bs = build_stationarity(fp)
    N = fp.horizon
    for k in range(N):
        col = bs.J_lambda[:, multiplier_index(0, k, 1)]
        expect = np.zeros(N)
        expect[k] = 1.0
        np.testing.assert_allclose(col, expect)
    # terminal stage has no input, so its multiplier column is zero
    assert np.all(bs.J_lambda[:, multiplier_index(0, N, 1)] == 0.0)


def test_residual_zero_at_unconstrained_minimizer():
    # stage costs run over k = 0..N-1, so with horizon 2 only u_0 shapes a
    # penalized state (x_1) and u_1 = 0 at the optimum; u_0 has a closed form
    a, b, target, theta1, theta2 = 0.9, 0.6, 2.0, 4.0, 1.5
    fp = oracles.scalar_problem(a=a, b=b, target=target, horizon=2, x0=0.5)
    u0 = theta1 * b * (target - a * 0.5) / (theta1 * b * b + theta2)
    res = kkt_residual(
        fp, np.array([theta1, theta2]), np.zeros(0), np.array([u0, 0.0])
    )
    assert np.max(np.abs(res.stationarity)) <= 1e-8
    assert res.complementarity.size == 0
    assert res.primal_violation.size == 0


def test_residual_zero_parameters_zero_stationarity():
    fp = oracles.spring_damper()
    rng = np.random.default_rng(31)
    U = rng.standard_normal(10)
    res = kkt_residual(fp, np.zeros(3), np.zeros(11), U)
    assert np.all(res.stationarity == 0.0)
    assert np.all(res.complementarity == 0.0)


def test_residual_small_at_solver_output():
    fp = oracles.spring_damper()
    sol = solve_forward(fp, oracles.SPRING_THETA)
    res = kkt_residual(fp, oracles.SPRING_THETA, sol.lam, sol.U)
    for block in (
        res.stationarity,
        res.complementarity,
        res.primal_violation,
        res.dual_violation,
    ):
        assert block.size == 0 or np.max(np.abs(block)) <= 1e-6
