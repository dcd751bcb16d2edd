from __future__ import annotations

import numpy as np
import pytest

from nnmpc import mpc, plant
from nnmpc.mpc import MpcConfig
from nnmpc.narx import LinearArxModel, RegressorSpec

from .conftest import random_model, rel_err

FD_STEP = 1e-5


def test_expand_controls():
    np.testing.assert_array_equal(mpc.expand_controls([1.0, 2.0, 3.0], 3), [1, 2, 3])
    np.testing.assert_array_equal(mpc.expand_controls([0.3], 5), [0.3] * 5)
    np.testing.assert_array_equal(mpc.expand_controls([4.0, 7.0], 4), [4, 7, 7, 7])
    u = np.array([0.2, 0.5, 0.1])
    np.testing.assert_array_equal(mpc.expansion_matrix(3, 6) @ u, mpc.expand_controls(u, 6))
    with pytest.raises(ValueError):
        mpc.expand_controls([1.0, 2.0, 3.0], 2)


def test_config_invariants():
    with pytest.raises(ValueError):
        MpcConfig(n1=3, n2=2)
    with pytest.raises(ValueError):
        MpcConfig(nu=8, n2=7)
    with pytest.raises(ValueError):
        MpcConfig(rho=-1.0)
    with pytest.raises(ValueError):
        MpcConfig(u_min=1.0, u_max=1.0)
    with pytest.raises(ValueError):
        MpcConfig(n2=3, nu=3).check_delay(2)


# -- cost ----------------------------------------------------------------------


def _constant_model(c, ny=1, nu=1):
    return LinearArxModel(RegressorSpec(ny, nu, 1), np.zeros(ny), np.zeros(nu), c)


def test_cost_zero_at_reference():
    m = _constant_model(5.0)
    cfg = MpcConfig(n1=1, n2=4, nu=2)
    assert mpc.cost([0.2, 0.2], 5.0, m, [5.0], [], 0.2, cfg) == 0.0


def test_cost_single_step_hand_value():
    m = _constant_model(3.0)
    cfg = MpcConfig(n1=1, n2=1, nu=1, rho=0.5)
    # (r - y)^2 + rho * du^2 = 4 + 0.5
    assert mpc.cost([1.0], 5.0, m, [3.0], [], 0.0, cfg) == pytest.approx(4.5, abs=1e-15)


def test_cost_rho_zero_is_squared_error():
    rng = np.random.default_rng(0)
    m = random_model(rng)
    cfg = MpcConfig(n1=2, n2=6, nu=3, rho=0.0)
    u = rng.uniform(0, 0.3, 3)
    r = rng.uniform(11, 13, 5)
    y_hat = m.predict_horizon([12, 12.2], [0.1], mpc.expand_controls(u, 6), 6)[1:]
    assert mpc.cost(u, r, m, [12, 12.2], [0.1], 0.05, cfg) == pytest.approx(np.sum((r - y_hat) ** 2), rel=1e-14)


def test_cost_reference_length_checked():
    m = _constant_model(1.0)
    with pytest.raises(ValueError):
        mpc.cost([0.1], [1.0, 2.0], m, [1.0], [], 0.0, MpcConfig(n1=1, n2=3, nu=1))


# -- gradient and Hessian ------------------------------------------------------


def _random_problem(rng, delay=None):
    delay = int(rng.integers(1, 3)) if delay is None else delay
    spec = RegressorSpec(int(rng.integers(1, 4)), int(rng.integers(1, 4)), delay)
    m = random_model(rng, spec, weight_range=1.5)
    n2 = int(rng.integers(delay, 9))
    n1 = int(rng.integers(1, n2 + 1))
    nu = int(rng.integers(1, n2 - delay + 2))
    cfg = MpcConfig(n1=n1, n2=n2, nu=nu, rho=float(rng.uniform(0, 1)))
    past_y = rng.uniform(9, 16, spec.ny)
    past_u = rng.uniform(0, 0.3, spec.nu + spec.delay)
    u = rng.uniform(0, 0.3, nu)
    r = rng.uniform(10, 15, n2 - n1 + 1)
    return m, cfg, past_y, past_u, u, r, float(rng.uniform(0, 0.3))


def _fd_gradient(u, args, h=FD_STEP):
    g = np.empty(u.size)
    for i in range(u.size):
        up, dn = u.copy(), u.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (mpc.cost(up, *args) - mpc.cost(dn, *args)) / (2 * h)
    return g


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(21)
    worst = 0.0
    for _ in range(120):
        m, cfg, py, pu, u, r, u_prev = _random_problem(rng)
        args = (r, m, py, pu, u_prev, cfg)
        worst = max(worst, rel_err(mpc.cost_gradient(u, *args), _fd_gradient(u, args)))
    assert worst <= 1e-5


def test_gradient_zero_at_stationary_point():
    m = _constant_model(5.0)
    cfg = MpcConfig(n1=1, n2=4, nu=2, rho=0.0)
    np.testing.assert_array_equal(mpc.cost_gradient([0.3, 0.1], 5.0, m, [5.0], [], 0.2, cfg), [0.0, 0.0])


def test_gradient_constant_model_is_move_penalty_only():
    m = _constant_model(5.0)
    cfg = MpcConfig(n1=1, n2=4, nu=3, rho=0.7)
    u, u_prev = np.array([0.3, 0.1, 0.4]), 0.2
    du = np.array([0.1, -0.2, 0.3])
    d = mpc.difference_matrix(3)
    np.testing.assert_allclose(
        mpc.cost_gradient(u, 9.0, m, [5.0], [], u_prev, cfg), 2 * 0.7 * d.T @ du, rtol=1e-14, atol=1e-15
    )


def test_hessian_symmetric_psd():
    rng = np.random.default_rng(22)
    for _ in range(120):
        m, cfg, py, pu, u, r, u_prev = _random_problem(rng)
        h = mpc.cost_hessian_gn(u, r, m, py, pu, u_prev, cfg)
        np.testing.assert_array_equal(h, h.T)
        assert np.linalg.eigvalsh(h).min() >= -1e-12 * max(1.0, np.abs(h).max())


def test_hessian_scalar_case():
    rng = np.random.default_rng(23)
    m = random_model(rng)
    cfg = MpcConfig(n1=1, n2=5, nu=1, rho=0.3)
    args = ([12.5] * 5, m, [12, 12.1], [0.1], 0.1, cfg)
    h = mpc.cost_hessian_gn([0.15], *args)
    phi = m.jacobian_output_wrt_u([12, 12.1], [0.1], [0.15] * 5, 5).sum(axis=1)
    assert h.shape == (1, 1)
    assert h[0, 0] == pytest.approx(2 * phi @ phi + 2 * 0.3, rel=1e-12)
    assert h[0, 0] > 0


def test_gauss_newton_hessian_exact_at_zero_residual():
    rng = np.random.default_rng(24)
    worst = 0.0
    for _ in range(30):
        m, cfg, py, pu, u, _, u_prev = _random_problem(rng)
        preds = m.predict_horizon(py, pu, mpc.expand_controls(u, cfg.n2), cfg.n2)
        args = (preds[cfg.n1 - 1 :], m, py, pu, u_prev, cfg)
        h = mpc.cost_hessian_gn(u, *args)
        fd = np.empty_like(h)
        for i in range(u.size):
            up, dn = u.copy(), u.copy()
            up[i] += FD_STEP
            dn[i] -= FD_STEP
            fd[:, i] = (mpc.cost_gradient(up, *args) - mpc.cost_gradient(dn, *args)) / (2 * FD_STEP)
        worst = max(worst, rel_err(h, fd))
    assert worst <= 1e-3


# -- solve -----------------------------------------------------------------------


def _linear_oracle(model, cfg, past_y, past_u, r, u_prev):
    """Normal-equations minimizer built from predictions only."""
    n2, nu = cfg.n2, cfg.nu

    def preds(u):
        return model.predict_horizon(past_y, past_u, mpc.expand_controls(u, n2), n2)[cfg.n1 - 1 :]

    q = preds(np.zeros(nu))
    p = np.column_stack([preds(np.eye(nu)[j]) - q for j in range(nu)])
    d = mpc.difference_matrix(nu)
    c = np.zeros(nu)
    c[0] = u_prev
    lhs = p.T @ p + cfg.rho * d.T @ d
    rhs = p.T @ (np.asarray(r) - q) + cfg.rho * d.T @ c
    return np.linalg.solve(lhs, rhs)


def _linear_problem(rng, nu=3, n2=6, n1=1, rho=0.1):
    spec = RegressorSpec(2, 2, 1)
    m = LinearArxModel(spec, [0.6, 0.2], [1.5, 0.4], 0.3)
    cfg = MpcConfig(n1=n1, n2=n2, nu=nu, rho=rho, u_min=-100.0, u_max=100.0, tol=1e-12)
    return m, cfg, rng.uniform(1, 2, 2), rng.uniform(0, 1, 1), rng.uniform(1, 3, n2 - n1 + 1), float(rng.uniform(0, 1))


def test_solve_linear_matches_normal_equations():
    rng = np.random.default_rng(31)
    for _ in range(20):
        m, cfg, py, pu, r, u_prev = _linear_problem(rng, nu=int(rng.integers(1, 5)), rho=float(rng.uniform(0.01, 1)))
        sol = mpc.solve(py, pu, r, u_prev, m, cfg)
        np.testing.assert_allclose(sol.u_sequence, _linear_oracle(m, cfg, py, pu, r, u_prev), atol=1e-8, rtol=0)


def test_solve_one_step_analytic():
    spec = RegressorSpec(1, 1, 1)
    a, b, c = 0.7, 2.0, 0.5
    m = LinearArxModel(spec, [a], [b], c)
    cfg = MpcConfig(n1=1, n2=1, nu=1, rho=0.4, u_min=-10, u_max=10, tol=1e-13)
    y, r, u_prev = 1.2, 3.0, 0.1
    sol = mpc.solve([y], [], r, u_prev, m, cfg)
    expected = (b * (r - a * y - c) + 0.4 * u_prev) / (b * b + 0.4)
    assert sol.u_sequence[0] == pytest.approx(expected, abs=1e-10)


def test_solve_stationary_start_returns_u_prev():
    spec = RegressorSpec(2, 2, 1)
    m = LinearArxModel(spec, [0.5, 0.2], [1.0, 0.5], 0.4)
    u0 = 0.2
    y_ss = (1.5 * u0 + 0.4) / (1 - 0.7)
    cfg = MpcConfig()
    sol = mpc.solve([y_ss, y_ss], [u0], y_ss, u0, m, cfg, warm_start=[u0, u0])
    assert sol.iterations == 0
    np.testing.assert_array_equal(sol.u_sequence, [u0, u0])


def test_solve_clamps_at_upper_bound():
    m = LinearArxModel(RegressorSpec(1, 1, 1), [0.0], [1.0], 0.0)
    cfg = MpcConfig(n1=1, n2=1, nu=1, rho=0.1, u_min=0.0, u_max=2.0)
    args = (5.0, m, [0.0], [], 1.0, cfg)
    grid = np.linspace(0.0, 2.0, 20001)
    best = grid[np.argmin([mpc.cost([g], *args) for g in grid])]
    sol = mpc.solve([0.0], [], 5.0, 1.0, m, cfg)
    assert best == 2.0
    assert sol.u_sequence[0] == 2.0


def test_solve_trace_monotone_and_feasible():
    rng = np.random.default_rng(33)
    for _ in range(100):
        m, cfg, py, pu, _, r, u_prev = _random_problem(rng, delay=1)
        cfg = MpcConfig(n1=cfg.n1, n2=cfg.n2, nu=cfg.nu, rho=cfg.rho, u_min=0.0, u_max=0.3)
        sol = mpc.solve(py, pu, r, u_prev, m, cfg)
        costs = [j for _, j, _, _ in sol.trace]
        assert all(b <= a for a, b in zip(costs, costs[1:]))
        assert np.all(sol.u_sequence >= 0.0) and np.all(sol.u_sequence <= 0.3)
        assert sol.j_value >= 0 and sol.j_value == costs[-1]


def test_rho_monotone_move_size():
    rng = np.random.default_rng(34)
    for _ in range(10):
        m, cfg, py, pu, r, u_prev = _linear_problem(rng)
        norms = []
        for rho in (0.0, 0.01, 0.1, 1.0, 10.0, 100.0):
            c = MpcConfig(n1=cfg.n1, n2=cfg.n2, nu=cfg.nu, rho=rho, u_min=-100, u_max=100, tol=1e-12)
            sol = mpc.solve(py, pu, r, u_prev, m, c)
            norms.append(np.linalg.norm(np.diff(sol.u_sequence, prepend=u_prev)))
        assert all(b <= a + 1e-9 for a, b in zip(norms, norms[1:])), norms


def test_rho_monotone_move_size_trained(trained_model):
    rng = np.random.default_rng(35)
    for _ in range(5):
        y = rng.uniform(11.5, 13.0)
        r = rng.uniform(11.5, 13.5)
        norms = []
        for rho in (0.0, 0.05, 0.5, 5.0, 50.0):
            cfg = MpcConfig(rho=rho, u_max=0.3)
            sol = mpc.solve([y, y], [0.1], r, 0.1, trained_model, cfg)
            norms.append(np.linalg.norm(np.diff(sol.u_sequence, prepend=0.1)))
        assert all(b <= a + 1e-7 for a, b in zip(norms, norms[1:])), norms


def test_warm_and_cold_start_agree(trained_model):
    rng = np.random.default_rng(36)
    cfg = MpcConfig()
    for _ in range(100):
        y = rng.uniform(11.0, 14.0, 2)
        u_prev = rng.uniform(0.05, 0.2)
        r = rng.uniform(11.5, 13.5)
        cold = mpc.solve(y, [u_prev], r, u_prev, trained_model, cfg)
        warm = mpc.solve(y, [u_prev], r, u_prev, trained_model, cfg, warm_start=cold.u_sequence + rng.normal(0, 0.01, 2))
        assert abs(warm.j_value - cold.j_value) <= 1e-8 * max(1.0, cold.j_value)


def test_solve_validates_warm_start():
    m = _constant_model(1.0)
    with pytest.raises(ValueError):
        mpc.solve([1.0], [], 1.0, 0.0, m, MpcConfig(n1=1, n2=3, nu=2), warm_start=[0.1])


# -- receding horizon ------------------------------------------------------------


def test_controller_holds_at_exact_steady_state():
    spec = RegressorSpec(2, 2, 1)
    m = LinearArxModel(spec, [0.5, 0.2], [1.0, 0.5], 0.4)
    u0 = 0.2
    y_ss = (1.5 * u0 + 0.4) / (1 - 0.7)
    ctl = mpc.Controller(m, MpcConfig(), y_ss, u0)
    y_hist, u_hist = [y_ss, y_ss], [u0, u0]
    for _ in range(50):
        u = mpc.mpc_step(ctl, y_hist[-1], y_ss)
        assert u == u0
        u_hist.append(u)
        y_hist.append(m.predict_horizon(y_hist[-2:], u_hist[-2:-1], [u], 1)[0])


def test_setpoint_step_up_raises_flow(trained_model, ss01):
    ctl = mpc.Controller(trained_model, MpcConfig(), ss01.cb, 0.1)
    u = ctl.step(ss01.cb, 13.0)
    assert u > 0.1
    # plant oracle: more concentrated feed raises the concentration
    assert plant.advance(ss01, u, 0.2).cb > plant.advance(ss01, 0.1, 0.2).cb


def test_controller_warm_start_shifts_solution(trained_model, ss01):
    ctl = mpc.Controller(trained_model, MpcConfig(nu=3), ss01.cb, 0.1)
    assert ctl.warm_start() is None
    ctl.step(ss01.cb, 13.0)
    u = ctl.solution.u_sequence
    np.testing.assert_array_equal(ctl.warm_start(), [u[1], u[2], u[2]])
