import numpy as np
import pytest

from ctfuse.lie import exp_so3, hat, log_so3
from ctfuse.splines import (
    BasisEval,
    KnotGrid,
    R3Spline,
    So3Spline,
    SplineRangeError,
    basis_at,
    constant_r3,
    constant_so3,
    cumulative_basis,
    ctrl_weights,
    eval_acceleration,
    eval_body_angular_accel,
    eval_body_angular_velocity,
    eval_jerk,
    eval_position,
    eval_rotation,
    eval_rotation_rate,
    eval_velocity,
    jac_body_omega_wrt_ctrl,
    jac_position_wrt_ctrl,
    jac_rotation_wrt_ctrl,
    jac_world_accel_wrt_ctrl,
    so3_eval,
)

RNG = np.random.default_rng(7)


def random_r3(num_knots=12, t0=0.0, dt=0.1, scale=1.0):
    grid = KnotGrid(t0, dt, num_knots)
    return R3Spline(grid, RNG.normal(size=(num_knots, 3)) * scale)


def random_so3(num_knots=12, t0=0.0, dt=0.1, step=0.4):
    grid = KnotGrid(t0, dt, num_knots)
    ctrl = np.empty((num_knots, 3, 3))
    ctrl[0] = exp_so3(RNG.normal(size=3))
    for i in range(1, num_knots):
        ctrl[i] = ctrl[i - 1] @ exp_so3(RNG.normal(size=3) * step)
    return So3Spline(grid, ctrl)


def random_times(grid, n):
    return RNG.uniform(grid.t0, grid.t_end - 1e-9, size=n)


# ---------------------------------------------------------------- basis


def test_basis_at_u0():
    grid = KnotGrid(0.0, 0.1, 8)
    b = cumulative_basis(grid, 0.0)
    assert np.allclose(b.lam, [1.0, 5 / 6, 1 / 6, 0.0])
    assert b.lam[0] == 1.0
    assert b.lam_dot[0] == 0.0


def test_basis_at_u1_limit():
    grid = KnotGrid(0.0, 0.1, 8)
    b = basis_at(grid, 0, 1.0)
    assert np.allclose(b.lam, [1.0, 1.0, 5 / 6, 1 / 6])


def test_basis_cumulative_monotone():
    grid = KnotGrid(0.0, 0.1, 8)
    for u in RNG.uniform(0, 1, size=50):
        b = basis_at(grid, 0, u)
        assert b.lam[0] == 1.0
        assert np.all(np.diff(b.lam) <= 1e-15)


def test_basis_polynomial_oracle():
    # independent evaluation of the cumulative polynomials
    grid = KnotGrid(0.0, 0.25, 8)
    for u in RNG.uniform(0, 1, size=100):
        b = basis_at(grid, 2, u)
        lam1 = (5 + 3 * u - 3 * u * u + u ** 3) / 6
        lam2 = (1 + 3 * u + 3 * u * u - 2 * u ** 3) / 6
        lam3 = u ** 3 / 6
        assert np.allclose(b.lam, [1.0, lam1, lam2, lam3], atol=1e-15)


def test_out_of_range_raises():
    grid = KnotGrid(0.0, 0.1, 8)
    s = constant_r3(grid, np.zeros(3))
    with pytest.raises(SplineRangeError):
        eval_position(s, -0.01)
    with pytest.raises(SplineRangeError):
        eval_position(s, grid.t_end)
    eval_position(s, grid.t_end - 1e-10)  # just inside


# ---------------------------------------------------------------- R3


def test_constant_position_spline():
    grid = KnotGrid(0.0, 0.1, 10)
    p = np.array([1.0, -2.0, 3.0])
    s = constant_r3(grid, p)
    for t in random_times(grid, 20):
        assert np.allclose(eval_position(s, t), p, atol=1e-15)
        assert np.allclose(eval_velocity(s, t), 0, atol=1e-12)
        assert np.allclose(eval_acceleration(s, t), 0, atol=1e-12)


def test_linear_motion_reproduction():
    grid = KnotGrid(0.0, 0.2, 12)
    c = np.array([0.5, -1.0, 2.0])
    ctrl = np.outer(np.arange(12) * grid.dt, c)
    s = R3Spline(grid, ctrl)
    for t in random_times(grid, 20):
        assert np.allclose(eval_velocity(s, t), c, atol=1e-12)
        assert np.allclose(eval_acceleration(s, t), 0, atol=1e-10)


def test_velocity_finite_difference():
    s = random_r3()
    h = 1e-6
    for t in RNG.uniform(s.grid.t0 + 2 * h, s.grid.t_end - 2 * h, size=30):
        fd = (eval_position(s, t + h) - eval_position(s, t - h)) / (2 * h)
        v = eval_velocity(s, t)
        assert np.allclose(v, fd, rtol=1e-6, atol=1e-8)


def test_accel_and_jerk_finite_difference():
    s = random_r3()
    h = 1e-5
    for t in RNG.uniform(s.grid.t0 + 2 * h, s.grid.t_end - 2 * h, size=30):
        fd_a = (eval_velocity(s, t + h) - eval_velocity(s, t - h)) / (2 * h)
        assert np.allclose(eval_acceleration(s, t), fd_a, rtol=1e-5, atol=1e-7)
        fd_j = (eval_acceleration(s, t + h) - eval_acceleration(s, t - h)) / (2 * h)
        assert np.allclose(eval_jerk(s, t), fd_j, rtol=1e-4, atol=1e-5)


def test_position_c2_continuity_at_knots():
    s = random_r3(num_knots=10)
    grid = s.grid
    for i in range(1, grid.num_segments):
        left = basis_at(grid, i - 1, 1.0)
        right = basis_at(grid, i, 0.0)
        for order, lam_l, lam_r in [
            (0, left.lam, right.lam),
            (1, left.lam_dot, right.lam_dot),
            (2, left.lam_ddot, right.lam_ddot),
        ]:
            wl = ctrl_weights(lam_l, order)
            wr = ctrl_weights(lam_r, order)
            pl = wl @ s.ctrl[i - 1 : i + 3]
            pr = wr @ s.ctrl[i : i + 4]
            assert np.allclose(pl, pr, atol=1e-12), (i, order)


def test_batched_matches_scalar():
    s = random_r3()
    ts = random_times(s.grid, 40)
    batch = eval_position(s, ts)
    singles = np.array([eval_position(s, t) for t in ts])
    assert np.allclose(batch, singles)


# ---------------------------------------------------------------- SO(3)


def test_constant_rotation_spline():
    grid = KnotGrid(0.0, 0.1, 10)
    r = exp_so3(np.array([0.2, -0.1, 0.4]))
    s = constant_so3(grid, r)
    for t in random_times(grid, 20):
        assert np.allclose(eval_rotation(s, t), r, atol=1e-14)
        assert np.allclose(eval_body_angular_velocity(s, t), 0, atol=1e-13)
        assert np.allclose(eval_body_angular_accel(s, t), 0, atol=1e-13)


def test_rotation_orthonormal_and_skew():
    s = random_so3()
    for t in random_times(s.grid, 30):
        r = eval_rotation(s, t)
        assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-12
        rdot = eval_rotation_rate(s, t)
        m = r.T @ rdot
        assert np.max(np.abs(m + m.T)) < 1e-9


def test_omega_finite_difference():
    s = random_so3()
    h = 1e-6
    for t in RNG.uniform(s.grid.t0 + 2 * h, s.grid.t_end - 2 * h, size=30):
        r0 = eval_rotation(s, t - h)
        r1 = eval_rotation(s, t + h)
        fd = log_so3(r0.T @ r1) / (2 * h)
        w = eval_body_angular_velocity(s, t)
        assert np.allclose(w, fd, rtol=1e-5, atol=1e-7)


def test_domega_finite_difference():
    s = random_so3()
    h = 1e-5
    for t in RNG.uniform(s.grid.t0 + 2 * h, s.grid.t_end - 2 * h, size=30):
        fd = (
            eval_body_angular_velocity(s, t + h)
            - eval_body_angular_velocity(s, t - h)
        ) / (2 * h)
        dw = eval_body_angular_accel(s, t)
        assert np.allclose(dw, fd, rtol=1e-4, atol=1e-6)


def test_rotation_c2_continuity_at_knots():
    from ctfuse.splines import so3_eval_at

    s = random_so3(num_knots=10)
    grid = s.grid
    for i in range(1, grid.num_segments):
        el = so3_eval_at(s, np.array([i - 1]), np.array([1.0]), with_accel=True)
        er = so3_eval_at(s, np.array([i]), np.array([0.0]), with_accel=True)
        assert np.max(np.abs(el.r[0] - er.r[0])) < 1e-12
        assert np.allclose(el.omega[0], er.omega[0], atol=1e-10)
        assert np.allclose(el.domega[0], er.domega[0], atol=1e-9)


# ---------------------------------------------------------------- Jacobians


def fd_jac_position(s, t, order, h=1e-6):
    seg, _ = s.grid.segment_u(t)
    out = np.zeros((3, 12))
    for j in range(4):
        for k in range(3):
            sp = R3Spline(s.grid, s.ctrl.copy())
            sp.ctrl[seg + j, k] += h
            sm = R3Spline(s.grid, s.ctrl.copy())
            sm.ctrl[seg + j, k] -= h
            out[:, 3 * j + k] = (sp.derivative(t, order) - sm.derivative(t, order)) / (2 * h)
    return out


@pytest.mark.parametrize("order", [0, 1, 2])
def test_jac_position_vs_fd(order):
    s = random_r3()
    for t in random_times(s.grid, 10):
        jac = jac_position_wrt_ctrl(s, t, order)
        fd = fd_jac_position(s, t, order)
        assert np.allclose(jac, fd, rtol=1e-5, atol=1e-8)


def test_jac_position_weights_structure():
    s = random_r3()
    t = 0.37
    b = cumulative_basis(s.grid, t)
    jac = jac_position_wrt_ctrl(s, t, 0)
    l1, l2, l3 = b.lam[1], b.lam[2], b.lam[3]
    expect = np.concatenate(
        [w * np.eye(3) for w in [1 - l1, l1 - l2, l2 - l3, l3]], axis=1
    )
    assert np.allclose(jac, expect)


def fd_jac_rotation(s, t, h=1e-6):
    seg, _ = s.grid.segment_u(t)
    r0 = eval_rotation(s, t)
    out = np.zeros((3, 12))
    for j in range(4):
        for k in range(3):
            dv = np.zeros(3)
            dv[k] = h
            sp = So3Spline(s.grid, s.ctrl.copy())
            sp.ctrl[seg + j] = sp.ctrl[seg + j] @ exp_so3(dv)
            sm = So3Spline(s.grid, s.ctrl.copy())
            sm.ctrl[seg + j] = sm.ctrl[seg + j] @ exp_so3(-dv)
            dplus = log_so3(r0.T @ eval_rotation(sp, t))
            dminus = log_so3(r0.T @ eval_rotation(sm, t))
            out[:, 3 * j + k] = (dplus - dminus) / (2 * h)
    return out


def fd_jac_omega(s, t, h=1e-6):
    seg, _ = s.grid.segment_u(t)
    out = np.zeros((3, 12))
    for j in range(4):
        for k in range(3):
            dv = np.zeros(3)
            dv[k] = h
            sp = So3Spline(s.grid, s.ctrl.copy())
            sp.ctrl[seg + j] = sp.ctrl[seg + j] @ exp_so3(dv)
            sm = So3Spline(s.grid, s.ctrl.copy())
            sm.ctrl[seg + j] = sm.ctrl[seg + j] @ exp_so3(-dv)
            out[:, 3 * j + k] = (
                eval_body_angular_velocity(sp, t) - eval_body_angular_velocity(sm, t)
            ) / (2 * h)
    return out


def test_jac_rotation_vs_fd():
    s = random_so3()
    for t in random_times(s.grid, 10):
        jac = jac_rotation_wrt_ctrl(s, t)
        fd = fd_jac_rotation(s, t)
        assert np.max(np.abs(jac - fd)) < 1e-5 * max(1.0, np.abs(fd).max())


def test_jac_omega_vs_fd():
    s = random_so3()
    for t in random_times(s.grid, 10):
        jac = jac_body_omega_wrt_ctrl(s, t)
        fd = fd_jac_omega(s, t)
        assert np.max(np.abs(jac - fd)) < 1e-5 * max(1.0, np.abs(fd).max())


def test_jac_rotation_constant_spline_sums_to_identity():
    grid = KnotGrid(0.0, 0.1, 10)
    s = constant_so3(grid, exp_so3(np.array([0.1, 0.7, -0.3])))
    jac = jac_rotation_wrt_ctrl(s, 0.33)
    total = sum(jac[:, 3 * j : 3 * j + 3] for j in range(4))
    assert np.allclose(total, np.eye(3), atol=1e-12)


def test_jac_world_accel_is_position_order2():
    s = random_r3()
    t = 0.41
    assert np.allclose(
        jac_world_accel_wrt_ctrl(s, t), jac_position_wrt_ctrl(s, t, 2)
    )


def test_eq1_matrix_equals_eq2_cumulative_form():
    # lam-weighted difference form against the raw matrix product form
    s = random_r3()
    for t in random_times(s.grid, 100):
        seg, u = s.grid.segment_u(t)
        b = basis_at(s.grid, seg, u)
        c = s.ctrl[seg : seg + 4]
        d = np.diff(c, axis=0)
        p_cum = c[0] + b.lam[1:] @ d
        assert np.allclose(eval_position(s, t), p_cum, atol=1e-14)
