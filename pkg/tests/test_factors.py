import numpy as np
import pytest

from ctfuse.lie import exp_so3
from ctfuse.factors import (
    GRAVITY,
    BiasPair,
    Extrinsics,
    ImuMeas,
    LandmarkInvDepth,
    LidarPointMeas,
    PlaneCP,
    TimeOffsets,
    VisualObs,
    back_project,
    bias_factor,
    forward_integrate_imu,
    imu_factor,
    lidar_factor,
    velocity_factor,
    visual_factor,
)
from ctfuse.splines import (
    KnotGrid,
    R3Spline,
    So3Spline,
    constant_r3,
    constant_so3,
    eval_acceleration,
    eval_body_angular_velocity,
    eval_position,
    eval_rotation,
    eval_velocity,
)

RNG = np.random.default_rng(11)


def random_trajectory(num_knots=12, dt=0.1, rot_step=0.3, pos_scale=1.0):
    grid_r = KnotGrid(0.0, dt, num_knots)
    grid_p = KnotGrid(0.0, dt, num_knots)
    ctrl = np.empty((num_knots, 3, 3))
    ctrl[0] = exp_so3(RNG.normal(size=3))
    for i in range(1, num_knots):
        ctrl[i] = ctrl[i - 1] @ exp_so3(RNG.normal(size=3) * rot_step)
    rot = So3Spline(grid_r, ctrl)
    pos = R3Spline(grid_p, RNG.normal(size=(num_knots, 3)) * pos_scale)
    return rot, pos


def random_extrinsics():
    return Extrinsics(exp_so3(RNG.normal(size=3) * 0.5), RNG.normal(size=3) * 0.2)


def fd_block(make_eval, mutate, h):
    """Central finite difference of a factor residual along one scalar dim."""
    mutate(+h)
    rp = make_eval().r.copy()
    mutate(-2 * h)
    rm = make_eval().r.copy()
    mutate(+h)
    return (rp - rm) / (2 * h)


def check_jac_fd(make_eval, mutators, h=1e-6, rtol=1e-5, atol=1e-8):
    """Compare every analytic Jacobian block against finite differences."""
    ev = make_eval()
    for key, jac in ev.jac.items():
        assert key in mutators, f"no mutator for {key}"
        for k in range(jac.shape[1]):
            fd = fd_block(make_eval, lambda s, key=key, k=k: mutators[key](k, s), h)
            err = np.abs(jac[:, k] - fd)
            bound = rtol * np.maximum(np.abs(fd), np.abs(jac[:, k])) + atol
            assert np.all(err <= bound), (key, k, jac[:, k], fd)


def standard_mutators(rot, pos, bias_list, offsets, lms=None):
    """Mutation closures keyed like the factor Jacobian blocks."""
    muts = {}
    for i in range(rot.grid.num_knots):
        def mut_r(k, s, i=i):
            d = np.zeros(3)
            d[k] = s
            rot.ctrl[i] = rot.ctrl[i] @ exp_so3(d)
        muts[("R", i)] = mut_r

        def mut_p(k, s, i=i):
            pos.ctrl[i, k] += s
        muts[("p", i)] = mut_p
    for b in bias_list:
        def mut_bg(k, s, b=b):
            b.bw[k] += s
        def mut_ba(k, s, b=b):
            b.ba[k] += s
        muts[("bg", b.kappa)] = mut_bg
        muts[("ba", b.kappa)] = mut_ba

    def mut_ti(k, s):
        offsets.t_i += s
    def mut_tc(k, s):
        offsets.t_c += s
    muts[("ti", 0)] = mut_ti
    muts[("tc", 0)] = mut_tc
    if lms:
        for j, lm in lms.items():
            def mut_lm(k, s, lm=lm):
                lm.inv_depth += s
            muts[("lm", j)] = mut_lm
    return muts


# ------------------------------------------------------------------ IMU


def synthesize_imu(rot, pos, bias, tau, t_i=0.0):
    w = eval_body_angular_velocity(rot, tau) + bias.bw
    a_world = eval_acceleration(pos, tau)
    r = eval_rotation(rot, tau)
    a = r.T @ (a_world - GRAVITY) + bias.ba
    return ImuMeas(t=tau - t_i, w=w, a=a)


def test_imu_factor_zero_noise_consistency():
    for _ in range(10):
        rot, pos = random_trajectory()
        bias = BiasPair(RNG.normal(size=3) * 1e-2, RNG.normal(size=3) * 1e-1, 1)
        offsets = TimeOffsets(t_i=0.004, est_i=True)
        tau = RNG.uniform(0.05, rot.grid.t_end - 0.05)
        m = synthesize_imu(rot, pos, bias, tau, t_i=offsets.t_i)
        ev = imu_factor(rot, pos, bias, offsets, m, 1e-3, 1e-2)
        assert np.max(np.abs(ev.r)) < 1e-10


def test_imu_factor_rest_reading():
    # identity attitude at rest: the accelerometer must read -g = (0,0,-9.8)
    grid = KnotGrid(0.0, 0.1, 8)
    rot = constant_so3(grid, np.eye(3))
    pos = constant_r3(KnotGrid(0.0, 0.1, 8), np.zeros(3))
    bias = BiasPair(np.zeros(3), np.zeros(3), 0)
    m = ImuMeas(t=0.2, w=np.zeros(3), a=-GRAVITY.copy())
    ev = imu_factor(rot, pos, bias, TimeOffsets(), m, 1e-3, 1e-2)
    assert np.max(np.abs(ev.r)) < 1e-12


def test_imu_factor_out_of_range_skipped():
    rot, pos = random_trajectory()
    bias = BiasPair(np.zeros(3), np.zeros(3), 0)
    m = ImuMeas(t=rot.grid.t_end + 1.0, w=np.zeros(3), a=np.zeros(3))
    assert imu_factor(rot, pos, bias, TimeOffsets(), m, 1e-3, 1e-2) is None


def test_imu_factor_jacobians_vs_fd():
    for _ in range(5):
        rot, pos = random_trajectory()
        bias = BiasPair(RNG.normal(size=3) * 1e-2, RNG.normal(size=3) * 1e-1, 3)
        offsets = TimeOffsets(t_i=0.002, est_i=True)
        # keep tau away from knots: jerk jumps there and the t_I finite
        # difference would straddle two segments
        seg = RNG.integers(2, 8)
        tau = (seg + RNG.uniform(0.05, 0.95)) * rot.grid.dt
        m = ImuMeas(
            t=tau - offsets.t_i, w=RNG.normal(size=3), a=RNG.normal(size=3) * 3
        )
        muts = standard_mutators(rot, pos, [bias], offsets)
        check_jac_fd(
            lambda: imu_factor(rot, pos, bias, offsets, m, 1e-3, 1e-2), muts
        )


def test_imu_factor_ti_column_vs_fd():
    rot, pos = random_trajectory()
    bias = BiasPair(np.zeros(3), np.zeros(3), 0)
    offsets = TimeOffsets(t_i=0.0, est_i=True)
    tau = 0.513  # off-knot: jerk is discontinuous at knots
    m = ImuMeas(t=tau, w=RNG.normal(size=3), a=RNG.normal(size=3))
    h = 1e-6

    def ev_at(ti):
        return imu_factor(
            rot, pos, bias, TimeOffsets(t_i=ti, est_i=True), m, 1e-3, 1e-2
        ).r

    fd = (ev_at(h) - ev_at(-h)) / (2 * h)
    col = imu_factor(rot, pos, bias, offsets, m, 1e-3, 1e-2).jac[("ti", 0)][:, 0]
    assert np.all(np.abs(col - fd) <= 1e-5 * np.maximum(np.abs(fd), 1.0) + 1e-8)


def test_imu_factor_zero_blocks():
    rot, pos = random_trajectory()
    bias = BiasPair(np.zeros(3), np.zeros(3), 0)
    ev = imu_factor(
        rot, pos, bias, TimeOffsets(), ImuMeas(0.5, np.zeros(3), np.zeros(3)), 1e-3, 1e-2
    )
    kinds = {k[0] for k in ev.jac}
    assert "lm" not in kinds and "tc" not in kinds and "ti" not in kinds


# ------------------------------------------------------------------ bias


def test_bias_factor_values():
    prev = BiasPair(np.zeros(3), np.zeros(3), 0)
    cur = BiasPair(np.array([1e-3, 2e-3, 3e-3]), np.array([1e-3, 2e-3, 3e-3]), 1)
    ev = bias_factor(prev, cur, 1e-4, 1e-3, 0.12)
    assert np.allclose(ev.r, [1e-3, 2e-3, 3e-3, 1e-3, 2e-3, 3e-3])
    cur2 = BiasPair(np.zeros(3), np.zeros(3), 1)
    assert np.allclose(bias_factor(prev, cur2, 1e-4, 1e-3, 0.12).r, 0.0)


def test_bias_factor_jacobian_exact():
    prev = BiasPair(RNG.normal(size=3), RNG.normal(size=3), 4)
    cur = BiasPair(RNG.normal(size=3), RNG.normal(size=3), 5)
    ev = bias_factor(prev, cur, 1e-4, 1e-3, 0.12)
    eye3, z = np.eye(3), np.zeros((3, 3))
    assert np.array_equal(ev.jac[("bg", 4)], np.vstack([-eye3, z]))
    assert np.array_equal(ev.jac[("ba", 4)], np.vstack([z, -eye3]))
    assert np.array_equal(ev.jac[("bg", 5)], np.vstack([eye3, z]))
    assert np.array_equal(ev.jac[("ba", 5)], np.vstack([z, eye3]))


def test_bias_factor_weight_scales_with_duration():
    prev = BiasPair(np.zeros(3), np.zeros(3), 0)
    cur = BiasPair(np.ones(3), np.ones(3), 1)
    w1, _ = bias_factor(prev, cur, 1e-4, 1e-3, 0.1).whitened()
    w2, _ = bias_factor(prev, cur, 1e-4, 1e-3, 0.2).whitened()
    assert np.allclose(w2, w1 / np.sqrt(2.0))


# ------------------------------------------------------------------ LiDAR


def test_lidar_factor_sign_convention():
    # residual is n^T p - d: zero on the plane z = +1 for pi = (0,0,1),
    # magnitude 1 at the origin
    grid = KnotGrid(0.0, 0.1, 8)
    rot = constant_so3(grid, np.eye(3))
    pos = constant_r3(KnotGrid(0.0, 0.1, 8), np.zeros(3))
    plane = PlaneCP(np.array([0.0, 0.0, 1.0]))
    ext = Extrinsics.identity()
    on_plane = LidarPointMeas(0.2, np.array([0.0, 0.0, 1.0]), 0)
    at_origin = LidarPointMeas(0.2, np.array([0.0, 0.0, 0.0]), 0)
    assert abs(lidar_factor(rot, pos, on_plane, plane, ext, 5e-3).r[0]) < 1e-14
    assert abs(abs(lidar_factor(rot, pos, at_origin, plane, ext, 5e-3).r[0]) - 1.0) < 1e-14


def test_lidar_factor_zero_noise_consistency():
    for _ in range(10):
        rot, pos = random_trajectory()
        ext = random_extrinsics()
        plane = PlaneCP(RNG.normal(size=3) * 2 + np.array([3.0, 0, 0]))
        tau = RNG.uniform(0.05, rot.grid.t_end - 0.05)
        # sample a world point on the plane, move it into the LiDAR frame
        n, d = plane.n, plane.d
        tang = np.linalg.svd(n[None])[2][1:]
        p_w = d * n + tang.T @ RNG.normal(size=2)
        r_i = eval_rotation(rot, tau)
        p_i = eval_position(pos, tau)
        p_imu = r_i.T @ (p_w - p_i)
        p_l = ext.r.T @ (p_imu - ext.p)
        m = LidarPointMeas(tau, p_l, 0)
        ev = lidar_factor(rot, pos, m, plane, ext, 5e-3)
        assert abs(ev.r[0]) < 1e-10


def test_lidar_factor_jacobians_vs_fd():
    for _ in range(5):
        rot, pos = random_trajectory()
        ext = random_extrinsics()
        plane = PlaneCP(np.array([2.0, -1.0, 4.0]))
        tau = RNG.uniform(0.15, rot.grid.t_end - 0.15)
        m = LidarPointMeas(tau, RNG.normal(size=3) * 2, 0)
        muts = standard_mutators(rot, pos, [], TimeOffsets())
        check_jac_fd(lambda: lidar_factor(rot, pos, m, plane, ext, 5e-3), muts)


def test_lidar_factor_zero_blocks():
    rot, pos = random_trajectory()
    ev = lidar_factor(
        rot, pos, LidarPointMeas(0.5, np.zeros(3), 0), PlaneCP(np.array([1.0, 0, 0])),
        Extrinsics.identity(), 5e-3,
    )
    kinds = {k[0] for k in ev.jac}
    assert kinds == {"R", "p"}


# ------------------------------------------------------------------ visual


def make_visual_setup(moving=True):
    rot, pos = random_trajectory(rot_step=0.2 if moving else 0.0, pos_scale=0.5)
    ext = random_extrinsics()
    offsets = TimeOffsets(t_c=0.003, est_c=True)
    t_a, t_b = 0.25, 0.75
    # place a landmark in front of the anchor camera
    tau_a = t_a + offsets.t_c
    r_a = eval_rotation(rot, tau_a)
    p_a = eval_position(pos, tau_a)
    depth = RNG.uniform(1.5, 4.0)
    ray = back_project(RNG.normal(size=2) * 0.2)
    cam_pt = ray * depth
    w_pt = r_a @ (ext.r @ cam_pt + ext.p) + p_a
    lm = LandmarkInvDepth(
        inv_depth=1.0 / depth, anchor_id=0, anchor_t=t_a, anchor_uv=ray[:2].copy()
    )
    # exact projection into frame b
    tau_b = t_b + offsets.t_c
    r_b = eval_rotation(rot, tau_b)
    p_b = eval_position(pos, tau_b)
    cam_b = ext.r.T @ (r_b.T @ (w_pt - p_b) - ext.p)
    obs = VisualObs(landmark_id=7, t=t_b, uv=cam_b[:2] / cam_b[2])
    return rot, pos, ext, offsets, lm, obs, w_pt


def test_visual_factor_zero_noise_consistency():
    for _ in range(10):
        rot, pos, ext, offsets, lm, obs, _ = make_visual_setup()
        ev = visual_factor(rot, pos, obs, lm, ext, offsets, 1e-3)
        assert ev is not None
        assert np.max(np.abs(ev.r)) < 1e-10


def test_visual_factor_hand_projection():
    # identity relative pose, landmark straight ahead at depth 2 -> p_hat=(0,0,2)
    grid = KnotGrid(0.0, 0.1, 10)
    rot = constant_so3(grid, np.eye(3))
    pos = constant_r3(KnotGrid(0.0, 0.1, 10), np.zeros(3))
    lm = LandmarkInvDepth(0.5, 0, 0.1, np.zeros(2))
    rho_b = np.array([0.01, -0.02])
    obs = VisualObs(3, 0.5, rho_b)
    ev = visual_factor(rot, pos, obs, lm, Extrinsics.identity(), TimeOffsets(), 1e-3)
    assert np.allclose(ev.r, np.zeros(2) - rho_b)


def test_visual_factor_depth_guard():
    rot, pos, ext, offsets, lm, obs, _ = make_visual_setup()
    lm.inv_depth = -0.5
    assert visual_factor(rot, pos, obs, lm, ext, offsets, 1e-3) is None


def test_visual_factor_jacobians_vs_fd():
    for _ in range(5):
        rot, pos, ext, offsets, lm, obs, _ = make_visual_setup()
        # perturb the observation so the residual is not identically zero
        obs.uv = obs.uv + RNG.normal(size=2) * 0.05
        muts = standard_mutators(rot, pos, [], offsets, lms={obs.landmark_id: lm})
        check_jac_fd(
            lambda: visual_factor(rot, pos, obs, lm, ext, offsets, 1e-3), muts
        )


# ------------------------------------------------------------------ velocity


def test_velocity_factor_zero():
    rot, pos = random_trajectory()
    t = 0.6
    ev = velocity_factor(pos, eval_velocity(pos, t), t, 1e-2)
    assert np.max(np.abs(ev.r)) < 1e-14


def test_velocity_factor_constant_velocity():
    grid = KnotGrid(0.0, 0.2, 12)
    c = np.array([1.0, 0.0, 0.0])
    pos = R3Spline(grid, np.outer(np.arange(12) * grid.dt, c))
    ev = velocity_factor(pos, np.zeros(3), 0.8, 1e-2)
    assert np.allclose(ev.r, [-1.0, 0.0, 0.0], atol=1e-12)


def test_velocity_factor_jacobian_vs_fd():
    rot, pos = random_trajectory()
    t = 0.62
    v_hat = RNG.normal(size=3)
    muts = standard_mutators(rot, pos, [], TimeOffsets())
    check_jac_fd(lambda: velocity_factor(pos, v_hat, t, 1e-2), muts, rtol=1e-6)


# ------------------------------------------------------------------ IMU forward integration


def test_forward_integrate_rest():
    r0 = exp_so3(np.array([0.1, -0.2, 0.3]))
    n = 40
    stamps = np.linspace(0, 0.2, n)
    a_m = np.tile(r0.T @ (-GRAVITY), (n, 1))
    w_m = np.zeros((n, 3))
    v = forward_integrate_imu(stamps, w_m, a_m, r0, np.zeros(3), np.zeros(3), np.zeros(3))
    assert np.max(np.abs(v)) < 1e-12


def test_forward_integrate_constant_accel():
    a0 = np.array([0.7, -0.3, 0.2])
    n = 200
    t_end = 0.5
    stamps = np.linspace(0, t_end, n)
    a_m = np.tile(a0 - GRAVITY, (n, 1))  # identity attitude
    w_m = np.zeros((n, 3))
    v = forward_integrate_imu(stamps, w_m, a_m, np.eye(3), np.zeros(3), np.zeros(3), np.zeros(3))
    assert np.allclose(v, a0 * t_end, atol=1e-10)


def test_forward_integrate_second_order():
    # rotating body with constant gyro: halving the step reduces error ~4x
    w0 = np.array([1.5, -0.8, 0.6])
    a_body = np.array([0.4, 0.2, -0.3])

    def true_velocity(t_end, n=40001):
        ts = np.linspace(0, t_end, n)
        v = np.zeros(3)
        for k in range(n - 1):
            dt = ts[k + 1] - ts[k]
            r_mid = exp_so3(w0 * (ts[k] + 0.5 * dt))
            v = v + r_mid @ a_body * dt
        return v

    def integrate(n):
        ts = np.linspace(0, 0.5, n)
        w_m = np.tile(w0, (n, 1))
        a_m = np.array([a_body for _ in range(n)])
        return forward_integrate_imu(
            ts, w_m, a_m, np.eye(3), np.zeros(3), np.zeros(3), np.zeros(3), gravity=np.zeros(3)
        )

    ref = true_velocity(0.5)
    e1 = np.linalg.norm(integrate(51) - ref)
    e2 = np.linalg.norm(integrate(101) - ref)
    assert e1 / e2 > 3.0  # ~4x for a second-order scheme


def test_forward_integrate_empty_raises():
    with pytest.raises(ValueError):
        forward_integrate_imu(
            np.array([]), np.zeros((0, 3)), np.zeros((0, 3)),
            np.eye(3), np.zeros(3), np.zeros(3), np.zeros(3),
        )
