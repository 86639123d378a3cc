"""Measurement factors: residuals, analytic Jacobians, noise weights.

Each factor maps a trajectory snapshot plus one measurement to a residual
vector, a dict of Jacobian blocks keyed by state-block key, and a diagonal
square-root information weight. State-block keys are tuples:

    ("R", i)   rotation control point i        3 error dims (right perturb.)
    ("p", i)   position control point i        3
    ("bg", k)  gyro bias of window k           3
    ("ba", k)  accel bias of window k          3
    ("lm", j)  landmark j inverse depth        1
    ("ti", 0)  IMU time offset (s)             1
    ("tc", 0)  camera time offset (s)          1

Sign conventions (asserted by the zero-noise consistency tests):
  - gravity is the constant vector (0, 0, 9.8) in the world frame, whose
    z-axis points along gravity; a resting accelerometer with identity
    attitude therefore measures -g = (0, 0, -9.8).
  - gyro model:  w_m = omega(t) + b_g + n;  accel model:
    a_m = R^T(t) (a_world(t) - g) + b_a + n.
  - IMU residual: [omega(tau) - w_m + b_g; a_body(tau) - a_m + b_a] with
    tau = t + t_I.
  - LiDAR point-to-plane residual: n^T p_world - d, with the plane stored as
    the closest point pi = d * n (residual is zero on the plane).
  - visual residual: perspective projection of the landmark into the
    observing frame minus the observed normalized coordinates.

Functions ending in `_eval` are batched kernels over arrays of measurements;
the per-measurement factor functions wrap them with batch size one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import exp_so3, hat
from .splines import (
    R3Spline,
    So3Spline,
    ctrl_weights,
    cumulative_basis,
    eval_velocity,
    so3_ctrl_jacobians,
    so3_eval,
)

GRAVITY = np.array([0.0, 0.0, 9.8])

DEPTH_MIN = 1e-3  # forward-depth guard for visual factors, meters


# ---------------------------------------------------------------------------
# records


@dataclass
class Extrinsics:
    """Rigid transform of a sensor in the IMU frame: p_imu = r @ p_sensor + p."""

    r: np.ndarray
    p: np.ndarray

    @classmethod
    def identity(cls) -> "Extrinsics":
        return cls(np.eye(3), np.zeros(3))


@dataclass
class TimeOffsets:
    """Clock offsets of IMU and camera against the LiDAR time base.

    Corrected stamp: tau = t + offset. Offsets are clamped to |.| <= max_abs.
    """

    t_i: float = 0.0
    t_c: float = 0.0
    est_i: bool = False
    est_c: bool = False
    max_abs: float = 0.05


@dataclass
class ImuMeas:
    t: float
    w: np.ndarray
    a: np.ndarray


@dataclass
class BiasPair:
    bw: np.ndarray
    ba: np.ndarray
    kappa: int


@dataclass
class PlaneCP:
    """Plane as its closest point to the origin: pi = d * n, ||pi|| > 0."""

    pi: np.ndarray

    @property
    def d(self) -> float:
        return float(np.linalg.norm(self.pi))

    @property
    def n(self) -> np.ndarray:
        return self.pi / self.d


@dataclass
class LidarPointMeas:
    t: float
    p: np.ndarray
    plane_id: int
    stream: int = 0


@dataclass
class VisualObs:
    landmark_id: int
    t: float
    uv: np.ndarray  # normalized image-plane coordinates


@dataclass
class LandmarkInvDepth:
    inv_depth: float
    anchor_id: int
    anchor_t: float
    anchor_uv: np.ndarray


@dataclass
class FactorEval:
    """Residual, Jacobian blocks by state key, diagonal sqrt-information."""

    r: np.ndarray
    jac: dict = field(default_factory=dict)
    sqrt_w: np.ndarray | None = None

    def whitened(self) -> tuple[np.ndarray, dict]:
        if self.sqrt_w is None:
            return self.r, self.jac
        w = self.sqrt_w
        return w * self.r, {k: w[:, None] * j for k, j in self.jac.items()}

    def cost(self) -> float:
        r, _ = self.whitened()
        return 0.5 * float(r @ r)


def _add_block(jac: dict, key, block: np.ndarray) -> None:
    if key in jac:
        jac[key] = jac[key] + block
    else:
        jac[key] = block


def back_project(uv: np.ndarray) -> np.ndarray:
    """Normalized image coordinates to a ray on the z=1 plane."""
    uv = np.asarray(uv, dtype=float)
    return np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)


# ---------------------------------------------------------------------------
# IMU factor


def imu_eval(
    rot: So3Spline,
    pos: R3Spline,
    tau: np.ndarray,
    w_m: np.ndarray,
    a_m: np.ndarray,
    bw: np.ndarray,
    ba: np.ndarray,
    gravity: np.ndarray = GRAVITY,
    want_jac: bool = True,
    want_ti: bool = False,
) -> dict:
    """Batched IMU residuals/Jacobians at corrected stamps tau (all in range).

    Returns a dict with residuals (B, 6), segment indices, and Jacobian
    pieces: 'jw' gyro rows w.r.t. rotation ctrl, 'jar' accel rows w.r.t.
    rotation ctrl (both (B, 4, 3, 3)), 'rt' = R^T for the accel/position
    chain, 'w2' the second-derivative ctrl weights, 'ti_col' (B, 6).
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    ev = so3_eval(rot, tau, with_accel=want_ti)
    basis = ev.basis
    a_w = np.einsum("bj,bjk->bk", ctrl_weights(basis.lam_ddot, 2), pos.ctrl[basis.seg[:, None] + np.arange(4)])
    rt = ev.r.transpose(0, 2, 1)
    a_body = np.einsum("bij,bj->bi", rt, a_w - gravity)
    resid = np.concatenate([ev.omega - w_m + bw, a_body - a_m + ba], axis=1)
    out = {"resid": resid, "seg": basis.seg, "omega": ev.omega, "a_body": a_body, "r": ev.r}
    if want_jac:
        jac = so3_ctrl_jacobians(rot, ev)
        out["jw"] = jac["omega"]
        out["jar"] = hat(a_body)[:, None] @ jac["r"]
        out["rt"] = rt
        out["w2"] = ctrl_weights(basis.lam_ddot, 2)
    if want_ti:
        jerk = np.einsum("bj,bjk->bk", ctrl_weights(basis.lam_dddot, 3), pos.ctrl[basis.seg[:, None] + np.arange(4)])
        da_body = -np.cross(ev.omega, a_body) + np.einsum("bij,bj->bi", rt, jerk)
        out["ti_col"] = np.concatenate([ev.domega, da_body], axis=1)
    return out


def imu_factor(
    rot: So3Spline,
    pos: R3Spline,
    bias: BiasPair,
    offsets: TimeOffsets,
    m: ImuMeas,
    sig_g: float,
    sig_a: float,
    gravity: np.ndarray = GRAVITY,
    want_jac: bool = True,
) -> FactorEval | None:
    """6-dim IMU factor at corrected stamp tau = t + t_I; None if out of range."""
    tau = m.t + offsets.t_i
    if not rot.grid.in_range(tau):
        return None
    ev = imu_eval(
        rot, pos, np.array([tau]), m.w[None], m.a[None], bias.bw, bias.ba,
        gravity=gravity, want_jac=want_jac, want_ti=want_jac and offsets.est_i,
    )
    sqrt_w = np.concatenate([np.full(3, 1.0 / sig_g), np.full(3, 1.0 / sig_a)])
    if not want_jac:
        return FactorEval(r=ev["resid"][0], jac={}, sqrt_w=sqrt_w)
    seg = int(ev["seg"][0])
    jac: dict = {}
    for j in range(4):
        jr = np.zeros((6, 3))
        jr[:3] = ev["jw"][0, j]
        jr[3:] = ev["jar"][0, j]
        _add_block(jac, ("R", seg + j), jr)
        jp = np.zeros((6, 3))
        jp[3:] = ev["w2"][0, j] * ev["rt"][0]
        _add_block(jac, ("p", seg + j), jp)
    eye3 = np.eye(3)
    jac[("bg", bias.kappa)] = np.vstack([eye3, np.zeros((3, 3))])
    jac[("ba", bias.kappa)] = np.vstack([np.zeros((3, 3)), eye3])
    if offsets.est_i:
        jac[("ti", 0)] = ev["ti_col"][0][:, None]
    return FactorEval(r=ev["resid"][0], jac=jac, sqrt_w=sqrt_w)


# ---------------------------------------------------------------------------
# bias factor


def bias_factor(
    prev: BiasPair, cur: BiasPair, sig_bg_rw: float, sig_ba_rw: float, duration: float
) -> FactorEval:
    """Random-walk factor between consecutive window biases.

    The discrete noise grows with the window duration: cov = sigma_rw^2 * T.
    """
    r = np.concatenate([cur.bw - prev.bw, cur.ba - prev.ba])
    eye3 = np.eye(3)
    z = np.zeros((3, 3))
    jac = {
        ("bg", prev.kappa): np.vstack([-eye3, z]),
        ("ba", prev.kappa): np.vstack([z, -eye3]),
        ("bg", cur.kappa): np.vstack([eye3, z]),
        ("ba", cur.kappa): np.vstack([z, eye3]),
    }
    sd = np.sqrt(duration)
    sqrt_w = np.concatenate(
        [np.full(3, 1.0 / (sig_bg_rw * sd)), np.full(3, 1.0 / (sig_ba_rw * sd))]
    )
    return FactorEval(r=r, jac=jac, sqrt_w=sqrt_w)


# ---------------------------------------------------------------------------
# LiDAR point-to-plane factor


def lidar_eval(
    rot: So3Spline,
    pos: R3Spline,
    tau: np.ndarray,
    pts: np.ndarray,
    planes_pi: np.ndarray,
    ext: Extrinsics,
    want_jac: bool = True,
) -> dict:
    """Batched point-to-plane residuals r = n^T p_world - d and Jacobian rows."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    ev = so3_eval(rot, tau)
    basis = ev.basis
    w0 = ctrl_weights(basis.lam, 0)
    p_i = np.einsum("bj,bjk->bk", w0, pos.ctrl[basis.seg[:, None] + np.arange(4)])
    lever = pts @ ext.r.T + ext.p  # sensor point expressed in the IMU frame
    p_w = np.einsum("bij,bj->bi", ev.r, lever) + p_i
    d = np.linalg.norm(planes_pi, axis=-1)
    n = planes_pi / d[:, None]
    resid = np.einsum("bi,bi->b", n, p_w) - d
    out = {"resid": resid, "seg": basis.seg, "p_w": p_w, "n": n}
    if want_jac:
        jac = so3_ctrl_jacobians(rot, ev, want_omega=False)
        dp_dth = -ev.r @ hat(lever)  # (B,3,3)
        nrow = np.einsum("bi,bij->bj", n, dp_dth)  # (B,3)
        out["jrow_r"] = np.einsum("bi,bkij->bkj", nrow, jac["r"])  # (B,4,3)
        out["jrow_p"] = w0[:, :, None] * n[:, None, :]
    return out


def lidar_factor(
    rot: So3Spline,
    pos: R3Spline,
    m: LidarPointMeas,
    plane: PlaneCP,
    ext: Extrinsics,
    sigma: float,
    want_jac: bool = True,
) -> FactorEval | None:
    """Scalar point-to-plane factor; LiDAR is the time base (tau = t)."""
    tau = m.t
    if not rot.grid.in_range(tau):
        return None
    ev = lidar_eval(rot, pos, np.array([tau]), m.p[None], plane.pi[None], ext, want_jac=want_jac)
    if not want_jac:
        return FactorEval(r=ev["resid"][:1], jac={}, sqrt_w=np.array([1.0 / sigma]))
    seg = int(ev["seg"][0])
    jac: dict = {}
    for j in range(4):
        _add_block(jac, ("R", seg + j), ev["jrow_r"][0, j][None, :])
        _add_block(jac, ("p", seg + j), ev["jrow_p"][0, j][None, :])
    return FactorEval(r=ev["resid"][:1], jac=jac, sqrt_w=np.array([1.0 / sigma]))


# ---------------------------------------------------------------------------
# visual reprojection factor


def visual_eval(
    rot: So3Spline,
    pos: R3Spline,
    tau_a: np.ndarray,
    tau_b: np.ndarray,
    uv_a: np.ndarray,
    uv_b: np.ndarray,
    inv_depth: np.ndarray,
    ext: Extrinsics,
    depth_min: float = DEPTH_MIN,
    want_jac: bool = True,
    want_tc: bool = False,
) -> dict:
    """Batched inverse-depth reprojection residuals between anchor and frame b.

    The landmark lives on the anchor-frame ray back_project(uv_a) at depth
    1 / inv_depth; the residual compares its projection in frame b with uv_b.
    Entries with forward depth below depth_min are flagged invalid.
    """
    tau_a = np.atleast_1d(np.asarray(tau_a, dtype=float))
    tau_b = np.atleast_1d(np.asarray(tau_b, dtype=float))
    er, ep = ext.r, ext.p
    ev_a = so3_eval(rot, tau_a, with_accel=False)
    ev_b = so3_eval(rot, tau_b, with_accel=False)
    ba = ev_a.basis
    bb = ev_b.basis
    w0a = ctrl_weights(ba.lam, 0)
    w0b = ctrl_weights(bb.lam, 0)
    p_ia = np.einsum("bj,bjk->bk", w0a, pos.ctrl[ba.seg[:, None] + np.arange(4)])
    p_ib = np.einsum("bj,bjk->bk", w0b, pos.ctrl[bb.seg[:, None] + np.arange(4)])

    q = back_project(uv_a) / inv_depth[:, None]  # anchor-camera point
    lever_a = q @ er.T + ep  # in anchor IMU frame
    w_pt = np.einsum("bij,bj->bi", ev_a.r, lever_a) + p_ia  # world landmark
    cam_b = np.einsum("bji,bj->bi", ev_b.r, w_pt - p_ib)  # R_ib^T (w - p_ib)
    p_hat = (cam_b - ep) @ er  # = E_R^T (cam_b - E_p), observing-camera point
    z = p_hat[:, 2]
    valid = z >= depth_min
    z_safe = np.where(valid, z, 1.0)
    proj = p_hat[:, :2] / z_safe[:, None]
    resid = proj - uv_b
    out = {"resid": resid, "valid": valid, "seg_a": ba.seg, "seg_b": bb.seg, "p_hat": p_hat}
    if not (want_jac or want_tc):
        return out

    # d resid / d p_hat
    dproj = np.zeros((tau_a.shape[0], 2, 3))
    dproj[:, 0, 0] = 1.0 / z_safe
    dproj[:, 1, 1] = 1.0 / z_safe
    dproj[:, 0, 2] = -p_hat[:, 0] / z_safe ** 2
    dproj[:, 1, 2] = -p_hat[:, 1] / z_safe ** 2
    out["dproj"] = dproj

    if want_jac:
        jac_a = so3_ctrl_jacobians(rot, ev_a, want_omega=False)["r"]
        jac_b = so3_ctrl_jacobians(rot, ev_b, want_omega=False)["r"]
        rb_t = ev_b.r.transpose(0, 2, 1)
        # d p_hat / d (imu rotation right-perturbation) at tau_b and tau_a
        dph_db = np.einsum("ji,bjk->bik", er, hat(np.einsum("bij,bj->bi", rb_t, w_pt - p_ib)))
        dph_da = -np.einsum("ji,bjk->bik", er, rb_t @ ev_a.r @ hat(lever_a))
        # d p_hat / d (imu positions)
        dph_pb = -np.einsum("ji,bjk->bik", er, rb_t)
        dph_pa = -dph_pb
        out["jr_a"] = dproj[:, None] @ (dph_da[:, None] @ jac_a)  # (B,4,2,3)
        out["jr_b"] = dproj[:, None] @ (dph_db[:, None] @ jac_b)
        out["jp_a"] = w0a[:, :, None, None] * (dproj @ dph_pa)[:, None]
        out["jp_b"] = w0b[:, :, None, None] * (dproj @ dph_pb)[:, None]
        # d p_hat / d inv_depth: ray direction contribution
        dq = -back_project(uv_a) / inv_depth[:, None] ** 2
        dw = np.einsum("bij,jk,bk->bi", ev_a.r, er, dq)
        out["jlm"] = np.einsum("bij,bj->bi", dproj, np.einsum("bji,bj->bi", ev_b.r, dw) @ er)
    if want_tc:
        # exact d p_hat / d t_C through both corrected stamps
        va = np.einsum("bj,bjk->bk", ctrl_weights(ba.lam_dot, 1), pos.ctrl[ba.seg[:, None] + np.arange(4)])
        vb = np.einsum("bj,bjk->bk", ctrl_weights(bb.lam_dot, 1), pos.ctrl[bb.seg[:, None] + np.arange(4)])
        dw_dt = np.einsum("bij,bj->bi", ev_a.r, np.cross(ev_a.omega, lever_a)) + va
        rb_t = ev_b.r.transpose(0, 2, 1)
        term1 = -np.cross(ev_b.omega, np.einsum("bij,bj->bi", rb_t, w_pt - p_ib))
        term2 = np.einsum("bij,bj->bi", rb_t, dw_dt - vb)
        out["jtc"] = np.einsum("bij,bj->bi", dproj, (term1 + term2) @ er)
    return out


def visual_factor(
    rot: So3Spline,
    pos: R3Spline,
    obs: VisualObs,
    lm: LandmarkInvDepth,
    ext: Extrinsics,
    offsets: TimeOffsets,
    sigma_px: float,
    depth_min: float = DEPTH_MIN,
    want_jac: bool = True,
) -> FactorEval | None:
    """2-dim reprojection factor; None if rejected (depth/range/degenerate)."""
    if lm.inv_depth <= 0 or obs.t == lm.anchor_t:
        return None
    tau_a = lm.anchor_t + offsets.t_c
    tau_b = obs.t + offsets.t_c
    if not (rot.grid.in_range(tau_a) and rot.grid.in_range(tau_b)):
        return None
    ev = visual_eval(
        rot, pos, np.array([tau_a]), np.array([tau_b]),
        lm.anchor_uv[None], obs.uv[None], np.array([lm.inv_depth]),
        ext, depth_min=depth_min, want_jac=want_jac, want_tc=want_jac and offsets.est_c,
    )
    if not ev["valid"][0]:
        return None
    if not want_jac:
        return FactorEval(r=ev["resid"][0], jac={}, sqrt_w=np.full(2, 1.0 / sigma_px))
    jac: dict = {}
    seg_a, seg_b = int(ev["seg_a"][0]), int(ev["seg_b"][0])
    for j in range(4):
        _add_block(jac, ("R", seg_a + j), ev["jr_a"][0, j])
        _add_block(jac, ("p", seg_a + j), ev["jp_a"][0, j])
        _add_block(jac, ("R", seg_b + j), ev["jr_b"][0, j])
        _add_block(jac, ("p", seg_b + j), ev["jp_b"][0, j])
    jac[("lm", obs.landmark_id)] = ev["jlm"][0][:, None]
    if offsets.est_c:
        jac[("tc", 0)] = ev["jtc"][0][:, None]
    sqrt_w = np.full(2, 1.0 / sigma_px)
    return FactorEval(r=ev["resid"][0], jac=jac, sqrt_w=sqrt_w)


# ---------------------------------------------------------------------------
# velocity factor (window-growth initialization)


def velocity_factor(
    pos: R3Spline, v_hat: np.ndarray, t: float, sigma: float
) -> FactorEval:
    """r = v_hat - v(t); constrains only position control points."""
    basis = cumulative_basis(pos.grid, t)
    r = np.asarray(v_hat, dtype=float) - eval_velocity(pos, t)
    w1 = ctrl_weights(basis.lam_dot, 1)
    seg = int(basis.seg)
    jac = {("p", seg + j): -w1[j] * np.eye(3) for j in range(4)}
    return FactorEval(r=r, jac=jac, sqrt_w=np.full(3, 1.0 / sigma))


def forward_integrate_imu(
    stamps: np.ndarray,
    w_m: np.ndarray,
    a_m: np.ndarray,
    r0: np.ndarray,
    v0: np.ndarray,
    bw: np.ndarray,
    ba: np.ndarray,
    gravity: np.ndarray = GRAVITY,
) -> np.ndarray:
    """Velocity at the last stamp by midpoint integration of a = R(a_m - b_a) + g."""
    stamps = np.asarray(stamps, dtype=float)
    if stamps.size == 0:
        raise ValueError("forward_integrate_imu: empty measurement window")
    r = np.asarray(r0, dtype=float).copy()
    v = np.asarray(v0, dtype=float).copy()
    for k in range(stamps.size - 1):
        dt = stamps[k + 1] - stamps[k]
        w_mid = 0.5 * (w_m[k] + w_m[k + 1]) - bw
        a_mid = 0.5 * (a_m[k] + a_m[k + 1]) - ba
        r_half = r @ exp_so3(w_mid * (0.5 * dt))
        v = v + (r_half @ a_mid + gravity) * dt
        r = r @ exp_so3(w_mid * dt)
    return v
