"""Synthetic scenario generator: ground-truth splines, plane map, landmarks,
and simulated IMU / LiDAR / camera streams with configurable noise.

Stamping convention: every measurement is synthesized at its true capture
time tau and stamped with t = tau - offset, so that correcting with
tau = t + offset recovers the truth. The LiDAR clock is the time base
(offset zero); IMU and camera streams may carry injected offsets.

LiDAR scans spread their points' capture times across the scan duration, so
a moving platform produces motion-distorted scans by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .factors import GRAVITY, Extrinsics, back_project
from .lie import exp_so3, quat_from_rot
from .splines import (
    KnotGrid,
    R3Spline,
    So3Spline,
    eval_acceleration,
    eval_position,
    eval_rotation,
    eval_velocity,
    so3_eval,
)


@dataclass
class ImuSpec:
    rate: float = 200.0
    sig_g: float = 1e-3
    sig_a: float = 1e-2
    sig_bg_rw: float = 1e-4
    sig_ba_rw: float = 1e-3
    bg0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t_offset: float = 0.0


@dataclass
class LidarSpec:
    rate: float = 10.0
    points_per_scan: int = 300
    scan_duration: float = 0.1
    sigma: float = 5e-3
    ext: Extrinsics = field(default_factory=Extrinsics.identity)


@dataclass
class CameraSpec:
    rate: float = 20.0
    sigma_px: float = 1e-3
    t_offset: float = 0.0
    fov_tan: float = 1.2
    depth_min: float = 0.2
    depth_max: float = 40.0
    ext: Extrinsics = field(default_factory=Extrinsics.identity)


@dataclass
class ImuStream:
    t: np.ndarray
    w: np.ndarray
    a: np.ndarray


@dataclass
class LidarStream:
    t: np.ndarray
    pts: np.ndarray
    plane_id: np.ndarray
    scan_id: np.ndarray


@dataclass
class FrameObs:
    t: float
    ids: np.ndarray
    uv: np.ndarray


@dataclass
class MeasurementLog:
    imu: ImuStream
    lidars: list
    frames: list
    gt_t: np.ndarray
    gt_pos: np.ndarray
    gt_quat: np.ndarray


@dataclass
class GroundTruthScenario:
    rot: So3Spline
    pos: R3Spline
    planes: np.ndarray  # (M, 3) closest-point vectors
    plane_extent: float  # half-size of the sampled patch on each plane
    landmarks: np.ndarray  # (L, 3)
    imu: ImuSpec
    lidars: list  # list of LidarSpec
    camera: CameraSpec | None
    t0: float
    duration: float
    seed: int
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def generate(self, gt_rate: float = 100.0) -> MeasurementLog:
        rng = np.random.default_rng(self.seed)
        imu = generate_imu(self, rng.integers(1 << 31))
        lidars = [
            generate_lidar(self, i, rng.integers(1 << 31)) for i in range(len(self.lidars))
        ]
        frames = (
            generate_visual(self, rng.integers(1 << 31)) if self.camera is not None else []
        )
        gt_t = np.arange(self.t0, self.t0 + self.duration, 1.0 / gt_rate)
        gt_t = gt_t[gt_t < self.rot.grid.t_end]
        gt_pos = eval_position(self.pos, gt_t)
        gt_quat = quat_from_rot(eval_rotation(self.rot, gt_t))
        return MeasurementLog(imu, lidars, frames, gt_t, gt_pos, gt_quat)


# ---------------------------------------------------------------------------
# trajectory generation


def _smooth(x: np.ndarray, width: int, passes: int = 3) -> np.ndarray:
    if width < 2:
        return x
    kernel = np.ones(width) / width
    out = x
    for _ in range(passes):
        out = np.apply_along_axis(
            lambda col: np.convolve(col, kernel, mode="same"), 0, out
        )
    return out


def generate_trajectory(
    kind: str,
    t0: float,
    duration: float,
    dt: float,
    seed: int = 0,
    rest_duration: float = 0.7,
    box_extent: float = 2.5,
    omega_max: float = 2.0,
    accel_max: float = 6.0,
    line_velocity: np.ndarray | None = None,
    circle_radius: float = 2.0,
    circle_rate: float = 0.8,
    pad: float = 0.3,
) -> tuple[So3Spline, R3Spline]:
    """Ground-truth splines over [t0, t0 + duration + pad), C^2 by construction.

    Kinds: 'rest' (constant pose), 'line' (constant velocity), 'circle'
    (planar circle, fitted), 'random-smooth' (filtered noise, starting at
    rest at the identity pose, bounded angular rate and acceleration).
    """
    if duration < 1.0:
        raise ValueError("duration must be at least 1 s")
    n = int(np.ceil((duration + pad) / dt)) + 4
    grid_r = KnotGrid(t0, dt, n)
    grid_p = KnotGrid(t0, dt, n)
    rng = np.random.default_rng(seed)

    if kind == "rest":
        return (
            So3Spline(grid_r, np.tile(np.eye(3), (n, 1, 1))),
            R3Spline(grid_p, np.zeros((n, 3))),
        )
    if kind == "line":
        c = np.asarray(
            line_velocity if line_velocity is not None else [0.5, 0.2, 0.0], dtype=float
        )
        ctrl = np.outer(np.arange(n) * dt, c)
        return So3Spline(grid_r, np.tile(np.eye(3), (n, 1, 1))), R3Spline(grid_p, ctrl)
    if kind == "circle":
        ts = t0 + np.arange(10 * n) * (dt / 10.0)
        samples = np.stack(
            [
                circle_radius * np.cos(circle_rate * (ts - t0)),
                circle_radius * np.sin(circle_rate * (ts - t0)),
                np.zeros_like(ts),
            ],
            axis=1,
        )
        pos = R3Spline(grid_p, fit_r3_ctrl(grid_p, ts, samples))
        return So3Spline(grid_r, np.tile(np.eye(3), (n, 1, 1))), pos
    if kind != "random-smooth":
        raise ValueError(f"unknown trajectory kind '{kind}'")

    m_rest = int(np.ceil(rest_duration / dt)) + 4
    if m_rest >= n - 4:
        raise ValueError("rest prefix longer than the trajectory")
    ramp = np.clip((np.arange(n) - m_rest) / 12.0, 0.0, 1.0)[:, None]

    steps = _smooth(rng.normal(size=(n, 3)), 7) * ramp
    rot_ctrl = np.empty((n, 3, 3))
    rot_ctrl[0] = np.eye(3)
    for _ in range(2):
        scale = omega_max * dt / max(np.linalg.norm(steps, axis=1).max(), 1e-12)
        phi = steps * min(scale, 1e3)
        for i in range(1, n):
            rot_ctrl[i] = rot_ctrl[i - 1] @ exp_so3(phi[i])
        rot = So3Spline(grid_r, rot_ctrl)
        dense = np.linspace(t0, grid_r.t_end - 1e-9, 4 * n)
        w_max = np.abs(so3_eval(rot, dense).omega).max()
        if w_max <= omega_max or w_max < 1e-9:
            break
        steps = phi * (omega_max / w_max) / max(scale, 1e-12)

    raw = _smooth(rng.normal(size=(n, 3)), 11) * ramp
    amp = np.abs(raw).max()
    pos_ctrl = raw * (box_extent / max(amp, 1e-12))
    pos = R3Spline(grid_p, pos_ctrl)
    dense = np.linspace(t0, grid_p.t_end - 1e-9, 4 * n)
    a_max = np.abs(eval_acceleration(pos, dense)).max()
    if a_max > accel_max:
        pos_ctrl *= accel_max / a_max
        pos = R3Spline(grid_p, pos_ctrl)
    return So3Spline(grid_r, rot_ctrl), pos


def fit_r3_ctrl(grid: KnotGrid, ts: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """Least-squares control points reproducing position samples on the grid."""
    from .splines import basis_at, ctrl_weights

    seg, u = grid.segment_u(np.clip(ts, grid.t0, grid.t_end - 1e-9))
    basis = basis_at(grid, seg, u)
    w = ctrl_weights(basis.lam, 0)
    a = np.zeros((ts.size, grid.num_knots))
    for j in range(4):
        a[np.arange(ts.size), seg + j] += w[:, j]
    ctrl, *_ = np.linalg.lstsq(a, samples, rcond=None)
    return ctrl


def box_planes(half: float = 5.0) -> np.ndarray:
    """Closest-point vectors of the six axis-aligned walls of a cube room."""
    return np.array(
        [
            [half, 0.0, 0.0],
            [-half, 0.0, 0.0],
            [0.0, half, 0.0],
            [0.0, -half, 0.0],
            [0.0, 0.0, half],
            [0.0, 0.0, -half],
        ]
    )


def wall_landmarks(n: int, half: float, seed: int) -> np.ndarray:
    """Landmarks scattered on the six walls."""
    rng = np.random.default_rng(seed)
    wall = rng.integers(0, 6, size=n)
    axis = wall // 2
    sign = np.where(wall % 2 == 0, 1.0, -1.0)
    pts = rng.uniform(-half, half, size=(n, 3))
    pts[np.arange(n), axis] = sign * half
    return pts


# ---------------------------------------------------------------------------
# measurement synthesis


def generate_imu(sc: GroundTruthScenario, seed: int) -> ImuStream:
    spec = sc.imu
    rng = np.random.default_rng(seed)
    tau = np.arange(sc.t0, sc.t0 + sc.duration, 1.0 / spec.rate)
    tau = tau[tau < sc.rot.grid.t_end]
    n = tau.size
    ev = so3_eval(sc.rot, tau)
    a_w = eval_acceleration(sc.pos, tau)
    dt = 1.0 / spec.rate
    bg = spec.bg0 + np.cumsum(
        rng.normal(size=(n, 3)) * spec.sig_bg_rw * np.sqrt(dt), axis=0
    )
    ba = spec.ba0 + np.cumsum(
        rng.normal(size=(n, 3)) * spec.sig_ba_rw * np.sqrt(dt), axis=0
    )
    w_m = ev.omega + bg + rng.normal(size=(n, 3)) * spec.sig_g
    a_body = np.einsum("bji,bj->bi", ev.r, a_w - sc.gravity)
    a_m = a_body + ba + rng.normal(size=(n, 3)) * spec.sig_a
    return ImuStream(t=tau - spec.t_offset, w=w_m, a=a_m)


def generate_lidar(sc: GroundTruthScenario, stream: int, seed: int) -> LidarStream:
    spec = sc.lidars[stream]
    rng = np.random.default_rng(seed)
    scan_starts = np.arange(sc.t0, sc.t0 + sc.duration - spec.scan_duration, 1.0 / spec.rate)
    n_scan = scan_starts.size
    npts = spec.points_per_scan
    offs = np.linspace(0.0, spec.scan_duration, npts, endpoint=False)
    tau = (scan_starts[:, None] + offs[None, :]).reshape(-1)
    keep = tau < sc.rot.grid.t_end
    tau = tau[keep]
    scan_id = np.repeat(np.arange(n_scan), npts)[keep]
    m = tau.size
    plane_id = rng.integers(0, sc.planes.shape[0], size=m)
    pi = sc.planes[plane_id]
    d = np.linalg.norm(pi, axis=1)
    n_pl = pi / d[:, None]
    # orthonormal tangent pair per plane normal
    helper = np.where(np.abs(n_pl[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    t1 = np.cross(n_pl, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n_pl, t1)
    coef = rng.uniform(-sc.plane_extent, sc.plane_extent, size=(m, 2))
    p_w = d[:, None] * n_pl + coef[:, :1] * t1 + coef[:, 1:] * t2
    r_i = so3_eval(sc.rot, tau).r
    p_i = eval_position(sc.pos, tau)
    ext = spec.ext
    p_imu = np.einsum("bji,bj->bi", r_i, p_w - p_i)
    p_l = (p_imu - ext.p) @ ext.r
    p_l = p_l + rng.normal(size=(m, 3)) * spec.sigma
    return LidarStream(t=tau, pts=p_l, plane_id=plane_id, scan_id=scan_id)


def generate_visual(sc: GroundTruthScenario, seed: int) -> list:
    spec = sc.camera
    rng = np.random.default_rng(seed)
    tau_f = np.arange(sc.t0, sc.t0 + sc.duration, 1.0 / spec.rate)
    tau_f = tau_f[tau_f < sc.rot.grid.t_end]
    frames = []
    r_all = so3_eval(sc.rot, tau_f).r
    p_all = eval_position(sc.pos, tau_f)
    for k, tau in enumerate(tau_f):
        r_c = r_all[k] @ spec.ext.r
        p_c = r_all[k] @ spec.ext.p + p_all[k]
        cam = (sc.landmarks - p_c) @ r_c
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam[:, 0] / z
            v = cam[:, 1] / z
        vis = (
            (z > spec.depth_min)
            & (z < spec.depth_max)
            & (np.abs(u) < spec.fov_tan)
            & (np.abs(v) < spec.fov_tan)
        )
        ids = np.nonzero(vis)[0]
        uv = np.stack([u[vis], v[vis]], axis=1) + rng.normal(size=(ids.size, 2)) * spec.sigma_px
        frames.append(FrameObs(t=float(tau - spec.t_offset), ids=ids, uv=uv))
    return frames


# ---------------------------------------------------------------------------
# evaluation


def umeyama_se3(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid (R, t) minimizing ||dst - (R src + t)||^2 (no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / src.shape[0]
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u @ vt) < 0:
        s[2, 2] = -1.0
    r = u @ s @ vt
    t = mu_d - r @ mu_s
    return r, t


def align_yaw_translation(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best rotation about +z plus translation mapping src onto dst."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    a = src - mu_s
    b = dst - mu_d
    num = np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    den = np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])
    yaw = np.arctan2(num, den)
    r = exp_so3(np.array([0.0, 0.0, yaw]))
    t = mu_d - r @ mu_s
    return r, t


def ape_rmse(
    est_t: np.ndarray,
    est_pos: np.ndarray,
    gt_t: np.ndarray,
    gt_pos: np.ndarray,
    alignment: str = "none",
) -> float:
    """Translational RMSE between timestamp-matched trajectories."""
    lo = max(est_t[0], gt_t[0])
    hi = min(est_t[-1], gt_t[-1])
    sel = (gt_t >= lo) & (gt_t <= hi)
    if np.sum(sel) < 2:
        raise ValueError("trajectories do not overlap")
    ts = gt_t[sel]
    gt = gt_pos[sel]
    est = np.stack([np.interp(ts, est_t, est_pos[:, k]) for k in range(3)], axis=1)
    if alignment == "se3":
        r, t = umeyama_se3(est, gt)
        est = est @ r.T + t
    elif alignment == "yaw":
        r, t = align_yaw_translation(est, gt)
        est = est @ r.T + t
    elif alignment != "none":
        raise ValueError(f"unknown alignment '{alignment}'")
    err = est - gt
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def scan_plane_residuals(
    sc: GroundTruthScenario, log: MeasurementLog, stream: int, scan_id: int, per_point: bool
) -> np.ndarray:
    """Point-to-plane residuals of one scan, with per-point or scan-start poses.

    With per-point poses a zero-noise scan lies exactly on its planes; using
    a single scan-start pose leaves the motion distortion in the residuals.
    """
    ls = log.lidars[stream]
    spec = sc.lidars[stream]
    sel = ls.scan_id == scan_id
    if not np.any(sel):
        raise ValueError(f"scan {scan_id} not present")
    t = ls.t[sel]
    pts = ls.pts[sel]
    pi = sc.planes[ls.plane_id[sel]]
    t_pose = t if per_point else np.full_like(t, t.min())
    r_i = so3_eval(sc.rot, t_pose).r
    p_i = eval_position(sc.pos, t_pose)
    lever = pts @ spec.ext.r.T + spec.ext.p
    p_w = np.einsum("bij,bj->bi", r_i, lever) + p_i
    d = np.linalg.norm(pi, axis=1)
    n_pl = pi / d[:, None]
    return np.einsum("bi,bi->b", n_pl, p_w) - d


# ---------------------------------------------------------------------------
# presets


def desk_viral(
    seed: int = 0,
    duration: float = 30.0,
    kind: str = "random-smooth",
    noisy: bool = True,
    t_i_ms: float = 0.0,
    t_c_ms: float = 0.0,
    dt_true: float = 0.02,
    sensors: str = "lic",
    n_landmarks: int = 200,
    room_half: float = 5.0,
) -> GroundTruthScenario:
    """Default desk-scale scenario: a 10 m box room with six walls, smooth
    random motion after a stationary prefix, IMU 200 Hz, LiDAR 10 Hz x 300
    points, camera 20 Hz."""
    rot, pos = generate_trajectory(kind, 0.0, duration, dt_true, seed=seed)
    imu = ImuSpec(t_offset=t_i_ms * 1e-3)
    lidar0 = LidarSpec(
        ext=Extrinsics(exp_so3(np.array([0.0, 0.0, 0.05])), np.array([0.08, 0.0, 0.05]))
    )
    lidars = [lidar0]
    if sensors in ("l2i", "l2ic"):
        lidars.append(
            LidarSpec(
                ext=Extrinsics(
                    exp_so3(np.array([0.0, np.pi / 2, 0.0])), np.array([-0.06, 0.04, 0.0])
                )
            )
        )
    camera = None
    if sensors in ("lic", "l2ic"):
        r_ic = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        camera = CameraSpec(
            t_offset=t_c_ms * 1e-3,
            ext=Extrinsics(r_ic, np.array([0.1, 0.02, -0.03])),
        )
    if not noisy:
        imu.sig_g = imu.sig_a = imu.sig_bg_rw = imu.sig_ba_rw = 0.0
        for l in lidars:
            l.sigma = 0.0
        if camera is not None:
            camera.sigma_px = 0.0
    return GroundTruthScenario(
        rot=rot,
        pos=pos,
        planes=box_planes(room_half),
        plane_extent=room_half,
        landmarks=wall_landmarks(n_landmarks, room_half, seed + 1),
        imu=imu,
        lidars=lidars,
        camera=camera,
        t0=0.0,
        duration=duration,
        seed=seed,
    )
