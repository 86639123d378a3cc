"""Continuous-time fixed-lag smoother over cumulative B-spline trajectories.

The estimator keeps one rotation and one position spline on a shared knot
grid. Time is partitioned into windows of eta knot intervals; window k
covers [t_{k-1}, t_k) with t_k = t0 + k * eta * dt. Processing a window:

  1. grow the splines by eta knots (each new knot copies its neighbor), add
     a new bias pair, and initialize the new knots with a small NLS over the
     window's IMU factors plus one velocity factor at the window end, the
     velocity estimate coming from forward IMU integration;
  2. update the keyframe window with the camera frames of the interval and
     triangulate newly-tracked landmarks;
  3. assemble IMU, LiDAR point-to-plane, visual, bias and prior factors and
     run Levenberg-Marquardt over the active blocks (the eta + 3 control
     points of the window per spline, both bias pairs, observed landmark
     inverse depths, and any estimated time offsets), re-associate LiDAR
     points with the optimized trajectory, and solve again;
  4. marginalize the blocks leaving the window (control points before the
     overlap and the old bias pair) by Schur complement into a new prior on
     { overlap control points, current biases, estimated offsets }.

Control points older than the window stay in the spline arrays and serve as
constants wherever measurements (visual keyframes, offset-shifted stamps)
reach outside the active segment, and the assembled trajectory over the full
run is read from the same arrays at the end.

LiDAR association resolves against a known plane map with a point-to-plane
distance gate; association queries per-point poses, so scan motion
distortion is handled by construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .factors import (
    GRAVITY,
    BiasPair,
    Extrinsics,
    LandmarkInvDepth,
    TimeOffsets,
    back_project,
    forward_integrate_imu,
    imu_eval,
    lidar_eval,
    visual_eval,
)
from .lie import align_z_to, project_so3, quat_from_rot
from .marginal import MarginalPrior, prior_factor, schur_complement
from .solver import BLOCK_DIMS, SolverConfig, StateLayout, retract_key, solve_lm
from .splines import KnotGrid, R3Spline, So3Spline, eval_position, eval_rotation, eval_velocity

K_SPLINE = 4


class InitializationError(RuntimeError):
    """Static initialization failed (motion detected or not enough data)."""


class _RangeExit(Exception):
    """A selected measurement left the evaluable range at a trial point."""


@dataclass
class SmootherConfig:
    dt: float = 0.03
    eta: int = 4
    n_keyframes: int = 10
    guard_knots: int = 2
    # measurement noise: discrete per-sample sigmas; bias sigmas are
    # random-walk densities per sqrt(s)
    sig_g: float = 1e-3
    sig_a: float = 1e-2
    sig_bg_rw: float = 1e-4
    sig_ba_rw: float = 1e-3
    sig_lidar: float = 5e-3
    sig_px: float = 1e-3
    sig_vel: float = 0.05
    # static initialization
    init_duration: float = 0.5
    init_gyro_std_max: float = 0.05
    init_accel_std_max: float = 0.5
    sig_bg_init: float = 2e-3
    sig_ba_init: float = 2e-2
    # LiDAR association
    assoc_gate: float = 0.3
    # keyframe policy and landmarks
    kf_parallax: float = 0.02
    kf_min_tracked: int = 30
    tri_parallax: float = 0.015
    tri_reproj_max: float = 0.01
    depth_min: float = 1e-3
    depth_max: float = 80.0
    # time offsets
    calibrate_ti: bool = False
    calibrate_tc: bool = False
    calib_start_delay: float = 5.0
    calib_warmup: float = 1.0  # span re-solved jointly when calibration starts
    offset_max: float = 0.05
    ti_init: float = 0.0
    tc_init: float = 0.0
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    two_pass: bool = True
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=15))
    solver_init: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=8))

    @property
    def window_duration(self) -> float:
        return self.eta * self.dt

    @property
    def n_phi(self) -> int:
        """Active control points per spline when a full window is active."""
        return self.eta + K_SPLINE - 1


@dataclass
class Keyframe:
    frame_id: int
    t: float
    obs: dict  # landmark id -> (2,) normalized observation


@dataclass
class KeyframeWindow:
    capacity: int
    frames: list = field(default_factory=list)

    def observers_of(self, lm_id: int) -> list:
        return [kf for kf in self.frames if lm_id in kf.obs]


@dataclass
class EstimatorState:
    rot: So3Spline
    pos: R3Spline
    biases: dict
    landmarks: dict
    offsets: TimeOffsets
    prior: MarginalPrior
    kappa: int = 0

    def block_value(self, key):
        kind = key[0]
        if kind == "R":
            return self.rot.ctrl[key[1]]
        if kind == "p":
            return self.pos.ctrl[key[1]]
        if kind == "bg":
            return self.biases[key[1]].bw
        if kind == "ba":
            return self.biases[key[1]].ba
        if kind == "lm":
            return self.landmarks[key[1]].inv_depth
        if kind == "ti":
            return self.offsets.t_i
        if kind == "tc":
            return self.offsets.t_c
        raise KeyError(key)

    def set_block_value(self, key, value) -> None:
        kind = key[0]
        if kind == "R":
            self.rot.ctrl[key[1]] = value
        elif kind == "p":
            self.pos.ctrl[key[1]] = value
        elif kind == "bg":
            self.biases[key[1]].bw = value
        elif kind == "ba":
            self.biases[key[1]].ba = value
        elif kind == "lm":
            self.landmarks[key[1]].inv_depth = value
        elif kind == "ti":
            self.offsets.t_i = value
        elif kind == "tc":
            self.offsets.t_c = value
        else:
            raise KeyError(key)

    def values_for(self, keys) -> dict:
        return {k: self.block_value(k) for k in keys}


@dataclass
class ImuWindow:
    t: np.ndarray  # raw stamps
    w: np.ndarray
    a: np.ndarray


@dataclass
class LidarWindow:
    t: np.ndarray
    pts: np.ndarray
    plane_pi: np.ndarray  # (B, 3) associated plane closest points
    ext: Extrinsics


@dataclass
class VisualWindow:
    lm_ids: np.ndarray
    t_a: np.ndarray
    uv_a: np.ndarray
    t_b: np.ndarray
    uv_b: np.ndarray
    ext: Extrinsics


class WindowProblem:
    """Batched NLS over one window's factors, driving the shared state.

    Measurement selection is frozen at construction; if a corrected stamp
    leaves the evaluable range during an iteration the trial cost becomes
    infinite and the step is rejected. Visual observations that lose forward
    depth contribute zero rows (counted in rejected_depth).
    """

    def __init__(
        self,
        state: EstimatorState,
        layout: StateLayout,
        cfg: SmootherConfig,
        imu: ImuWindow | None = None,
        lidars: list | None = None,
        visual: VisualWindow | None = None,
        bias_pair: tuple | None = None,  # (prev_kappa, cur_kappa)
        velocity: tuple | None = None,  # (v_hat, t)
        use_prior: bool = True,
    ):
        self.state = state
        self.layout = layout
        self.cfg = cfg
        self.lidars = lidars or []
        self.visual = visual
        self.bias_pair = bias_pair
        self.velocity = velocity
        self.use_prior = use_prior
        self.skipped_range = 0
        self.rejected_depth = 0

        grid = state.rot.grid
        if imu is not None and imu.t.size:
            ok = grid.in_range(imu.t + state.offsets.t_i)
            self.skipped_range += int(np.sum(~ok))
            imu = ImuWindow(imu.t[ok], imu.w[ok], imu.a[ok]) if np.any(ok) else None
        self.imu = imu
        if visual is not None and visual.lm_ids.size:
            ok = grid.in_range(visual.t_a + state.offsets.t_c) & grid.in_range(
                visual.t_b + state.offsets.t_c
            )
            self.skipped_range += int(np.sum(~ok))
            if np.any(ok):
                self.visual = VisualWindow(
                    visual.lm_ids[ok], visual.t_a[ok], visual.uv_a[ok],
                    visual.t_b[ok], visual.uv_b[ok], visual.ext,
                )
            else:
                self.visual = None

        n_knots = grid.num_knots
        self._rcol = np.full(n_knots, -1, dtype=int)
        self._pcol = np.full(n_knots, -1, dtype=int)
        self._lmcol: dict = {}
        for key, (off, _) in layout._offsets.items():
            if key[0] == "R":
                self._rcol[key[1]] = off
            elif key[0] == "p":
                self._pcol[key[1]] = off
            elif key[0] == "lm":
                self._lmcol[key[1]] = off

    # -- solve_lm interface --------------------------------------------

    def linearize(self):
        try:
            j, r = self._assemble(want_jac=True)
        except _RangeExit:
            n = self.layout.dim
            return np.zeros((n, n)), np.zeros(n), np.inf
        return j.T @ j, j.T @ r, 0.5 * float(r @ r)

    def evaluate_cost(self) -> float:
        try:
            _, r = self._assemble(want_jac=False)
        except _RangeExit:
            return np.inf
        return 0.5 * float(r @ r)

    def apply_step(self, dx: np.ndarray) -> None:
        for key, sl in self.layout.slices().items():
            self.state.set_block_value(
                key,
                retract_key(key, self.state.block_value(key), dx[sl], self.cfg.offset_max),
            )

    def snapshot(self):
        out = {}
        for key in self.layout.active_keys():
            v = self.state.block_value(key)
            out[key] = v.copy() if isinstance(v, np.ndarray) else v
        return out

    def restore(self, snap) -> None:
        for key, v in snap.items():
            self.state.set_block_value(key, v)

    # -- assembly --------------------------------------------------------

    def _scatter_ctrl(self, j_grp, seg, blocks, colmap, row_dim):
        """Add (B, 4, row_dim, 3) blocks into a (B*row_dim, n) group Jacobian."""
        b = seg.shape[0]
        rr = (np.arange(b) * row_dim)[:, None, None] + np.arange(row_dim)[None, :, None]
        for jj in range(4):
            cols = colmap[seg + jj]
            sel = cols >= 0
            if not np.any(sel):
                continue
            cc = cols[sel][:, None, None] + np.arange(3)[None, None, :]
            j_grp[rr[sel], cc] += blocks[sel, jj]

    def _assemble(self, want_jac: bool):
        st = self.state
        cfg = self.cfg
        grid = st.rot.grid
        n = self.layout.dim
        self.rejected_depth = 0
        res_groups = []
        jac_groups = [] if want_jac else None

        def emit(r, j_grp=None):
            res_groups.append(r)
            if want_jac:
                jac_groups.append(j_grp if j_grp is not None else np.zeros((r.size, n)))

        # ---- IMU factors
        if self.imu is not None:
            tau = self.imu.t + st.offsets.t_i
            if not np.all(grid.in_range(tau)):
                raise _RangeExit
            cur = st.biases[st.kappa]
            data = imu_eval(
                st.rot, st.pos, tau, self.imu.w, self.imu.a, cur.bw, cur.ba,
                gravity=cfg.gravity, want_jac=want_jac,
                want_ti=want_jac and st.offsets.est_i,
            )
            b = tau.size
            w_row = np.concatenate([np.full(3, 1.0 / cfg.sig_g), np.full(3, 1.0 / cfg.sig_a)])
            r = (data["resid"] * w_row).reshape(-1)
            if want_jac:
                j_grp = np.zeros((6 * b, n))
                jr = np.zeros((b, 4, 6, 3))
                jr[:, :, :3, :] = data["jw"]
                jr[:, :, 3:, :] = data["jar"]
                self._scatter_ctrl(j_grp, data["seg"], jr, self._rcol, 6)
                jp = np.zeros((b, 4, 6, 3))
                jp[:, :, 3:, :] = data["w2"][:, :, None, None] * data["rt"][:, None]
                self._scatter_ctrl(j_grp, data["seg"], jp, self._pcol, 6)
                off = self.layout.offset(("bg", st.kappa))
                rows = np.arange(b) * 6
                if off is not None:
                    for k in range(3):
                        j_grp[rows + k, off[0] + k] += 1.0
                off = self.layout.offset(("ba", st.kappa))
                if off is not None:
                    for k in range(3):
                        j_grp[rows + 3 + k, off[0] + k] += 1.0
                off = self.layout.offset(("ti", 0))
                if off is not None and "ti_col" in data:
                    j_grp[:, off[0]] += data["ti_col"].reshape(-1)
                j_grp *= np.tile(w_row, b)[:, None]
                emit(r, j_grp)
            else:
                emit(r)

        # ---- LiDAR factors (per stream)
        for lw in self.lidars:
            if lw.t.size == 0:
                continue
            if not np.all(grid.in_range(lw.t)):
                raise _RangeExit
            data = lidar_eval(st.rot, st.pos, lw.t, lw.pts, lw.plane_pi, lw.ext, want_jac=want_jac)
            w = 1.0 / cfg.sig_lidar
            r = data["resid"] * w
            if want_jac:
                b = lw.t.size
                j_grp = np.zeros((b, n))
                self._scatter_ctrl(
                    j_grp, data["seg"], data["jrow_r"][:, :, None, :], self._rcol, 1
                )
                self._scatter_ctrl(
                    j_grp, data["seg"], data["jrow_p"][:, :, None, :], self._pcol, 1
                )
                emit(r, j_grp * w)
            else:
                emit(r)

        # ---- visual factors
        if self.visual is not None:
            vw = self.visual
            tau_a = vw.t_a + st.offsets.t_c
            tau_b = vw.t_b + st.offsets.t_c
            if not (np.all(grid.in_range(tau_a)) and np.all(grid.in_range(tau_b))):
                raise _RangeExit
            invd = np.array([st.landmarks[i].inv_depth for i in vw.lm_ids])
            data = visual_eval(
                st.rot, st.pos, tau_a, tau_b, vw.uv_a, vw.uv_b, invd, vw.ext,
                depth_min=cfg.depth_min, want_jac=want_jac,
                want_tc=want_jac and st.offsets.est_c,
            )
            valid = data["valid"] & (invd > 0)
            self.rejected_depth = int(np.sum(~valid))
            w = 1.0 / cfg.sig_px
            r = np.where(valid[:, None], data["resid"], 0.0).reshape(-1) * w
            if want_jac:
                b = vw.lm_ids.size
                j_grp = np.zeros((2 * b, n))
                vmask = valid[:, None, None, None]
                self._scatter_ctrl(j_grp, data["seg_a"], data["jr_a"] * vmask, self._rcol, 2)
                self._scatter_ctrl(j_grp, data["seg_b"], data["jr_b"] * vmask, self._rcol, 2)
                self._scatter_ctrl(j_grp, data["seg_a"], data["jp_a"] * vmask, self._pcol, 2)
                self._scatter_ctrl(j_grp, data["seg_b"], data["jp_b"] * vmask, self._pcol, 2)
                rows = np.arange(b) * 2
                jlm = np.where(valid[:, None], data["jlm"], 0.0)
                for i, lm_id in enumerate(vw.lm_ids):
                    col = self._lmcol.get(int(lm_id))
                    if col is not None:
                        j_grp[rows[i] : rows[i] + 2, col] += jlm[i]
                off = self.layout.offset(("tc", 0))
                if off is not None and "jtc" in data:
                    jtc = np.where(valid[:, None], data["jtc"], 0.0)
                    j_grp[:, off[0]] += jtc.reshape(-1)
                emit(r, j_grp * w)
            else:
                emit(r)

        # ---- bias random-walk factor
        if self.bias_pair is not None:
            kp, kc = self.bias_pair
            prev, cur = st.biases[kp], st.biases[kc]
            sd = np.sqrt(cfg.window_duration)
            w_row = np.concatenate(
                [np.full(3, 1.0 / (cfg.sig_bg_rw * sd)), np.full(3, 1.0 / (cfg.sig_ba_rw * sd))]
            )
            r = np.concatenate([cur.bw - prev.bw, cur.ba - prev.ba]) * w_row
            if want_jac:
                j_grp = np.zeros((6, n))
                for sign, kk in ((-1.0, kp), (1.0, kc)):
                    off = self.layout.offset(("bg", kk))
                    if off is not None:
                        j_grp[:3, off[0] : off[0] + 3] += sign * np.eye(3)
                    off = self.layout.offset(("ba", kk))
                    if off is not None:
                        j_grp[3:, off[0] : off[0] + 3] += sign * np.eye(3)
                emit(r, j_grp * w_row[:, None])
            else:
                emit(r)

        # ---- velocity factor (window-growth initialization only)
        if self.velocity is not None:
            v_hat, t_v = self.velocity
            if not grid.in_range(t_v):
                raise _RangeExit
            r = (v_hat - eval_velocity(st.pos, t_v)) / cfg.sig_vel
            if want_jac:
                from .splines import cumulative_basis, ctrl_weights

                basis = cumulative_basis(st.pos.grid, t_v)
                w1 = ctrl_weights(basis.lam_dot, 1)
                j_grp = np.zeros((3, n))
                for jj in range(4):
                    col = self._pcol[int(basis.seg) + jj]
                    if col >= 0:
                        j_grp[:, col : col + 3] += -w1[jj] * np.eye(3)
                emit(r, j_grp / cfg.sig_vel)
            else:
                emit(r)

        # ---- marginal prior
        if self.use_prior and not st.prior.is_empty:
            ev = prior_factor(st.prior, st.values_for(st.prior.keys))
            r = ev.r
            if want_jac:
                j_grp = np.zeros((r.size, n))
                for key, blk in ev.jac.items():
                    off = self.layout.offset(key)
                    if off is not None:
                        j_grp[:, off[0] : off[0] + off[1]] += blk
                emit(r, j_grp)
            else:
                emit(r)

        if not res_groups:
            return np.zeros((0, n)), np.zeros(0)
        r_all = np.concatenate(res_groups)
        if not np.all(np.isfinite(r_all)):
            raise _RangeExit
        if want_jac:
            return np.vstack(jac_groups), r_all
        return None, r_all


# ---------------------------------------------------------------------------
# the smoother


@dataclass
class WindowDiagnostics:
    kappa: int
    t_start: float
    t_end: float
    cost_initial: float = np.nan
    cost_final: float = np.nan
    iterations: int = 0
    accepted: int = 0
    n_imu: int = 0
    n_lidar: int = 0
    n_visual: int = 0
    n_keyframes: int = 0
    n_landmarks: int = 0
    skipped_range: int = 0
    unassociated: int = 0
    rejected_depth: int = 0
    marginalized_blocks: int = 0
    prior_degenerate: bool = False
    offset_ti: float = 0.0
    offset_tc: float = 0.0
    time_assoc: float = 0.0
    time_solve: float = 0.0
    time_marg: float = 0.0
    unconstrained: int = 0
    h_eig_ratio: float = 1.0  # min/max eigenvalue of the final normal matrix
    solver_converged: bool = True


@dataclass
class StaticInitResult:
    r0: np.ndarray
    bw: np.ndarray
    ba: np.ndarray
    n_samples: int


def static_initialize(
    t: np.ndarray,
    w: np.ndarray,
    a: np.ndarray,
    cfg: SmootherConfig,
) -> StaticInitResult:
    """Biases and gravity-aligned attitude from a stationary IMU prefix.

    The gyro bias is the mean rate; the initial attitude is the minimal
    rotation mapping the measured specific-force direction onto the world
    vertical; the accel bias is the residual after removing gravity.
    """
    t = np.asarray(t, dtype=float)
    if t.size < 10 or t[-1] - t[0] < 0.9 * cfg.init_duration:
        raise InitializationError("not enough stationary IMU data")
    if np.max(np.std(w, axis=0)) > cfg.init_gyro_std_max:
        raise InitializationError("gyro variance too high: motion during initialization")
    if np.max(np.std(a, axis=0)) > cfg.init_accel_std_max:
        raise InitializationError("accel variance too high: motion during initialization")
    bw = np.mean(w, axis=0)
    mean_a = np.mean(a, axis=0)
    norm = np.linalg.norm(mean_a)
    if norm < 1e-6:
        raise InitializationError("degenerate accelerometer mean")
    # at rest a_m ~ -R^T g, so -mean_a points along R^T g
    u = mean_a / norm
    r0 = align_z_to(-u).T
    ba = mean_a + r0.T @ cfg.gravity
    return StaticInitResult(r0=r0, bw=bw, ba=ba, n_samples=int(t.size))


class Smoother:
    """Fixed-lag smoother; drive with begin() then one process_window per slide."""

    def __init__(
        self,
        cfg: SmootherConfig,
        plane_map: np.ndarray,
        lidar_ext: list | None = None,
        cam_ext: Extrinsics | None = None,
    ):
        self.cfg = cfg
        self.planes = np.asarray(plane_map, dtype=float).reshape(-1, 3)
        self.lidar_ext = lidar_ext or [Extrinsics.identity()]
        self.cam_ext = cam_ext
        self.state: EstimatorState | None = None
        self.kf_window = KeyframeWindow(capacity=cfg.n_keyframes)
        self._next_knot = 0  # number of committed control points
        self.diagnostics: list = []

    # -- lifecycle -------------------------------------------------------

    def begin(
        self,
        t0: float,
        r0: np.ndarray,
        p0: np.ndarray,
        bw: np.ndarray,
        ba: np.ndarray,
        seed_rot_ctrl: np.ndarray | None = None,
        seed_pos_ctrl: np.ndarray | None = None,
    ) -> None:
        """Create the state with the first spline order's worth of knots."""
        cfg = self.cfg
        rot_ctrl = (
            np.asarray(seed_rot_ctrl, dtype=float)
            if seed_rot_ctrl is not None
            else np.tile(r0, (K_SPLINE, 1, 1))
        )
        pos_ctrl = (
            np.asarray(seed_pos_ctrl, dtype=float)
            if seed_pos_ctrl is not None
            else np.tile(p0, (K_SPLINE, 1))
        )
        rot = So3Spline(KnotGrid(t0, cfg.dt, K_SPLINE), rot_ctrl.copy())
        pos = R3Spline(KnotGrid(t0, cfg.dt, K_SPLINE), pos_ctrl.copy())
        offsets = TimeOffsets(
            t_i=cfg.ti_init, t_c=cfg.tc_init, est_i=False, est_c=False, max_abs=cfg.offset_max
        )
        init_bias = BiasPair(bw.copy(), ba.copy(), 0)
        h0 = np.diag(
            np.concatenate(
                [np.full(3, 1.0 / cfg.sig_bg_init**2), np.full(3, 1.0 / cfg.sig_ba_init**2)]
            )
        )
        prior = MarginalPrior.from_information(
            h0,
            np.zeros(6),
            [("bg", 0), ("ba", 0)],
            {("bg", 0): bw.copy(), ("ba", 0): ba.copy()},
        )
        self.state = EstimatorState(
            rot=rot, pos=pos, biases={0: init_bias}, landmarks={},
            offsets=offsets, prior=prior, kappa=0,
        )
        self._next_knot = K_SPLINE

    def window_times(self, kappa: int) -> tuple[float, float]:
        t0 = self.state.rot.grid.t0
        return t0 + (kappa - 1) * self.cfg.window_duration, t0 + kappa * self.cfg.window_duration

    def set_timeoffset_calibration(self, ti: bool | None = None, tc: bool | None = None) -> None:
        """Toggle online estimation of the clock offsets.

        Newly enabling an offset switches the measurement model, so the
        marginal prior accumulated under the old model no longer describes
        the states; it is replaced by a weak prior on the current biases
        (same rationale as dropping the prior after an external trajectory
        correction). Without this the stale prior pins the trajectory and
        the offset converges impractically slowly.
        """
        changed = False
        if ti is not None and ti != self.state.offsets.est_i:
            self.state.offsets.est_i = ti
            changed = changed or ti
        if tc is not None and self.cam_ext is not None and tc != self.state.offsets.est_c:
            self.state.offsets.est_c = tc
            changed = changed or tc
        if changed:
            self.remove_prior(keep_weak_bias=True)

    def remove_prior(self, keep_weak_bias: bool = False) -> None:
        """Reset the marginal prior to zero information (idempotent).

        With keep_weak_bias, installs a loose prior on the current bias pair
        so the absolute bias level stays observable in the next window.
        """
        st = self.state
        if not keep_weak_bias:
            st.prior = MarginalPrior()
            return
        cfg = self.cfg
        k = st.kappa
        keys = [("bg", k), ("ba", k)]
        # barely-informative: the old bias estimate may carry the very error
        # being corrected, so this only keeps the bias level observable
        sig_bg, sig_ba = 50 * cfg.sig_bg_init, 50 * cfg.sig_ba_init
        h0 = np.diag(
            np.concatenate([np.full(3, 1.0 / sig_bg**2), np.full(3, 1.0 / sig_ba**2)])
        )
        lin = {("bg", k): st.biases[k].bw.copy(), ("ba", k): st.biases[k].ba.copy()}
        st.prior = MarginalPrior.from_information(h0, np.zeros(6), keys, lin)

    # -- window growth -----------------------------------------------------

    def _ensure_knots(self, count: int) -> None:
        """Grow the ctrl arrays to `count` knots by copying the last value."""
        st = self.state
        n = st.rot.grid.num_knots
        if count <= n:
            return
        st.rot.append_knots(np.tile(st.rot.ctrl[-1], (count - n, 1, 1)))
        st.pos.append_knots(np.tile(st.pos.ctrl[-1], (count - n, 1)))

    def extend_window(self, imu: ImuWindow) -> LMReport | None:
        """Append the next window's knots and bias pair, initialize via NLS."""
        st = self.state
        cfg = self.cfg
        kappa = st.kappa + 1
        last_committed = self._next_knot - 1
        end_knot = kappa * cfg.eta + K_SPLINE - 2  # last control point window kappa touches
        new_knots = list(range(self._next_knot, end_knot + 1))
        self._ensure_knots(end_knot + 1 + cfg.guard_knots)
        for i in new_knots:
            st.rot.ctrl[i] = st.rot.ctrl[last_committed]
            st.pos.ctrl[i] = st.pos.ctrl[last_committed]
        for i in range(end_knot + 1, st.rot.grid.num_knots):
            st.rot.ctrl[i] = st.rot.ctrl[end_knot]
            st.pos.ctrl[i] = st.pos.ctrl[end_knot]
        self._next_knot = end_knot + 1

        prev = st.biases[st.kappa]
        st.biases[kappa] = BiasPair(prev.bw.copy(), prev.ba.copy(), kappa)
        st.kappa = kappa

        if imu.t.size < 2:
            return None  # no data: keep the copied extrapolation

        t_start, _ = self.window_times(kappa)
        tau = imu.t + st.offsets.t_i
        order = np.argsort(tau)
        tau, w_m, a_m = tau[order], imu.w[order], imu.a[order]
        ok = st.rot.grid.in_range(tau) & (tau >= t_start)
        if np.sum(ok) < 2:
            return None
        r_start = eval_rotation(st.rot, t_start)
        v_start = eval_velocity(st.pos, t_start)
        v_hat = forward_integrate_imu(
            tau[ok], w_m[ok], a_m[ok], r_start, v_start, prev.bw, prev.ba, cfg.gravity
        )
        active = [("R", i) for i in new_knots] + [("p", i) for i in new_knots]
        layout = StateLayout.from_keys(active)
        problem = WindowProblem(
            st, layout, cfg,
            imu=ImuWindow(imu.t, imu.w, imu.a),
            velocity=(v_hat, float(tau[ok][-1])),
            use_prior=False,
        )
        return solve_lm(problem, cfg.solver_init)

    # -- keyframes and landmarks -------------------------------------------

    def _mean_parallax(self, a: Keyframe, b: Keyframe) -> tuple[float, int]:
        shared = [i for i in a.obs if i in b.obs]
        if not shared:
            return np.inf, 0
        d = np.array([np.linalg.norm(a.obs[i] - b.obs[i]) for i in shared])
        return float(np.mean(d)), len(shared)

    def keyframe_update(self, frame: Keyframe) -> None:
        """Slide the keyframe window with the incoming frame.

        The newest slot always holds the latest image; the previous newest
        is promoted to keyframe when it moved enough (or tracking thinned),
        otherwise it is discarded.
        """
        win = self.kf_window
        if len(win.frames) < 2:
            win.frames.append(frame)
            return
        candidate = win.frames[-1]
        anchor_kf = win.frames[-2]
        parallax, tracked = self._mean_parallax(candidate, anchor_kf)
        if parallax >= self.cfg.kf_parallax or tracked < self.cfg.kf_min_tracked:
            if len(win.frames) >= win.capacity + 1:
                self._drop_oldest_keyframe()
        else:
            win.frames.pop()
        win.frames.append(frame)

    def _drop_oldest_keyframe(self) -> None:
        st = self.state
        dropped = self.kf_window.frames.pop(0)
        for lm_id in list(st.landmarks):
            lm = st.landmarks[lm_id]
            if lm.anchor_id != dropped.frame_id:
                continue
            observers = self.kf_window.observers_of(lm_id)
            if not observers:
                del st.landmarks[lm_id]
                continue
            transferred = self._transfer_anchor(lm_id, lm, observers[0])
            if transferred is None:
                del st.landmarks[lm_id]
            else:
                st.landmarks[lm_id] = transferred

    def _transfer_anchor(self, lm_id: int, lm: LandmarkInvDepth, new_anchor: Keyframe):
        """Re-express the inverse depth in a new anchor at the current estimate."""
        st = self.state
        ext = self.cam_ext
        tau_old = lm.anchor_t + st.offsets.t_c
        tau_new = new_anchor.t + st.offsets.t_c
        grid = st.rot.grid
        if not (grid.in_range(tau_old) and grid.in_range(tau_new)):
            return None
        r_old = eval_rotation(st.rot, tau_old)
        p_old = eval_position(st.pos, tau_old)
        x_w = r_old @ (ext.r @ (back_project(lm.anchor_uv) / lm.inv_depth) + ext.p) + p_old
        r_new = eval_rotation(st.rot, tau_new)
        p_new = eval_position(st.pos, tau_new)
        cam = ext.r.T @ (r_new.T @ (x_w - p_new) - ext.p)
        if cam[2] < self.cfg.depth_min:
            return None
        return LandmarkInvDepth(
            inv_depth=1.0 / cam[2],
            anchor_id=new_anchor.frame_id,
            anchor_t=new_anchor.t,
            anchor_uv=np.asarray(new_anchor.obs[lm_id], dtype=float),
        )

    def triangulate_landmark(self, lm_id: int):
        """DLT triangulation across the keyframe window; None on rejection."""
        st = self.state
        cfg = self.cfg
        ext = self.cam_ext
        observers = self.kf_window.observers_of(lm_id)
        if len(observers) < 2:
            return None
        grid = st.rot.grid
        poses = []
        for kf in observers:
            tau = kf.t + st.offsets.t_c
            if not grid.in_range(tau):
                continue
            r_i = eval_rotation(st.rot, tau)
            p_i = eval_position(st.pos, tau)
            r_c = r_i @ ext.r
            p_c = r_i @ ext.p + p_i
            poses.append((kf, r_c, p_c))
        if len(poses) < 2:
            return None
        rays_w = np.array(
            [r_c @ back_project(kf.obs[lm_id]) for kf, r_c, _ in poses]
        )
        rays_w /= np.linalg.norm(rays_w, axis=1, keepdims=True)
        cosang = np.clip(rays_w[1:] @ rays_w[0], -1.0, 1.0)
        if np.max(np.arccos(cosang), initial=0.0) < cfg.tri_parallax:
            return None
        a_rows = []
        c_rows = []
        for kf, r_c, p_c in poses:
            u, v = kf.obs[lm_id]
            m = r_c.T
            d = -r_c.T @ p_c
            a_rows.append(u * m[2] - m[0])
            c_rows.append(-(u * d[2] - d[0]))
            a_rows.append(v * m[2] - m[1])
            c_rows.append(-(v * d[2] - d[1]))
        x_w, *_ = np.linalg.lstsq(np.array(a_rows), np.array(c_rows), rcond=None)
        # acceptance: depth range in anchor, mean reprojection error
        kf0, r_c0, p_c0 = poses[0]
        cam0 = r_c0.T @ (x_w - p_c0)
        if not (cfg.depth_min < cam0[2] < cfg.depth_max):
            return None
        errs = []
        for kf, r_c, p_c in poses:
            cam = r_c.T @ (x_w - p_c)
            if cam[2] < cfg.depth_min:
                return None
            errs.append(np.linalg.norm(cam[:2] / cam[2] - kf.obs[lm_id]))
        if np.mean(errs) > cfg.tri_reproj_max:
            return None
        return LandmarkInvDepth(
            inv_depth=1.0 / cam0[2],
            anchor_id=kf0.frame_id,
            anchor_t=kf0.t,
            anchor_uv=np.asarray(kf0.obs[lm_id], dtype=float),
        )

    def _update_landmarks(self) -> None:
        """Triangulate tracked-but-unestimated landmarks; refresh anchors."""
        st = self.state
        seen: dict = {}
        for kf in self.kf_window.frames:
            for lm_id in kf.obs:
                seen.setdefault(lm_id, 0)
                seen[lm_id] += 1
        for lm_id, count in seen.items():
            if lm_id in st.landmarks or count < 2:
                continue
            lm = self.triangulate_landmark(lm_id)
            if lm is not None:
                st.landmarks[lm_id] = lm
        # drop landmarks that lost all observations
        for lm_id in list(st.landmarks):
            if not self.kf_window.observers_of(lm_id):
                del st.landmarks[lm_id]

    def _gather_visual(self) -> VisualWindow | None:
        st = self.state
        if self.cam_ext is None or not st.landmarks:
            return None
        ids, t_a, uv_a, t_b, uv_b = [], [], [], [], []
        frame_by_id = {kf.frame_id: kf for kf in self.kf_window.frames}
        for lm_id, lm in st.landmarks.items():
            anchor = frame_by_id.get(lm.anchor_id)
            if anchor is None:
                continue
            for kf in self.kf_window.frames:
                if kf.frame_id == lm.anchor_id or lm_id not in kf.obs:
                    continue
                ids.append(lm_id)
                t_a.append(lm.anchor_t)
                uv_a.append(lm.anchor_uv)
                t_b.append(kf.t)
                uv_b.append(kf.obs[lm_id])
        if not ids:
            return None
        return VisualWindow(
            lm_ids=np.array(ids), t_a=np.array(t_a), uv_a=np.array(uv_a),
            t_b=np.array(t_b), uv_b=np.array(uv_b), ext=self.cam_ext,
        )

    # -- LiDAR association ---------------------------------------------------

    def associate_lidar(self, t: np.ndarray, pts: np.ndarray, ext: Extrinsics):
        """Nearest plane within the distance gate, on per-point-stamp poses."""
        st = self.state
        ok = st.rot.grid.in_range(t)
        idx = np.full(t.shape, -1, dtype=int)
        if not np.any(ok):
            return idx
        ev = lidar_eval(st.rot, st.pos, t[ok], pts[ok], np.tile(self.planes[0], (int(np.sum(ok)), 1)), ext, want_jac=False)
        p_w = ev["p_w"]
        d = np.linalg.norm(self.planes, axis=1)
        n_pl = self.planes / d[:, None]
        dist = np.abs(p_w @ n_pl.T - d[None, :])
        best = np.argmin(dist, axis=1)
        best_d = dist[np.arange(best.size), best]
        best[best_d > self.cfg.assoc_gate] = -1
        idx[ok] = best
        return idx

    def _build_lidar_windows(self, lidar_raw: list) -> tuple[list, int]:
        windows = []
        unassociated = 0
        for stream_idx, (t, pts) in enumerate(lidar_raw):
            if t.size == 0:
                continue
            ext = self.lidar_ext[stream_idx]
            idx = self.associate_lidar(t, pts, ext)
            ok = idx >= 0
            unassociated += int(np.sum(~ok))
            if np.any(ok):
                windows.append(
                    LidarWindow(t[ok], pts[ok], self.planes[idx[ok]], ext)
                )
        return windows, unassociated

    # -- the full window cycle ------------------------------------------------

    def process_window(
        self,
        imu: ImuWindow,
        lidar_raw: list,
        frames: list | None = None,
    ) -> WindowDiagnostics:
        """Extend, optimize (two-pass association), and marginalize one window."""
        st = self.state
        cfg = self.cfg
        t_solve = t_assoc = 0.0

        tic = time.perf_counter()
        self.extend_window(imu)
        t_solve += time.perf_counter() - tic
        kappa = st.kappa
        t_lo, t_hi = self.window_times(kappa)
        diag = WindowDiagnostics(kappa=kappa, t_start=t_lo, t_end=t_hi)

        tic = time.perf_counter()
        for frame in frames or []:
            self.keyframe_update(frame)
        self._update_landmarks()
        visual = self._gather_visual()
        lidars, diag.unassociated = self._build_lidar_windows(lidar_raw)
        t_assoc += time.perf_counter() - tic

        active = self._active_keys(visual)
        layout = StateLayout.from_keys(active)

        passes = 2 if (cfg.two_pass and lidar_raw) else 1
        report = None
        for ipass in range(passes):
            tic = time.perf_counter()
            problem = WindowProblem(
                st, layout, cfg, imu=imu, lidars=lidars, visual=visual,
                bias_pair=(kappa - 1, kappa),
            )
            report = solve_lm(problem, cfg.solver)
            t_solve += time.perf_counter() - tic
            if ipass == 0:
                diag.cost_initial = report.initial_cost
            diag.iterations += len(report.iterations)
            diag.accepted += report.accepted_steps
            diag.skipped_range = problem.skipped_range
            diag.rejected_depth = problem.rejected_depth
            diag.unconstrained = len(report.unconstrained_keys)
            if ipass + 1 < passes:
                tic = time.perf_counter()
                lidars, diag.unassociated = self._build_lidar_windows(lidar_raw)
                t_assoc += time.perf_counter() - tic
        diag.cost_final = report.final_cost if report else np.nan
        diag.solver_converged = bool(report.converged) if report else False
        h, _, _ = problem.linearize()
        if h.shape[0]:
            eigs = np.linalg.eigvalsh(h)
            diag.h_eig_ratio = float(eigs[0] / max(eigs[-1], 1e-300))

        diag.n_imu = int(imu.t.size)
        diag.n_lidar = int(sum(lw.t.size for lw in lidars))
        diag.n_visual = int(visual.lm_ids.size) if visual is not None else 0
        diag.n_keyframes = len(self.kf_window.frames)
        diag.n_landmarks = len(st.landmarks)

        tic = time.perf_counter()
        self.marginalize_temporal(imu, lidars, diag)
        diag.time_marg = time.perf_counter() - tic
        diag.time_solve = t_solve
        diag.time_assoc = t_assoc
        diag.offset_ti = st.offsets.t_i
        diag.offset_tc = st.offsets.t_c
        self.diagnostics.append(diag)
        return diag

    def calibrate_offset_batch(self, imu: ImuWindow, lidar_raw: list) -> float:
        """Joint re-fit of the recent trajectory and t_I when calibration starts.

        The trajectory estimated under a fixed wrong offset is itself
        time-warped toward the IMU clock, so the joint problem at enable
        time has several basins 10-20 ms apart, and the frozen history
        would drag a single-window solve away from the true offset. This
        re-solves the cached recent span (control points plus current
        biases plus t_I, LiDAR anchoring true time) once per coarse offset
        candidate and keeps the lowest-cost basin. Returns the offset.
        """
        st = self.state
        cfg = self.cfg
        if imu.t.size < 4:
            return st.offsets.t_i
        grid = st.rot.grid
        t_span_lo = float(np.min(imu.t) + st.offsets.t_i)
        lo_seg = max(0, int(np.floor((t_span_lo - grid.t0) / grid.dt)))
        ctrl_idx = range(lo_seg, self._next_knot)
        keys = [("R", i) for i in ctrl_idx] + [("p", i) for i in ctrl_idx]
        keys += [("bg", st.kappa), ("ba", st.kappa), ("ti", 0)]
        layout = StateLayout.from_keys(keys)

        lidars, _ = self._build_lidar_windows(lidar_raw)
        best = None
        base_ti = st.offsets.t_i
        probe = WindowProblem(st, layout, cfg, imu=imu, use_prior=False)
        base_snap = probe.snapshot()
        cand = np.clip(np.arange(-4, 5) * 8e-3 + base_ti, -cfg.offset_max, cfg.offset_max)
        for c in cand:
            st.offsets.t_i = float(c)
            problem = WindowProblem(st, layout, cfg, imu=imu, lidars=lidars, use_prior=True)
            report = solve_lm(problem, cfg.solver)
            if np.isfinite(report.final_cost) and (best is None or report.final_cost < best[0]):
                best = (report.final_cost, problem.snapshot())
            problem.restore(base_snap)
        if best is not None:
            probe.restore(best[1])
        return st.offsets.t_i

    def _active_keys(self, visual: VisualWindow | None) -> list:
        st = self.state
        cfg = self.cfg
        kappa = st.kappa
        lo = (kappa - 1) * cfg.eta
        hi = kappa * cfg.eta + K_SPLINE - 2  # inclusive
        keys = [("R", i) for i in range(lo, hi + 1)]
        keys += [("p", i) for i in range(lo, hi + 1)]
        keys += [("bg", kappa - 1), ("ba", kappa - 1), ("bg", kappa), ("ba", kappa)]
        if visual is not None:
            for lm_id in sorted(set(int(i) for i in visual.lm_ids)):
                keys.append(("lm", lm_id))
        if st.offsets.est_i:
            keys.append(("ti", 0))
        if st.offsets.est_c:
            keys.append(("tc", 0))
        return keys

    def marginalize_temporal(
        self, imu: ImuWindow, lidars: list, diag: WindowDiagnostics | None = None
    ) -> MarginalPrior:
        """Schur-marginalize the blocks leaving the window into a new prior."""
        st = self.state
        cfg = self.cfg
        kappa = st.kappa
        lo = (kappa - 1) * cfg.eta
        drop_ctrl = list(range(lo, kappa * cfg.eta))
        keep_ctrl = list(range(kappa * cfg.eta, kappa * cfg.eta + K_SPLINE - 1))
        drop_keys = [("R", i) for i in drop_ctrl] + [("p", i) for i in drop_ctrl]
        drop_keys += [("bg", kappa - 1), ("ba", kappa - 1)]
        keep_keys = [("R", i) for i in keep_ctrl] + [("p", i) for i in keep_ctrl]
        keep_keys += [("bg", kappa), ("ba", kappa)]
        if st.offsets.est_i:
            keep_keys.append(("ti", 0))
        if st.offsets.est_c:
            keep_keys.append(("tc", 0))

        layout = StateLayout.from_keys(drop_keys + keep_keys)
        problem = WindowProblem(
            st, layout, cfg, imu=imu, lidars=lidars, bias_pair=(kappa - 1, kappa)
        )
        h, b, _ = problem.linearize()
        nd = sum(BLOCK_DIMS[k[0]] for k in drop_keys)
        h_hat, b_hat, degenerate = schur_complement(
            h, b, keep=np.arange(nd, layout.dim), drop=np.arange(nd)
        )
        lin = {}
        for k in keep_keys:
            v = st.block_value(k)
            lin[k] = v.copy() if isinstance(v, np.ndarray) else v
        st.prior = MarginalPrior.from_information(h_hat, b_hat, keep_keys, lin)
        assert set(st.prior.keys) == set(keep_keys)
        if diag is not None:
            diag.marginalized_blocks = len(drop_keys)
            diag.prior_degenerate = degenerate
        del st.biases[kappa - 1]
        # re-orthonormalize the window's control points before they freeze
        for i in range(lo, min(kappa * cfg.eta + K_SPLINE - 1, st.rot.grid.num_knots)):
            st.rot.ctrl[i] = project_so3(st.rot.ctrl[i])
        return st.prior

    # -- outputs ---------------------------------------------------------

    def trajectory_samples(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Positions and quaternions (w,x,y,z) at the given times."""
        st = self.state
        times = np.asarray(times, dtype=float)
        pos = eval_position(st.pos, times)
        quat = quat_from_rot(eval_rotation(st.rot, times))
        return pos, quat
