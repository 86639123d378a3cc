"""Uniform cumulative cubic B-spline trajectories on R^3 and SO(3).

A trajectory is controlled by knots spaced dt apart starting at t0. Time t
in segment i (t_i <= t < t_{i+1}, t_i = t0 + i*dt) is evaluated from the
four control points ctrl[i..i+3] through the cumulative basis

    lam(u) = M^T (1, u, u^2, u^3),   u = (t - t_i) / dt

where M is the cumulative blending matrix of the uniform cubic B-spline.
lam[0] == 1 always, so the curve is the base control point plus weighted
difference vectors:

    p(t) = p_i + sum_j lam_j(t) (p_{i+j} - p_{i+j-1})
    R(t) = R_i * prod_j Exp(lam_j(t) Log(R_{i+j-1}^T R_{i+j}))

Time derivatives carry one 1/dt factor per order. Rotation-side Jacobians
use the right-multiplicative perturbation convention R -> R Exp(eps) on both
the control points and the evaluated rotation.

A spline with N control points is evaluable on [t0, t0 + (N-3) dt).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lie import exp_so3, hat, log_so3, right_jacobian, right_jacobian_inv

K_ORDER = 4  # cubic

# Cumulative blending matrix, rows indexed by power of u, columns by j.
# Column 0 is (1,0,0,0): lam_0 == 1 identically.
_M_CUM = (
    np.array(
        [
            [6.0, 5.0, 1.0, 0.0],
            [0.0, 3.0, 3.0, 0.0],
            [0.0, -3.0, 3.0, 0.0],
            [0.0, 1.0, -2.0, 1.0],
        ]
    )
    / 6.0
)


class SplineRangeError(ValueError):
    """Evaluation time outside the spline's valid interval."""


@dataclass
class KnotGrid:
    """Uniform knot grid: knot i sits at t0 + i*dt."""

    t0: float
    dt: float
    num_knots: int

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("knot spacing dt must be positive")
        if self.num_knots < K_ORDER:
            raise ValueError(f"need at least {K_ORDER} control points")

    @property
    def num_segments(self) -> int:
        return self.num_knots - K_ORDER + 1

    @property
    def t_end(self) -> float:
        """Exclusive end of the evaluable interval."""
        return self.t0 + self.num_segments * self.dt

    def knot_time(self, i: int) -> float:
        return self.t0 + i * self.dt

    def in_range(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        tol = 1e-9 * self.dt
        return (t >= self.t0 - tol) & (t < self.t_end)

    def segment_u(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Segment index and normalized position u in [0, 1) for time(s) t.

        Raises SplineRangeError if any time is outside the valid interval.
        """
        t = np.asarray(t, dtype=float)
        tol = 1e-9 * self.dt
        if np.any(t < self.t0 - tol) or np.any(t >= self.t_end):
            bad = t[(t < self.t0 - tol) | (t >= self.t_end)]
            raise SplineRangeError(
                f"time {np.atleast_1d(bad)[0]:.9f} outside valid interval "
                f"[{self.t0:.9f}, {self.t_end:.9f})"
            )
        s = (t - self.t0) / self.dt
        i = np.clip(np.floor(s).astype(int), 0, self.num_segments - 1)
        u = np.clip(s - i, 0.0, 1.0 - 1e-16)
        return i, u


@dataclass
class BasisEval:
    """Cumulative basis values and time derivatives at one or more times.

    lam[..., 0] == 1 exactly; derivative arrays carry 1/dt^order factors.
    """

    seg: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    lam_dot: np.ndarray
    lam_ddot: np.ndarray
    lam_dddot: np.ndarray


def basis_at(grid: KnotGrid, seg, u) -> BasisEval:
    """Basis at explicit (segment, u); u may be 1.0 for one-sided limits."""
    seg = np.asarray(seg)
    u = np.asarray(u, dtype=float)
    one = np.ones_like(u)
    zero = np.zeros_like(u)
    pw = np.stack([one, u, u * u, u ** 3], axis=-1)
    pw_d = np.stack([zero, one, 2 * u, 3 * u * u], axis=-1) / grid.dt
    pw_dd = np.stack([zero, zero, 2 * one, 6 * u], axis=-1) / grid.dt ** 2
    pw_ddd = np.stack([zero, zero, zero, 6 * one], axis=-1) / grid.dt ** 3
    return BasisEval(
        seg=seg,
        u=u,
        lam=pw @ _M_CUM,
        lam_dot=pw_d @ _M_CUM,
        lam_ddot=pw_dd @ _M_CUM,
        lam_dddot=pw_ddd @ _M_CUM,
    )


def cumulative_basis(grid: KnotGrid, t) -> BasisEval:
    seg, u = grid.segment_u(t)
    return basis_at(grid, seg, u)


def ctrl_weights(lam_order: np.ndarray, order: int) -> np.ndarray:
    """Weights on the 4 involved control points for a derivative order.

    Expanding sum_j lam_j (c_{i+j} - c_{i+j-1}) gives per-control-point
    weights (1-lam_1, lam_1-lam_2, lam_2-lam_3, lam_3); for derivatives the
    leading 1 (from the base point) drops out.
    """
    l1, l2, l3 = lam_order[..., 1], lam_order[..., 2], lam_order[..., 3]
    w0 = (1.0 - l1) if order == 0 else -l1
    return np.stack([w0, l1 - l2, l2 - l3, l3], axis=-1)


# ---------------------------------------------------------------------------
# R^3 spline


@dataclass
class R3Spline:
    grid: KnotGrid
    ctrl: np.ndarray  # (num_knots, 3)

    def __post_init__(self):
        self.ctrl = np.asarray(self.ctrl, dtype=float)
        if self.ctrl.shape != (self.grid.num_knots, 3):
            raise ValueError("ctrl must have shape (num_knots, 3)")

    def append_knots(self, values: np.ndarray) -> None:
        values = np.atleast_2d(np.asarray(values, dtype=float))
        self.ctrl = np.concatenate([self.ctrl, values], axis=0)
        self.grid.num_knots += values.shape[0]

    def derivative(self, t, order: int) -> np.ndarray:
        basis = cumulative_basis(self.grid, t)
        return r3_derivative(self, basis, order)


def _gather_ctrl(ctrl: np.ndarray, seg: np.ndarray) -> np.ndarray:
    idx = np.asarray(seg)[..., None] + np.arange(K_ORDER)
    return ctrl[idx]


def r3_derivative(spline: R3Spline, basis: BasisEval, order: int) -> np.ndarray:
    lam = (basis.lam, basis.lam_dot, basis.lam_ddot, basis.lam_dddot)[order]
    w = ctrl_weights(lam, order)
    c = _gather_ctrl(spline.ctrl, basis.seg)
    return np.einsum("...j,...jk->...k", w, c)


def eval_position(spline: R3Spline, t) -> np.ndarray:
    return spline.derivative(t, 0)


def eval_velocity(spline: R3Spline, t) -> np.ndarray:
    return spline.derivative(t, 1)


def eval_acceleration(spline: R3Spline, t) -> np.ndarray:
    return spline.derivative(t, 2)


def eval_jerk(spline: R3Spline, t) -> np.ndarray:
    return spline.derivative(t, 3)


def jac_position_wrt_ctrl(spline: R3Spline, t, order: int = 0) -> np.ndarray:
    """3 x 12 Jacobian of the order-th derivative w.r.t. the 4 control points."""
    basis = cumulative_basis(spline.grid, t)
    lam = (basis.lam, basis.lam_dot, basis.lam_ddot, basis.lam_dddot)[order]
    w = ctrl_weights(lam, order)
    if w.ndim != 1:
        raise ValueError("jac_position_wrt_ctrl expects a scalar time")
    return np.concatenate([wj * np.eye(3) for wj in w], axis=1)


# ---------------------------------------------------------------------------
# SO(3) spline


@dataclass
class So3Spline:
    grid: KnotGrid
    ctrl: np.ndarray  # (num_knots, 3, 3)

    def __post_init__(self):
        self.ctrl = np.asarray(self.ctrl, dtype=float)
        if self.ctrl.shape != (self.grid.num_knots, 3, 3):
            raise ValueError("ctrl must have shape (num_knots, 3, 3)")

    def append_knots(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float).reshape((-1, 3, 3))
        self.ctrl = np.concatenate([self.ctrl, values], axis=0)
        self.grid.num_knots += values.shape[0]


@dataclass
class So3Eval:
    """Batched SO(3) spline evaluation with intermediates kept for Jacobians."""

    basis: BasisEval
    d: np.ndarray  # (B, 3, 3): difference vectors d_1..d_3 per sample
    a: np.ndarray  # (B, 3, 3, 3): A_j = Exp(lam_j d_j)
    r: np.ndarray  # (B, 3, 3): R(t)
    omega: np.ndarray  # (B, 3): body angular velocity
    omega_hist: np.ndarray  # (B, 3, 3): omega after 0, 1, 2 recursion steps
    domega: np.ndarray  # (B, 3): body angular acceleration


def _segment_logs(ctrl: np.ndarray, seg: np.ndarray) -> np.ndarray:
    """d_j = Log(R_{i+j-1}^T R_{i+j}) for j = 1..3, shape (B, 3, 3)."""
    lo = int(seg.min())
    hi = int(seg.max()) + K_ORDER  # pairs (j, j+1) for j in [lo, hi-1)
    rel = ctrl[lo : hi - 1].transpose(0, 2, 1) @ ctrl[lo + 1 : hi]
    logs = log_so3(rel)  # (hi-1-lo, 3)
    idx = (seg - lo)[:, None] + np.arange(K_ORDER - 1)
    return logs[idx]


def so3_eval_at(spline: So3Spline, seg, u, with_accel: bool = False) -> So3Eval:
    """Evaluate the rotation spline at explicit (segment, u) pairs."""
    seg = np.atleast_1d(np.asarray(seg))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    basis = basis_at(spline.grid, seg, u)
    d = _segment_logs(spline.ctrl, seg)
    b = seg.shape[0]

    phi = basis.lam[:, 1:, None] * d
    a = exp_so3(phi.reshape(-1, 3)).reshape(b, 3, 3, 3)

    r = spline.ctrl[seg] @ a[:, 0] @ a[:, 1] @ a[:, 2]

    # body angular velocity by the cumulative recursion
    omega_hist = np.zeros((b, 3, 3))
    omega = np.zeros((b, 3))
    domega = np.zeros((b, 3))
    for j in range(3):
        omega_hist[:, j] = omega
        at = a[:, j].transpose(0, 2, 1)
        ld = basis.lam_dot[:, j + 1, None] * d[:, j]
        if with_accel:
            domega = (
                np.einsum("bij,bj->bi", at, domega)
                - np.cross(ld, np.einsum("bij,bj->bi", at, omega))
                + basis.lam_ddot[:, j + 1, None] * d[:, j]
            )
        omega = np.einsum("bij,bj->bi", at, omega) + ld
    return So3Eval(basis=basis, d=d, a=a, r=r, omega=omega, omega_hist=omega_hist, domega=domega)


def so3_eval(spline: So3Spline, t, with_accel: bool = False) -> So3Eval:
    t = np.asarray(t, dtype=float)
    seg, u = spline.grid.segment_u(np.atleast_1d(t))
    return so3_eval_at(spline, seg, u, with_accel=with_accel)


def so3_ctrl_jacobians(
    spline: So3Spline, ev: So3Eval, want_r: bool = True, want_omega: bool = True
) -> dict:
    """Jacobians of R(t) and body omega(t) w.r.t. the 4 control points.

    Returns blocks of shape (B, 4, 3, 3) under keys 'r' and 'omega'. The 'r'
    blocks map a control-point perturbation R_c -> R_c Exp(eps) to the output
    perturbation R -> R Exp(J eps); the 'omega' blocks are plain derivatives
    of the angular-velocity vector.
    """
    b = ev.d.shape[0]
    lam = ev.basis.lam[:, 1:]  # (B, 3)
    lam_dot = ev.basis.lam_dot[:, 1:]
    a = ev.a
    d = ev.d

    flat = d.reshape(-1, 3)
    jr_inv_d = right_jacobian_inv(flat).reshape(b, 3, 3, 3)
    exp_d_t = exp_so3(flat).reshape(b, 3, 3, 3).transpose(0, 1, 3, 2)
    d_left = -jr_inv_d @ exp_d_t  # d d_j / d eps(left knot)
    d_right = jr_inv_d  # d d_j / d eps(right knot)

    out = {}
    if want_r:
        jr_lam = right_jacobian((lam[..., None] * d).reshape(-1, 3)).reshape(b, 3, 3, 3)
        # post products P_j = A_{j+1} ... A_3
        p2 = a[:, 2]
        p1 = a[:, 1] @ p2
        p0 = a[:, 0] @ p1
        post_t = np.stack([p1, p2, np.broadcast_to(np.eye(3), (b, 3, 3))], axis=1).transpose(
            0, 1, 3, 2
        )
        dr_dd = lam[..., None, None] * (post_t @ jr_lam)  # (B, 3, 3, 3)
        blocks = np.empty((b, 4, 3, 3))
        blocks[:, 0] = p0.transpose(0, 2, 1) + dr_dd[:, 0] @ d_left[:, 0]
        blocks[:, 1] = dr_dd[:, 0] @ d_right[:, 0] + dr_dd[:, 1] @ d_left[:, 1]
        blocks[:, 2] = dr_dd[:, 1] @ d_right[:, 1] + dr_dd[:, 2] @ d_left[:, 2]
        blocks[:, 3] = dr_dd[:, 2] @ d_right[:, 2]
        out["r"] = blocks
    if want_omega:
        jr_neg = right_jacobian((-lam[..., None] * d).reshape(-1, 3)).reshape(b, 3, 3, 3)
        eye = np.broadcast_to(np.eye(3), (b, 3, 3))
        dw_dd = np.empty((b, 3, 3, 3))
        for m in range(3):
            s = lam[:, m, None, None] * (
                a[:, m].transpose(0, 2, 1) @ hat(ev.omega_hist[:, m]) @ jr_neg[:, m]
            ) + lam_dot[:, m, None, None] * eye
            for j in range(m + 1, 3):
                s = a[:, j].transpose(0, 2, 1) @ s
            dw_dd[:, m] = s
        blocks = np.empty((b, 4, 3, 3))
        blocks[:, 0] = dw_dd[:, 0] @ d_left[:, 0]
        blocks[:, 1] = dw_dd[:, 0] @ d_right[:, 0] + dw_dd[:, 1] @ d_left[:, 1]
        blocks[:, 2] = dw_dd[:, 1] @ d_right[:, 1] + dw_dd[:, 2] @ d_left[:, 2]
        blocks[:, 3] = dw_dd[:, 2] @ d_right[:, 2]
        out["omega"] = blocks
    return out


def eval_rotation(spline: So3Spline, t) -> np.ndarray:
    ev = so3_eval(spline, t)
    r = ev.r
    return r[0] if np.asarray(t).ndim == 0 else r


def eval_body_angular_velocity(spline: So3Spline, t) -> np.ndarray:
    ev = so3_eval(spline, t)
    w = ev.omega
    return w[0] if np.asarray(t).ndim == 0 else w


def eval_body_angular_accel(spline: So3Spline, t) -> np.ndarray:
    ev = so3_eval(spline, t, with_accel=True)
    dw = ev.domega
    return dw[0] if np.asarray(t).ndim == 0 else dw


def eval_rotation_rate(spline: So3Spline, t) -> np.ndarray:
    """dR/dt = R(t) hat(omega(t))."""
    ev = so3_eval(spline, t)
    rdot = ev.r @ hat(ev.omega)
    return rdot[0] if np.asarray(t).ndim == 0 else rdot


def jac_rotation_wrt_ctrl(spline: So3Spline, t) -> np.ndarray:
    """3 x 12 right-perturbation Jacobian of R(t) w.r.t. the 4 control points."""
    ev = so3_eval(spline, t)
    blocks = so3_ctrl_jacobians(spline, ev, want_omega=False)["r"][0]
    return np.concatenate(list(blocks), axis=1)


def jac_body_omega_wrt_ctrl(spline: So3Spline, t) -> np.ndarray:
    """3 x 12 Jacobian of body omega(t) w.r.t. the 4 rotation control points."""
    ev = so3_eval(spline, t)
    blocks = so3_ctrl_jacobians(spline, ev, want_r=False)["omega"][0]
    return np.concatenate(list(blocks), axis=1)


def jac_world_accel_wrt_ctrl(spline: R3Spline, t) -> np.ndarray:
    """3 x 12 Jacobian of world acceleration w.r.t. the 4 position control points."""
    return jac_position_wrt_ctrl(spline, t, order=2)


def constant_r3(grid: KnotGrid, p: np.ndarray) -> R3Spline:
    return R3Spline(grid, np.tile(np.asarray(p, dtype=float), (grid.num_knots, 1)))


def constant_so3(grid: KnotGrid, r: np.ndarray) -> So3Spline:
    return So3Spline(grid, np.tile(np.asarray(r, dtype=float), (grid.num_knots, 1, 1)))
