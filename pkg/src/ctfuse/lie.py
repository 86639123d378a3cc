"""SO(3) primitives: exponential/logarithm maps, skew operator, right Jacobian.

Rotations are plain (3, 3) orthonormal numpy arrays with det +1. Every
function broadcasts over leading axes, so a stack of rotation vectors with
shape (N, 3) maps to rotations of shape (N, 3, 3) in one call.

Conventions:
  - Exp/Log use rotation vectors (axis * angle, radians).
  - Right Jacobian J_r satisfies Exp(phi + d) ~= Exp(phi) Exp(J_r(phi) d).
  - Log returns the principal value, ||Log(R)|| <= pi. At exactly pi the
    sign ambiguity is resolved by making the last nonzero component of the
    result non-negative.
"""

from __future__ import annotations

import numpy as np

# Below this angle all per-angle coefficients switch to Taylor series whose
# truncation error is < 1e-14 at the switch point.
_SMALL_ANGLE = 1e-7


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of v, so that hat(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of hat for skew-symmetric m (uses the lower triangle)."""
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _angle_coeffs(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rodrigues coefficients (sin t / t, (1 - cos t) / t^2) with Taylor fallback."""
    t2 = theta * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    return a, b


def exp_so3(phi: np.ndarray) -> np.ndarray:
    """Rotation matrix Exp(phi) for rotation vector(s) phi."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    a, b = _angle_coeffs(theta)
    k = hat(phi)
    k2 = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * k2


def log_so3(r: np.ndarray) -> np.ndarray:
    """Principal rotation vector Log(R); ||result|| <= pi."""
    r = np.asarray(r, dtype=float)
    single = r.ndim == 2
    rs = r.reshape((-1, 3, 3))
    tr = np.clip((rs[:, 0, 0] + rs[:, 1, 1] + rs[:, 2, 2] - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(tr)
    out = np.empty((rs.shape[0], 3))

    near_pi = theta > np.pi - 1e-2
    main = ~near_pi
    if np.any(main):
        th = theta[main]
        t2 = th * th
        # theta / (2 sin theta) with its small-angle series
        small = th < _SMALL_ANGLE
        safe = np.where(small, 1.0, th)
        scale = np.where(small, 0.5 + t2 / 12.0, safe / (2.0 * np.sin(safe)))
        out[main] = scale[:, None] * vee(rs[main] - np.swapaxes(rs[main], -1, -2))
    if np.any(near_pi):
        out[near_pi] = _log_near_pi(rs[near_pi], theta[near_pi])
    return out[0] if single else out.reshape(r.shape[:-2] + (3,))


def _log_near_pi(rs: np.ndarray, theta: np.ndarray) -> np.ndarray:
    # Quaternion extraction keyed on the largest diagonal entry is stable
    # where sin(theta) vanishes.
    q = quat_from_rot(rs)
    qw = q[:, 0]
    qv = q[:, 1:]
    nv = np.linalg.norm(qv, axis=-1)
    nv_safe = np.where(nv < 1e-30, 1.0, nv)
    angle = 2.0 * np.arctan2(nv, qw)
    phi = (angle / nv_safe)[:, None] * qv
    # Exactly at pi both signs represent the same rotation; pick the one whose
    # last nonzero component is non-negative so results are reproducible.
    at_pi = np.abs(qw) < 1e-12
    for i in np.nonzero(at_pi)[0]:
        v = phi[i]
        nz = np.nonzero(np.abs(v) > 1e-12)[0]
        if nz.size and v[nz[-1]] < 0:
            phi[i] = -v
    return phi


def quat_from_rot(r: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (w, x, y, z) with w >= 0, via Shepperd's method."""
    r = np.asarray(r, dtype=float)
    single = r.ndim == 2
    m = r.reshape((-1, 3, 3))
    n = m.shape[0]
    q = np.empty((n, 4))
    tr = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    # choice index 0 -> trace, 1..3 -> diagonal element k-1 largest
    cand = np.stack([tr, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1)
    choice = np.argmax(cand, axis=1)
    for c in range(4):
        idx = np.nonzero(choice == c)[0]
        if not idx.size:
            continue
        mm = m[idx]
        if c == 0:
            s = np.sqrt(tr[idx] + 1.0) * 2.0
            q[idx, 0] = 0.25 * s
            q[idx, 1] = (mm[:, 2, 1] - mm[:, 1, 2]) / s
            q[idx, 2] = (mm[:, 0, 2] - mm[:, 2, 0]) / s
            q[idx, 3] = (mm[:, 1, 0] - mm[:, 0, 1]) / s
        else:
            i, j, k = c - 1, c % 3, (c + 1) % 3
            s = np.sqrt(1.0 + mm[:, i, i] - mm[:, j, j] - mm[:, k, k]) * 2.0
            q[idx, 0] = (mm[:, k, j] - mm[:, j, k]) / s
            q[idx, 1 + i] = 0.25 * s
            q[idx, 1 + j] = (mm[:, j, i] + mm[:, i, j]) / s
            q[idx, 1 + k] = (mm[:, k, i] + mm[:, i, k]) / s
    flip = q[:, 0] < 0
    q[flip] = -q[flip]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q[0] if single else q.reshape(r.shape[:-2] + (4,))


def rot_from_quat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from quaternion(s) (w, x, y, z); normalizes input."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    """J_r(phi): Exp(phi + d) ~= Exp(phi) Exp(J_r(phi) d) to first order."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    t2 = theta * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    c1 = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    c2 = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - np.sin(safe)) / (safe ** 3))
    k = hat(phi)
    k2 = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye - c1[..., None, None] * k + c2[..., None, None] * k2


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse of J_r(phi), with series fallback near zero and a pi guard."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    t2 = theta * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    sin_t = np.sin(safe)
    # (1 + cos t) / (2 t sin t) degenerates to 0/0 at t = pi; the limit is 0.
    degen = np.abs(sin_t) < 1e-12
    sin_safe = np.where(degen, 1.0, sin_t)
    frac = np.where(degen, 0.0, (1.0 + np.cos(safe)) / (2.0 * safe * sin_safe))
    c = np.where(small, 1.0 / 12.0 + t2 / 720.0, 1.0 / (safe * safe) - frac)
    k = hat(phi)
    k2 = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + 0.5 * k + c[..., None, None] * k2


def project_so3(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (Frobenius) via SVD; fixes drift after long chains."""
    r = np.asarray(r, dtype=float)
    u, _, vt = np.linalg.svd(r)
    d = np.linalg.det(u @ vt)
    u = u.copy()
    u[..., :, 2] *= np.sign(d)[..., None]
    return u @ vt


def align_z_to(v: np.ndarray) -> np.ndarray:
    """Minimal rotation R with R @ e_z parallel to unit vector v."""
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    ez = np.array([0.0, 0.0, 1.0])
    axis = np.cross(ez, v)
    s = np.linalg.norm(axis)
    c = float(np.dot(ez, v))
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # antiparallel: rotate pi about x
        return exp_so3(np.array([np.pi, 0.0, 0.0]))
    angle = np.arctan2(s, c)
    return exp_so3(axis / s * angle)
