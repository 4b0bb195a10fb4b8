"""Rigid-body math kernel: SO(3)/SE(3) representations, exponential and
logarithm maps, ZYX Euler conventions, and calibration error metrics.

All values are immutable after construction and every operation is a pure
function, so the kernel is safe to use from concurrent workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AngleNearPi

# Below this angle (rad) closed-form coefficients switch to their series.
_SMALL_ANGLE = 1e-4
# log is refused for rotations within this margin of pi.
NEAR_PI_MARGIN = 1e-6

_ORTHO_TOL = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    """Map a 3-vector to the skew-symmetric matrix with skew(v) @ w = v x w."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def _vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform: 3x3 rotation plus translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=float).reshape(3)
        err = np.linalg.norm(rot.T @ rot - np.eye(3))
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (|R'R - I| = {err:.3e})")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class Twist:
    """se(3) element, ordered (rotation, translation) to match the Jacobian
    block layout used throughout the optimizers."""

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rot", np.asarray(self.rot, dtype=float).reshape(3))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=float).reshape(3))

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rot, self.trans])


@dataclass(frozen=True)
class EulerZYX:
    """Tait-Bryan angles, rotation built as Rz(yaw) @ Ry(pitch) @ Rx(roll)."""

    roll: float
    pitch: float
    yaw: float


def _rot_coeffs(theta: float) -> tuple[float, float, float]:
    """Rodrigues coefficients A = sin(t)/t, B = (1-cos t)/t^2, C = (t-sin t)/t^3."""
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / (theta * theta)
        c = (theta - math.sin(theta)) / (theta ** 3)
    return a, b, c


def exp_so3(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    a, b, _ = _rot_coeffs(theta)
    k = skew(omega)
    return np.eye(3) + a * k + b * (k @ k)


def log_so3(rot: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix; raises AngleNearPi near pi."""
    rot = np.asarray(rot, dtype=float)
    cos_theta = min(1.0, max(-1.0, (np.trace(rot) - 1.0) / 2.0))
    theta = math.acos(cos_theta)
    if theta >= math.pi - NEAR_PI_MARGIN:
        raise AngleNearPi(f"rotation angle {theta:.9f} within {NEAR_PI_MARGIN} of pi")
    w = _vee(rot - rot.T) / 2.0  # = sin(theta) * axis
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        return w * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)
    if theta > 2.9:
        # sin(theta)-based extraction loses precision near pi; recover the
        # axis from the symmetric part instead.
        one_minus_c = 1.0 - cos_theta
        diag = np.clip((np.diag(rot) - cos_theta) / one_minus_c, 0.0, None)
        k = int(np.argmax(diag))
        axis = np.zeros(3)
        axis[k] = math.sqrt(diag[k])
        for j in range(3):
            if j != k:
                axis[j] = (rot[k, j] + rot[j, k]) / (2.0 * one_minus_c * axis[k])
        axis /= np.linalg.norm(axis)
        if np.dot(axis, w) < 0.0:
            axis = -axis
        return theta * axis
    return w * (theta / math.sin(theta))


def exp_se3(xi: Twist | np.ndarray) -> Pose:
    """Matrix exponential of a twist; Rodrigues rotation, V-matrix translation."""
    vec = xi.as_vector() if isinstance(xi, Twist) else np.asarray(xi, dtype=float).reshape(6)
    omega, rho = vec[:3], vec[3:]
    theta = float(np.linalg.norm(omega))
    a, b, c = _rot_coeffs(theta)
    k = skew(omega)
    k2 = k @ k
    rot = np.eye(3) + a * k + b * k2
    v = np.eye(3) + b * k + c * k2
    return Pose(rot, v @ rho)


def log_se3(p: Pose) -> Twist:
    """Inverse of exp_se3; raises AngleNearPi for rotations within 1e-6 of pi."""
    omega = log_so3(p.rotation)
    theta = float(np.linalg.norm(omega))
    k = skew(omega)
    k2 = k @ k
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        a, b, _ = _rot_coeffs(theta)
        d = (1.0 - a / (2.0 * b)) / (theta * theta)
    v_inv = np.eye(3) - 0.5 * k + d * k2
    return Twist(omega, v_inv @ p.translation)


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def apply(a: Pose, p: np.ndarray) -> np.ndarray:
    """Transform a point (3,) or point array (N, 3)."""
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return a.rotation @ p + a.translation
    return p @ a.rotation.T + a.translation


def _elementary(axis: int, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    m = np.eye(3)
    i, j = [(1, 2), (0, 2), (0, 1)][axis]
    m[i, i] = c
    m[j, j] = c
    m[i, j] = -s if axis != 1 else s
    m[j, i] = s if axis != 1 else -s
    return m


def rot_x(angle: float) -> np.ndarray:
    return _elementary(0, angle)


def rot_y(angle: float) -> np.ndarray:
    return _elementary(1, angle)


def rot_z(angle: float) -> np.ndarray:
    return _elementary(2, angle)


def euler_zyx_to_pose(e: EulerZYX, t: np.ndarray = (0.0, 0.0, 0.0)) -> Pose:
    """Pose with rotation Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    rot = rot_z(e.yaw) @ rot_y(e.pitch) @ rot_x(e.roll)
    return Pose(rot, np.asarray(t, dtype=float))


def pose_to_euler_zyx(p: Pose) -> tuple[EulerZYX, bool]:
    """Extract ZYX angles; second value flags gimbal lock (|pitch| ~ pi/2).

    At gimbal lock only yaw+roll (or yaw-roll) is observable; roll is then
    reported as 0 and yaw carries the combined angle.
    """
    r = p.rotation
    sp = min(1.0, max(-1.0, -r[2, 0]))
    pitch = math.asin(sp)
    locked = abs(abs(pitch) - math.pi / 2.0) <= 1e-9
    if locked:
        roll = 0.0
        yaw = math.atan2(-r[0, 1], r[1, 1])
    else:
        roll = math.atan2(r[2, 1], r[2, 2])
        yaw = math.atan2(r[1, 0], r[0, 0])
    return EulerZYX(roll, pitch, yaw), locked


def translation_error(est: Pose, gt: Pose) -> float:
    """Euclidean distance between the two translations (meters)."""
    return float(np.linalg.norm(est.translation - gt.translation))


def rotation_error(est: Pose, gt: Pose) -> float:
    """Angle of the relative rotation, arccos((trace(Rgt' Rest) - 1) / 2).

    The arccos argument is clamped to [-1, 1] because a floating-point trace
    can exceed the bounds by ~1e-16.
    """
    arg = (np.trace(gt.rotation.T @ est.rotation) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, arg)))


def rot_to_quat(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw), scalar last, qw >= 0."""
    rot = np.asarray(rot, dtype=float)
    tr = np.trace(rot)
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        qw = 0.25 * s
        qx = (rot[2, 1] - rot[1, 2]) / s
        qy = (rot[0, 2] - rot[2, 0]) / s
        qz = (rot[1, 0] - rot[0, 1]) / s
    elif rot[0, 0] > rot[1, 1] and rot[0, 0] > rot[2, 2]:
        s = math.sqrt(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2]) * 2.0
        qw = (rot[2, 1] - rot[1, 2]) / s
        qx = 0.25 * s
        qy = (rot[0, 1] + rot[1, 0]) / s
        qz = (rot[0, 2] + rot[2, 0]) / s
    elif rot[1, 1] > rot[2, 2]:
        s = math.sqrt(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2]) * 2.0
        qw = (rot[0, 2] - rot[2, 0]) / s
        qx = (rot[0, 1] + rot[1, 0]) / s
        qy = 0.25 * s
        qz = (rot[1, 2] + rot[2, 1]) / s
    else:
        s = math.sqrt(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1]) * 2.0
        qw = (rot[1, 0] - rot[0, 1]) / s
        qx = (rot[0, 2] + rot[2, 0]) / s
        qy = (rot[1, 2] + rot[2, 1]) / s
        qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    q /= np.linalg.norm(q)
    if q[3] < 0.0:
        q = -q
    return q


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a scalar-last quaternion (normalized first)."""
    q = np.asarray(q, dtype=float).reshape(4)
    x, y, z, w = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def exp_se3_scaled(xi: Twist | np.ndarray, scales: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (R, t) of exp(s_k * xi) for an array of scale factors.

    Returns rotations (K, 3, 3) and translations (K, 3). This is the kernel
    behind constant-twist pose interpolation: deskewing and the scan
    simulator both rely on it.

    For phi = s * |omega| the translation reduces to
        t(s) = s*rho + ((1-cos phi)/|omega|) (a x rho)
                     + ((phi - sin phi)/|omega|) (a x (a x rho)),
    with series fallbacks for small |phi|.
    """
    vec = xi.as_vector() if isinstance(xi, Twist) else np.asarray(xi, dtype=float).reshape(6)
    scales = np.asarray(scales, dtype=float).reshape(-1)
    omega, rho = vec[:3], vec[3:]
    theta1 = float(np.linalg.norm(omega))
    n = scales.shape[0]
    if theta1 < 1e-14:
        rots = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
        return rots, np.outer(scales, rho)
    axis = omega / theta1
    k = skew(axis)
    k2 = k @ k
    phi = scales * theta1
    sin_p = np.sin(phi)
    cos_p = np.cos(phi)
    small = np.abs(phi) < _SMALL_ANGLE
    p2 = phi * phi
    one_minus_cos = np.where(small, p2 / 2.0 - p2 * p2 / 24.0, 1.0 - cos_p)
    phi_minus_sin = np.where(small, p2 * phi / 6.0 - p2 * p2 * phi / 120.0, phi - sin_p)
    rots = (np.eye(3)[None, :, :]
            + sin_p[:, None, None] * k[None, :, :]
            + one_minus_cos[:, None, None] * k2[None, :, :])
    ax_rho = np.cross(axis, rho)
    ax_ax_rho = np.cross(axis, ax_rho)
    trans = (scales[:, None] * rho[None, :]
             + (one_minus_cos / theta1)[:, None] * ax_rho[None, :]
             + (phi_minus_sin / theta1)[:, None] * ax_ax_rho[None, :])
    return rots, trans


def interpolate_pose(start: Pose, end: Pose, fraction: float) -> Pose:
    """Constant-twist interpolation start * exp(fraction * log(start^-1 end))."""
    xi = log_se3(compose(inverse(start), end))
    step = exp_se3(Twist(xi.rot * fraction, xi.trans * fraction))
    return compose(start, step)
