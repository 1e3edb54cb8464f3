"""Rigid-body math on SE(3)/SO(3), pinhole cameras, and projection Jacobians.

Conventions used throughout the package:
  - Pose maps world points into the camera frame: p_cam = R @ p_world + t.
  - Rotations are stored as unit quaternions (w, x, y, z).
  - Twists are 6-vectors (v, w) in se(3); perturbations are applied on the
    left, pose' = exp_se3(tau) * pose, and every Jacobian/gradient in this
    package is taken with respect to that left perturbation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Below this rotation angle, exp/log switch to their Taylor expansions.
SMALL_ANGLE = 1e-8


class LogMapSingularityError(ValueError):
    """Raised by log_se3 when the rotation angle is at or near pi."""


class BehindCameraError(ValueError):
    """Raised when a point projects at or behind the near plane."""


def _skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric (hat) matrix of a 3-vector."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a 3x3 rotation matrix (Shepperd's method)."""
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0:
        s = 0.5 / math.sqrt(trace + 1.0)
        q = np.array([0.25 / s, (R[2, 1] - R[1, 2]) * s,
                      (R[0, 2] - R[2, 0]) * s, (R[1, 0] - R[0, 1]) * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


def quat_from_axis_angle(w: np.ndarray) -> np.ndarray:
    """Unit quaternion for the rotation vector w (angle = |w|)."""
    theta = np.linalg.norm(w)
    if theta < SMALL_ANGLE:
        # sin(t/2)/t = 1/2 - t^2/48 + O(t^4)
        s = 0.5 - theta * theta / 48.0
        q = np.array([1.0 - theta * theta / 8.0, s * w[0], s * w[1], s * w[2]])
    else:
        half = 0.5 * theta
        s = math.sin(half) / theta
        q = np.array([math.cos(half), s * w[0], s * w[1], s * w[2]])
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform: p_cam = R(rotation) @ p_world + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError(f"invalid quaternion {q!r}")
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform world points (..., 3) into the camera frame."""
        R = self.rotation_matrix()
        return np.asarray(points) @ R.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self @ other)(p) = self(other(p))."""
        q = quat_multiply(self.rotation, other.rotation)
        t = quat_to_matrix(self.rotation) @ other.translation + self.translation
        return Pose(q, t)

    def invert(self) -> "Pose":
        qc = quat_conjugate(self.rotation)
        return Pose(qc, -(quat_to_matrix(qc) @ self.translation))

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates, -R^T t."""
        return -(self.rotation_matrix().T @ self.translation)

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 world-to-camera matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class Twist:
    """se(3) tangent coordinates: v translational (m), w rotational (rad)."""

    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).reshape(3))

    @classmethod
    def from_array(cls, a: np.ndarray) -> "Twist":
        a = np.asarray(a, dtype=float).reshape(6)
        return cls(a[:3], a[3:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.v, self.w])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; pixel (ix, iy) samples the continuous point (ix, iy)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    z_near: float = 0.01
    z_far: float = 1000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.z_near < self.z_far):
            raise ValueError("need 0 < z_near < z_far")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")


def exp_se3(tau: Twist) -> Pose:
    """Closed-form exponential map se(3) -> SE(3)."""
    w, v = tau.w, tau.v
    theta = np.linalg.norm(w)
    K = _skew(w)
    K2 = K @ K
    if theta < SMALL_ANGLE:
        # V = I + K/2 + K^2/6 + O(theta^3)
        V = np.eye(3) + 0.5 * K + K2 / 6.0
    else:
        t2 = theta * theta
        V = (np.eye(3)
             + ((1.0 - math.cos(theta)) / t2) * K
             + ((theta - math.sin(theta)) / (t2 * theta)) * K2)
    return Pose(quat_from_axis_angle(w), V @ v)


def log_se3(p: Pose) -> Twist:
    """Inverse of exp_se3 on the principal domain (rotation angle < pi)."""
    q = p.rotation if p.rotation[0] >= 0 else -p.rotation
    sin_half = np.linalg.norm(q[1:])
    theta = 2.0 * math.atan2(sin_half, q[0])
    if theta >= math.pi - 1e-6:
        raise LogMapSingularityError("log-map singularity: rotation angle at or near pi")
    if sin_half < 0.5 * SMALL_ANGLE:
        w = 2.0 * q[1:]
    else:
        w = (theta / sin_half) * q[1:]
    K = _skew(w)
    K2 = K @ K
    if theta < SMALL_ANGLE:
        Vinv = np.eye(3) - 0.5 * K + K2 / 12.0
    else:
        beta = (1.0 / (theta * theta)
                - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta)))
        Vinv = np.eye(3) - 0.5 * K + beta * K2
    return Twist(Vinv @ p.translation, w)


def project(point_world: np.ndarray, pose: Pose, k: CameraIntrinsics) -> tuple[np.ndarray, float]:
    """Pinhole projection of one world point; returns (pixel, depth).

    Raises BehindCameraError when the point is at or behind the near plane;
    bulk rendering paths cull by mask instead of calling this.
    """
    p = pose.apply(np.asarray(point_world, dtype=float))
    x, y, z = p
    if z <= k.z_near:
        raise BehindCameraError(f"behind-camera: depth {z:.6g} <= z_near {k.z_near:.6g}")
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy]), float(z)


def projection_jacobian(point_world: np.ndarray, pose: Pose, k: CameraIntrinsics) -> np.ndarray:
    """2x6 derivative of the projected pixel w.r.t. a left twist perturbation.

    Rows are (u, v); columns are (v1, v2, v3, w1, w2, w3). Under
    pose' = exp_se3(eps * tau) * pose the camera-frame point moves as
    dp = eps * (w x p_cam + v), so d(pixel)/d(tau) = J_pinhole @ [I | -skew(p_cam)].
    """
    p = pose.apply(np.asarray(point_world, dtype=float))
    x, y, z = p
    if z <= k.z_near:
        raise BehindCameraError(f"behind-camera: depth {z:.6g} <= z_near {k.z_near:.6g}")
    J_pin = np.array([
        [k.fx / z, 0.0, -k.fx * x / (z * z)],
        [0.0, k.fy / z, -k.fy * y / (z * z)],
    ])
    dp_dtau = np.hstack([np.eye(3), -_skew(p)])
    return J_pin @ dp_dtau


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose with the camera at eye looking at target.

    Camera axes: x right, y down, z forward (so v grows downward in the
    image). ``up`` must not be parallel to the view direction.
    """
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=float))
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise ValueError("view direction parallel to up vector")
    right /= n
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Pose(matrix_to_quat(R), -(R @ eye))


def rotation_geodesic_deg(a: Pose, b: Pose) -> float:
    """Angle of the relative rotation between two poses, in [0, 180] degrees."""
    q_rel = quat_multiply(a.rotation, quat_conjugate(b.rotation))
    angle = 2.0 * math.atan2(np.linalg.norm(q_rel[1:]), abs(q_rel[0]))
    return math.degrees(angle)
