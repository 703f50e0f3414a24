"""Rigid-body algebra: quaternions, SE(3) exp/log, camera intrinsics, pose errors.

Conventions
-----------
* Quaternions are stored ``(w, x, y, z)``.
* A :class:`Pose` maps camera coordinates to world coordinates,
  ``p_world = R @ p_cam + t``.
* Twists are 6-vectors ``[rho, phi]`` (translation part first).
* Increments are applied on the left, ``exp(xi) @ T``, i.e. in the world frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

SMALL_ANGLE = 1e-6
LOG_ANGLE_LIMIT = math.pi - 1e-6


class DomainError(ValueError):
    """Raised when an operation is requested outside its domain."""


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Skew matrices for an ``(n, 3)`` array, shape ``(n, 3, 3)``."""
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=v.dtype)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# ---------------------------------------------------------------- quaternions


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise DomainError(f"cannot normalize quaternion {q}")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the representative with ``w >= 0``."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return canonical_quat(q)


def canonical_quat(q: np.ndarray) -> np.ndarray:
    """Pick the antipodal representative with non-negative ``w``."""
    q = np.asarray(q, dtype=np.float64)
    return -q if q[0] < 0 else q


def axis_angle_quat(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


# ------------------------------------------------------------------------ SO3


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = math.sin(theta) / theta
    b = (1 - math.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def so3_log(R: np.ndarray) -> np.ndarray:
    cos_theta = np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)
    theta = math.acos(cos_theta)
    if theta >= LOG_ANGLE_LIMIT:
        raise DomainError(f"rotation angle {theta:.9f} too close to pi for log")
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < SMALL_ANGLE:
        return 0.5 * w
    return theta / (2 * math.sin(theta)) * w


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        + (1 - math.cos(theta)) / theta**2 * K
        + (theta - math.sin(theta)) / theta**3 * K @ K
    )


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    half = theta / 2
    coef = (1 - half * math.cos(half) / math.sin(half)) / theta**2
    return np.eye(3) - 0.5 * K + coef * K @ K


# ---------------------------------------------------------------------- types


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform stored as unit quaternion + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t.copy())

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray) -> Pose:
        return cls(matrix_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.translation
        return m

    def compose(self, other: Pose) -> Pose:
        """``self @ other``."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.R @ other.translation + self.translation
        return Pose(q, t)

    __matmul__ = compose

    def inverse(self) -> Pose:
        w, x, y, z = self.rotation
        q_inv = np.array([w, -x, -y, -z])
        return Pose(q_inv, -(quat_to_matrix(q_inv) @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.translation

    def canonical(self) -> Pose:
        return Pose(canonical_quat(self.rotation), self.translation)

    def to_vector(self) -> np.ndarray:
        """``[tx, ty, tz, qw, qx, qy, qz]``."""
        return np.concatenate([self.translation, self.rotation])

    @classmethod
    def from_vector(cls, v: Iterable[float]) -> Pose:
        v = np.asarray(list(v), dtype=np.float64)
        if v.shape != (7,):
            raise ValueError(f"pose vector must have 7 entries, got {v.shape}")
        return cls(v[3:], v[:3])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> CameraIntrinsics:
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)

    def scaled(self, width: int, height: int) -> CameraIntrinsics:
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height)


# ------------------------------------------------------------------------ SE3


def se3_exp(xi: np.ndarray) -> Pose:
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[:3], xi[3:]
    R = so3_exp(phi)
    t = so3_left_jacobian(phi) @ rho
    return Pose.from_matrix(R, t)


def se3_log(pose: Pose) -> np.ndarray:
    phi = so3_log(pose.R)
    rho = so3_left_jacobian_inv(phi) @ pose.translation
    return np.concatenate([rho, phi])


def apply_increment(xi: np.ndarray, base: Pose) -> Pose:
    """World-frame increment ``exp(xi) @ base``."""
    return se3_exp(xi) @ base


def _se3_q_block(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    P = skew(rho)
    F = skew(phi)
    if theta < SMALL_ANGLE:
        return 0.5 * P + (F @ P + P @ F + F @ P @ F) / 6.0
    t2, t3, t4, t5 = theta**2, theta**3, theta**4, theta**5
    s, c = math.sin(theta), math.cos(theta)
    a = (theta - s) / t3
    b = (t2 + 2 * c - 2) / (2 * t4)
    d = (2 * theta - 3 * s + theta * c) / (2 * t5)
    return (
        0.5 * P
        + a * (F @ P + P @ F + F @ P @ F)
        + b * (F @ F @ P + P @ F @ F - 3 * F @ P @ F)
        + d * (F @ P @ F @ F + F @ F @ P @ F)
    )


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """6x6 left Jacobian: ``exp(xi + e) ~= exp(J @ e) @ exp(xi)``."""
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[:3], xi[3:]
    J = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[:3, 3:] = _se3_q_block(rho, phi)
    return out


def point_jacobian_at_zero(p: np.ndarray) -> np.ndarray:
    """d(exp(xi) p)/d xi at xi = 0: ``[I | -skew(p)]``."""
    out = np.zeros((3, 6))
    out[:, :3] = np.eye(3)
    out[:, 3:] = -skew(np.asarray(p, dtype=np.float64))
    return out


# --------------------------------------------------------------------- errors


def rotation_angle_deg(q: np.ndarray) -> float:
    q = quat_normalize(q)
    return math.degrees(2 * math.atan2(np.linalg.norm(q[1:]), abs(q[0])))


def pose_errors(estimate: Pose, truth: Pose) -> tuple[float, float]:
    """(translation distance, geodesic rotation angle in degrees)."""
    dt = float(np.linalg.norm(estimate.translation - truth.translation))
    w, x, y, z = estimate.rotation
    rel = quat_multiply(np.array([w, -x, -y, -z]), truth.rotation)
    # atan2 keeps precision near zero; abs(w) makes q and -q equivalent
    angle = math.degrees(2 * math.atan2(np.linalg.norm(rel[1:]), abs(rel[0])))
    return dt, angle


def perturb_pose(pose: Pose, translation: float, angle_deg: float, rng: np.random.Generator) -> Pose:
    """Offset a pose by a fixed distance and angle along random directions.

    The rotation is applied about the camera centre so the two perturbations
    stay independent.
    """
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    axis = rng.normal(size=3)
    q_delta = axis_angle_quat(axis, math.radians(angle_deg))
    q = quat_multiply(q_delta, pose.rotation)
    return Pose(q, pose.translation + translation * direction)


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera looking along its +z axis at ``target``; image y points down."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=1)
    return Pose.from_matrix(R, eye)


# ------------------------------------------------------------- serialization


def format_pose(pose: Pose) -> str:
    return " ".join(f"{v:.17g}" for v in pose.to_vector())


def parse_pose(line: str) -> Pose:
    parts = line.split()
    if len(parts) != 7:
        raise ValueError(f"expected 7 values, got {len(parts)}")
    return Pose.from_vector(float(p) for p in parts)


def write_poses(path, poses: Iterable[Pose], header: str | None = None) -> None:
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for p in poses:
            fh.write(format_pose(p) + "\n")


def read_poses(path) -> list[Pose]:
    poses = []
    with open(path) as fh:
        for line in fh:
            if line.strip() and not line.startswith("#"):
                poses.append(parse_pose(line))
    return poses
