"""Rigid-body geometry on SO(3)/SE(3).

Rotations are stored as unit quaternions (w, x, y, z) with w >= 0 so that
every rotation has a single canonical representative. Tangent vectors are
ordered rotation-first: a 6-vector is (rx, ry, rz, tx, ty, tz).

All types are immutable values and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

# Below this rotation angle (rad) exp/log switch to their Taylor expansions.
SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp_matrix(phi: np.ndarray) -> np.ndarray:
    """Rotation matrix of a rotation vector (Rodrigues)."""
    angle = float(np.linalg.norm(phi))
    K = skew(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    s, c = math.sin(angle), math.cos(angle)
    return np.eye(3) + (s / angle) * K + ((1.0 - c) / angle**2) * (K @ K)


def so3_log_matrix(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix; angle in [0, pi]."""
    return Rot3.from_matrix(R).log()


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): d Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)."""
    angle = float(np.linalg.norm(phi))
    K = skew(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        - ((1.0 - math.cos(angle)) / a2) * K
        + ((angle - math.sin(angle)) / (a2 * angle)) * (K @ K)
    )


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse of the right Jacobian of SO(3)."""
    angle = float(np.linalg.norm(phi))
    K = skew(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    a2 = angle * angle
    coeff = 1.0 / a2 - (1.0 + math.cos(angle)) / (2.0 * angle * math.sin(angle))
    return np.eye(3) + 0.5 * K + coeff * (K @ K)


def _left_v_matrix(phi: np.ndarray) -> np.ndarray:
    # V(phi) such that exp((phi, rho)).translation == V(phi) @ rho
    angle = float(np.linalg.norm(phi))
    K = skew(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        + ((1.0 - math.cos(angle)) / a2) * K
        + ((angle - math.sin(angle)) / (a2 * angle)) * (K @ K)
    )


def _left_v_inv_matrix(phi: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(phi))
    K = skew(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    a2 = angle * angle
    coeff = (1.0 - 0.5 * angle * math.sin(angle) / (1.0 - math.cos(angle))) / a2
    return np.eye(3) - 0.5 * K + coeff * (K @ K)


@dataclass(frozen=True)
class Rot3:
    """Rotation as a unit quaternion (w, x, y, z), canonicalized to w >= 0."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=float)
        if q.shape != (4,):
            raise ValueError("quaternion must have shape (4,)")
        if not np.all(np.isfinite(q)):
            raise ValueError("non-finite quaternion")
        n = float(np.linalg.norm(q))
        if n == 0.0:
            raise ValueError("zero quaternion")
        q = q / n
        if q[0] < 0.0:
            q = -q
        object.__setattr__(self, "q", q)

    @staticmethod
    def identity() -> "Rot3":
        return Rot3()

    @staticmethod
    def exp(phi: np.ndarray) -> "Rot3":
        """Rotation of a rotation vector (axis * angle)."""
        phi = np.asarray(phi, dtype=float)
        angle = float(np.linalg.norm(phi))
        if angle < SMALL_ANGLE:
            # sin(a/2)/a ~ 1/2 - a^2/48
            s = 0.5 - angle * angle / 48.0
            w = math.cos(0.5 * angle)
        else:
            s = math.sin(0.5 * angle) / angle
            w = math.cos(0.5 * angle)
        return Rot3(np.array([w, s * phi[0], s * phi[1], s * phi[2]]))

    @staticmethod
    def from_matrix(R: np.ndarray) -> "Rot3":
        """Quaternion from a 3x3 rotation matrix (Shepperd's method)."""
        R = np.asarray(R, dtype=float)
        t = np.trace(R)
        if t > 0.0:
            s = math.sqrt(t + 1.0) * 2.0
            w = 0.25 * s
            x = (R[2, 1] - R[1, 2]) / s
            y = (R[0, 2] - R[2, 0]) / s
            z = (R[1, 0] - R[0, 1]) / s
        elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
            s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            w = (R[2, 1] - R[1, 2]) / s
            x = 0.25 * s
            y = (R[0, 1] + R[1, 0]) / s
            z = (R[0, 2] + R[2, 0]) / s
        elif R[1, 1] >= R[2, 2]:
            s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
            w = (R[0, 2] - R[2, 0]) / s
            x = (R[0, 1] + R[1, 0]) / s
            y = 0.25 * s
            z = (R[1, 2] + R[2, 1]) / s
        else:
            s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
            w = (R[1, 0] - R[0, 1]) / s
            x = (R[0, 2] + R[2, 0]) / s
            y = (R[1, 2] + R[2, 1]) / s
            z = 0.25 * s
        return Rot3(np.array([w, x, y, z]))

    @staticmethod
    def rz(angle: float) -> "Rot3":
        return Rot3.exp(np.array([0.0, 0.0, angle]))

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def log(self) -> np.ndarray:
        """Rotation vector; stable for any angle in [0, pi]."""
        w = self.q[0]
        v = self.q[1:]
        nv = float(np.linalg.norm(v))
        if nv < SMALL_ANGLE:
            scale = 2.0 / w - 2.0 * nv * nv / (3.0 * w**3)
        else:
            scale = 2.0 * math.atan2(nv, w) / nv
        return scale * v

    def compose(self, other: "Rot3") -> "Rot3":
        w1, x1, y1, z1 = self.q
        w2, x2, y2, z2 = other.q
        return Rot3(
            np.array(
                [
                    w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                    w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                    w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                    w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
                ]
            )
        )

    def inverse(self) -> "Rot3":
        w, x, y, z = self.q
        return Rot3(np.array([w, -x, -y, -z]))

    def rotate(self, v: np.ndarray) -> np.ndarray:
        """Rotate one vector (3,) or a stack of vectors (N, 3)."""
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            return self.matrix() @ v
        return v @ self.matrix().T

    def angle(self) -> float:
        return float(np.linalg.norm(self.log()))

    def angle_to(self, other: "Rot3") -> float:
        return self.inverse().compose(other).angle()

    def __matmul__(self, other: "Rot3") -> "Rot3":
        return self.compose(other)


@dataclass(frozen=True)
class Twist6:
    """Tangent-space element of SE(3): rotational part (rad), translational part (m)."""

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "rot", np.asarray(self.rot, dtype=float).reshape(3))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=float).reshape(3))

    @staticmethod
    def from_vector(xi: np.ndarray) -> "Twist6":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return Twist6(xi[:3], xi[3:])

    @staticmethod
    def zero() -> "Twist6":
        return Twist6(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rot, self.trans])


@dataclass(frozen=True)
class Pose3:
    """Rigid transform: rotation then translation, p_out = R p_in + t."""

    rotation: Rot3 = field(default_factory=Rot3)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("non-finite translation")
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose3":
        return Pose3()

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose3":
        T = np.asarray(T, dtype=float)
        return Pose3(Rot3.from_matrix(T[:3, :3]), T[:3, 3])

    @staticmethod
    def exp(xi: "Twist6 | np.ndarray") -> "Pose3":
        """SE(3) exponential: xi = (rot, trans) tangent coordinates."""
        if isinstance(xi, Twist6):
            phi, rho = xi.rot, xi.trans
        else:
            xi = np.asarray(xi, dtype=float).reshape(6)
            phi, rho = xi[:3], xi[3:]
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(rho))):
            raise ValueError("non-finite twist")
        return Pose3(Rot3.exp(phi), _left_v_matrix(phi) @ rho)

    def log(self) -> Twist6:
        """SE(3) logarithm; requires rotation angle < pi."""
        phi = self.rotation.log()
        rho = _left_v_inv_matrix(phi) @ self.translation
        return Twist6(phi, rho)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix()
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose3") -> "Pose3":
        return Pose3(
            self.rotation.compose(other.rotation),
            self.rotation.rotate(other.translation) + self.translation,
        )

    def inverse(self) -> "Pose3":
        rinv = self.rotation.inverse()
        return Pose3(rinv, -rinv.rotate(self.translation))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to one point (3,) or a stack (N, 3)."""
        return self.rotation.rotate(points) + self.translation

    def __matmul__(self, other: "Pose3") -> "Pose3":
        return self.compose(other)


class Interpolated(NamedTuple):
    pose: Pose3
    extrapolated: bool


def compose(a: Pose3, b: Pose3) -> Pose3:
    return a.compose(b)


def inverse(a: Pose3) -> Pose3:
    return a.inverse()


def exp(xi: "Twist6 | np.ndarray") -> Pose3:
    return Pose3.exp(xi)


def log(a: Pose3) -> Twist6:
    return a.log()


def interpolate(a: Pose3, b: Pose3, alpha: float) -> Interpolated:
    """Geodesic interpolation a * exp(alpha * log(a^-1 b)).

    alpha outside [0, 1] extrapolates along the same geodesic; the result
    carries an ``extrapolated`` flag instead of raising.
    """
    delta = a.inverse().compose(b).log()
    xi = Twist6(alpha * delta.rot, alpha * delta.trans)
    return Interpolated(a.compose(Pose3.exp(xi)), not 0.0 <= alpha <= 1.0)


def pose_difference(a: Pose3, b: Pose3) -> Twist6:
    """Tangent coordinates of b relative to a: log(a^-1 b)."""
    return a.inverse().compose(b).log()
