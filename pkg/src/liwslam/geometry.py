"""Rotation-vector SO(3) algebra and rigid transforms in 2D/3D.

Rotations are carried as rotation vectors (axis * angle) and converted to
matrices on demand.  Poses are small immutable value objects; every
operation returns a new object.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_SMALL_ANGLE = 1e-8


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    x, y, z = a.tolist()
    if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
        raise ValueError(f"non-finite vector: {a}")
    return a


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3).tolist()
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(v) -> np.ndarray:
    """Rodrigues' formula with a Taylor fallback near the identity."""
    x, y, z = _as_vec3(v).tolist()
    theta2 = x * x + y * y + z * z
    if theta2 < _SMALL_ANGLE ** 2:
        a, b = 1.0, 0.5
    else:
        theta = math.sqrt(theta2)
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    # I + a K + b K^2 with K^2 = w w^T - theta^2 I
    return np.array([
        [1.0 - b * (y * y + z * z), b * x * y - a * z, b * x * z + a * y],
        [b * x * y + a * z, 1.0 - b * (x * x + z * z), b * y * z - a * x],
        [b * x * z - a * y, b * y * z + a * x, 1.0 - b * (x * x + y * y)],
    ])


def canonical_rotvec(v) -> np.ndarray:
    """Map a rotation vector to the equivalent one with norm in [0, pi]."""
    w = _as_vec3(v)
    theta = float(np.linalg.norm(w))
    if theta <= math.pi:
        return w
    axis = w / theta
    theta = math.fmod(theta, 2.0 * math.pi)
    if theta > math.pi:
        theta -= 2.0 * math.pi
    if theta < 0.0:
        axis, theta = -axis, -theta
    return axis * theta


def log_so3(R, check: bool = True) -> np.ndarray:
    """Inverse of :func:`exp_so3`, returning the canonical rotation vector."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not math.isfinite(float(np.abs(R).sum())):
        raise ValueError("log_so3 expects a finite 3x3 matrix")
    if check:
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err > 1e-6 or np.linalg.det(R) < 0.0:
            raise ValueError(f"matrix is not a rotation (orthonormality error {err:.3g})")
    (r00, r01, r02), (r10, r11, r12), (r20, r21, r22) = R.tolist()
    cos_t = min(1.0, max(-1.0, 0.5 * (r00 + r11 + r22 - 1.0)))
    vx, vy, vz = 0.5 * (r21 - r12), 0.5 * (r02 - r20), 0.5 * (r10 - r01)
    sin_t = math.sqrt(vx * vx + vy * vy + vz * vz)
    theta = math.atan2(sin_t, cos_t)
    if theta < _SMALL_ANGLE:
        f = 1.0 + theta * theta / 6.0
        return np.array([vx * f, vy * f, vz * f])
    if math.pi - theta > 1e-3:
        f = theta / sin_t
        return np.array([vx * f, vy * f, vz * f])
    vee = np.array([vx, vy, vz])
    # near pi: axis from the symmetric part, sign from the antisymmetric part
    S = 0.5 * (R + R.T) - cos_t * np.eye(3)
    k = int(np.argmax(np.diag(S)))
    axis = S[:, k] / math.sqrt(max(S[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ vee < 0.0:
        axis = -axis
    return canonical_rotvec(axis * theta)


def right_jacobian(v) -> np.ndarray:
    """Right Jacobian of SO(3): exp(v + d) ~= exp(v) exp(Jr(v) d)."""
    w = np.asarray(v, dtype=float).reshape(3)
    theta2 = float(w @ w)
    K = skew(w)
    if theta2 < 1e-10:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    theta = math.sqrt(theta2)
    return (np.eye(3) - (1.0 - math.cos(theta)) / theta2 * K
            + (theta - math.sin(theta)) / (theta2 * theta) * (K @ K))


def right_jacobian_inv(v) -> np.ndarray:
    w = np.asarray(v, dtype=float).reshape(3)
    theta2 = float(w @ w)
    K = skew(w)
    if theta2 < 1e-10:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    theta = math.sqrt(theta2)
    coef = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + coef * (K @ K)


def boxplus_rotvec(theta, delta) -> np.ndarray:
    """Right-perturbation retraction used by the solver for rotation slots."""
    return log_so3(exp_so3(theta) @ exp_so3(delta), check=False)


def wrap_angle(a):
    """Wrap to (-pi, pi]; works on scalars and arrays."""
    if isinstance(a, (float, int)):
        w = math.fmod(a + math.pi, 2.0 * math.pi)
        if w < 0.0:
            w += 2.0 * math.pi
        w -= math.pi
        return math.pi if w == -math.pi else w
    w = np.mod(np.asarray(a, dtype=float) + math.pi, 2.0 * math.pi) - math.pi
    w = np.where(w == -math.pi, math.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def rot2(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def rotz(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose3:
    """Rigid transform ``x -> R(rotation) x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_vec3(self.rotation))
        object.__setattr__(self, "translation", _as_vec3(self.translation))

    @classmethod
    def identity(cls) -> "Pose3":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose3":
        T = np.asarray(T, dtype=float)
        return cls(log_so3(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t) -> "Pose3":
        return cls(log_so3(R), t)

    @property
    def R(self) -> np.ndarray:
        return exp_so3(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def apply(self, pts) -> np.ndarray:
        """Transform points given as (3,) or (N, 3)."""
        pts = np.asarray(pts, dtype=float)
        return pts @ self.R.T + self.translation

    def to_pose2(self) -> "Pose2":
        R = self.R
        return Pose2(math.atan2(R[1, 0], R[0, 0]), self.translation[:2])

    def __matmul__(self, other: "Pose3") -> "Pose3":
        return compose(self, other)


@dataclass(frozen=True)
class Pose2:
    """Planar rigid transform with yaw wrapped to (-pi, pi]."""

    yaw: float = 0.0
    xy: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=float).reshape(2)
        if not (np.all(np.isfinite(xy)) and math.isfinite(self.yaw)):
            raise ValueError("non-finite Pose2")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls()

    @classmethod
    def from_xyyaw(cls, x: float, y: float, yaw: float) -> "Pose2":
        return cls(yaw, (x, y))

    @property
    def R(self) -> np.ndarray:
        return rot2(self.yaw)

    def as_array(self) -> np.ndarray:
        return np.array([self.xy[0], self.xy[1], self.yaw])

    def matrix(self) -> np.ndarray:
        T = np.eye(3)
        T[:2, :2] = self.R
        T[:2, 2] = self.xy
        return T

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts @ self.R.T + self.xy

    def compose(self, other: "Pose2") -> "Pose2":
        return Pose2(self.yaw + other.yaw, self.xy + self.R @ other.xy)

    def inverse(self) -> "Pose2":
        return Pose2(-self.yaw, -(self.R.T @ self.xy))

    def to_pose3(self, z: float = 0.0) -> Pose3:
        return Pose3((0.0, 0.0, self.yaw), (self.xy[0], self.xy[1], z))

    def __matmul__(self, other: "Pose2") -> "Pose2":
        return self.compose(other)


def compose(a: Pose3, b: Pose3) -> Pose3:
    Ra = a.R
    return Pose3(log_so3(Ra @ b.R, check=False), a.translation + Ra @ b.translation)


def inverse(a: Pose3) -> Pose3:
    Rt = a.R.T
    return Pose3(-a.rotation, -(Rt @ a.translation))


def between(a: Pose3, b: Pose3) -> Pose3:
    """``inverse(a) @ b``."""
    return compose(inverse(a), b)


def interpolate(a: Pose3, b: Pose3, s: float) -> Pose3:
    """Linear translation and geodesic rotation interpolation, s in [0, 1]."""
    Ra = a.R
    d = log_so3(Ra.T @ b.R, check=False)
    R = Ra @ exp_so3(s * d)
    return Pose3(log_so3(R, check=False), (1.0 - s) * a.translation + s * b.translation)
