"""IMU preintegration between two timestamps and the inertial residual."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .geometry import exp_so3, log_so3, right_jacobian, right_jacobian_inv, skew

log = logging.getLogger(__name__)

I3 = np.eye(3)


@dataclass(frozen=True)
class ImuBias:
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        a = np.asarray(self.accel, dtype=float).reshape(3)
        g = np.asarray(self.gyro, dtype=float).reshape(3)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(g))):
            raise ValueError("non-finite IMU bias")
        object.__setattr__(self, "accel", a)
        object.__setattr__(self, "gyro", g)

    @property
    def sane(self) -> bool:
        return bool(np.linalg.norm(self.accel) < 2.0 and np.linalg.norm(self.gyro) < 0.5)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.accel, self.gyro])


@dataclass
class State:
    """Robot (IMU body) state in the world frame."""

    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias: ImuBias = field(default_factory=ImuBias)
    stamp: float = 0.0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(3)
        self.theta = np.asarray(self.theta, dtype=float).reshape(3)
        self.v = np.asarray(self.v, dtype=float).reshape(3)

    @property
    def R(self) -> np.ndarray:
        return exp_so3(self.theta)

    def copy(self) -> "State":
        return State(self.p.copy(), self.theta.copy(), self.v.copy(), self.bias, self.stamp)


@dataclass
class NoiseParams:
    accel_density: float = 2e-3
    gyro_density: float = 2e-4
    accel_bias_walk: float = 1e-4
    gyro_bias_walk: float = 1e-5

    @classmethod
    def from_calib(cls, noise) -> "NoiseParams":
        return cls(noise.accel_density, noise.gyro_density, noise.accel_bias_walk, noise.gyro_bias_walk)


@dataclass
class Preintegration:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    dt_total: float
    covariance: np.ndarray
    J_bias: np.ndarray
    linearization_bias: ImuBias
    noise: NoiseParams = field(default_factory=NoiseParams)
    t0: float = 0.0
    t1: float = 0.0
    _sqrt_info: np.ndarray | None = field(default=None, repr=False)

    @property
    def J_alpha(self) -> np.ndarray:
        return self.J_bias[0:3]

    @property
    def J_beta(self) -> np.ndarray:
        return self.J_bias[3:6]

    @property
    def J_gamma(self) -> np.ndarray:
        return self.J_bias[6:9]

    def full_covariance(self) -> np.ndarray:
        C = np.zeros((15, 15))
        C[:9, :9] = self.covariance
        C[9:12, 9:12] = I3 * self.noise.accel_bias_walk ** 2 * self.dt_total
        C[12:15, 12:15] = I3 * self.noise.gyro_bias_walk ** 2 * self.dt_total
        return 0.5 * (C + C.T) + 1e-12 * np.eye(15)

    def sqrt_info(self) -> np.ndarray:
        """Upper-triangular U with U^T U = inverse(full covariance)."""
        if self._sqrt_info is None:
            L = np.linalg.cholesky(self.full_covariance())
            Linv = scipy.linalg.solve_triangular(L, np.eye(15), lower=True)
            # U = L^-1 gives U^T U = C^-1; keep it lower-triangular, it is only used internally
            self._sqrt_info = Linv
        return self._sqrt_info


def integrate(samples, bias: ImuBias | None = None, noise: NoiseParams | None = None) -> Preintegration:
    """Midpoint propagation of the increments, covariance and bias Jacobians."""
    from .dataio import ImuStream

    s = ImuStream.from_samples(samples)
    bias = bias or ImuBias()
    noise = noise or NoiseParams()
    if len(s) < 2:
        raise ValueError("integration needs at least two samples")
    dts = np.diff(s.stamps)
    if np.any(dts <= 0):
        raise ValueError("IMU stamps must be strictly increasing")

    acc = s.accel - bias.accel
    gyr = s.gyro - bias.gyro
    alpha = np.zeros(3)
    beta = np.zeros(3)
    gamma = np.eye(3)
    cov = np.zeros((9, 9))
    J_th = np.zeros((3, 6))
    J_a = np.zeros((3, 6))
    J_b = np.zeros((3, 6))
    Eb = np.hstack([I3, np.zeros((3, 3))])
    Eg = np.hstack([np.zeros((3, 3)), I3])
    sa2 = noise.accel_density ** 2
    sg2 = noise.gyro_density ** 2

    for i, dt in enumerate(dts):
        w = 0.5 * (gyr[i] + gyr[i + 1])
        phi = w * dt
        dR = exp_so3(phi)
        Jr = right_jacobian(phi)
        g1 = gamma @ dR
        a0 = gamma @ acc[i]
        a1 = g1 @ acc[i + 1]
        amid = 0.5 * (a0 + a1)

        da0 = -gamma @ skew(acc[i]) @ J_th - gamma @ Eb
        J_th1 = dR.T @ J_th - Jr * dt @ Eg
        da1 = -g1 @ skew(acc[i + 1]) @ J_th1 - g1 @ Eb
        J_a = J_a + J_b * dt + 0.25 * dt * dt * (da0 + da1)
        J_b = J_b + 0.5 * dt * (da0 + da1)

        # error-state covariance, first order in dt
        F = np.eye(9)
        gm = 0.5 * (gamma + g1)
        ask = skew(0.5 * (acc[i] + acc[i + 1]))
        F[0:3, 3:6] = I3 * dt
        F[0:3, 6:9] = -0.5 * gm @ ask * dt * dt
        F[3:6, 6:9] = -gm @ ask * dt
        F[6:9, 6:9] = dR.T
        G = np.zeros((9, 6))
        G[0:3, 0:3] = 0.5 * gm * dt * dt
        G[3:6, 0:3] = gm * dt
        G[6:9, 3:6] = Jr * dt
        Q = np.diag([sa2 / dt] * 3 + [sg2 / dt] * 3)
        cov = F @ cov @ F.T + G @ Q @ G.T

        alpha = alpha + beta * dt + 0.5 * amid * dt * dt
        beta = beta + amid * dt
        gamma = g1
        J_th = J_th1

    J = np.vstack([J_a, J_b, J_th])
    return Preintegration(alpha, beta, gamma, float(s.stamps[-1] - s.stamps[0]), 0.5 * (cov + cov.T), J,
                          bias, noise, float(s.stamps[0]), float(s.stamps[-1]))


def compose(p01: Preintegration, p12: Preintegration) -> Preintegration:
    """Chain two consecutive windows integrated with the same bias."""
    a = p01.alpha + p01.beta * p12.dt_total + p01.gamma @ p12.alpha
    b = p01.beta + p01.gamma @ p12.beta
    g = p01.gamma @ p12.gamma
    F = np.eye(9)
    F[0:3, 3:6] = I3 * p12.dt_total
    F[0:3, 6:9] = -p01.gamma @ skew(p12.alpha)
    F[3:6, 6:9] = -p01.gamma @ skew(p12.beta)
    F[6:9, 6:9] = p12.gamma.T
    G = np.zeros((9, 9))
    G[0:3, 0:3] = p01.gamma
    G[3:6, 3:6] = p01.gamma
    G[6:9, 6:9] = I3
    cov = F @ p01.covariance @ F.T + G @ p12.covariance @ G.T
    J = np.zeros((9, 6))
    J[0:3] = F[0:3] @ p01.J_bias + p01.gamma @ p12.J_alpha
    J[3:6] = F[3:6] @ p01.J_bias + p01.gamma @ p12.J_beta
    J[6:9] = p12.gamma.T @ p01.J_gamma + p12.J_gamma
    return Preintegration(a, b, g, p01.dt_total + p12.dt_total, 0.5 * (cov + cov.T), J,
                          p01.linearization_bias, p01.noise, p01.t0, p12.t1)


def _corrected(pre: Preintegration, ba: np.ndarray, bg: np.ndarray):
    db = np.concatenate([ba - pre.linearization_bias.accel, bg - pre.linearization_bias.gyro])
    alpha = pre.alpha + pre.J_alpha @ db
    beta = pre.beta + pre.J_beta @ db
    phi = pre.J_gamma @ db
    gamma = pre.gamma @ exp_so3(phi)
    return alpha, beta, gamma, phi


def correct_for_bias(pre: Preintegration, new_bias: ImuBias) -> Preintegration:
    """First-order bias update without re-integration."""
    db = new_bias.as_vector() - pre.linearization_bias.as_vector()
    if np.linalg.norm(db) > 0.1:
        log.warning("bias correction of %.3f is outside the first-order regime", np.linalg.norm(db))
    alpha, beta, gamma, _ = _corrected(pre, new_bias.accel, new_bias.gyro)
    return Preintegration(alpha, beta, gamma, pre.dt_total, pre.covariance.copy(), pre.J_bias.copy(),
                          new_bias, pre.noise, pre.t0, pre.t1)


def imu_residual_raw(p0, th0, v0, ba0, bg0, p1, th1, v1, ba1, bg1, pre: Preintegration, g: np.ndarray,
                     with_jac: bool = True):
    """Unwhitened 15-row residual and Jacobians w.r.t. the ten state blocks.

    ``g`` is the gravity acceleration vector in the world frame, e.g.
    (0, 0, -9.81).  Row order: position, velocity, rotation, accel bias,
    gyro bias.
    """
    dt = pre.dt_total
    R0 = exp_so3(th0)
    R1 = exp_so3(th1)
    alpha, beta, gamma, phi = _corrected(pre, ba0, bg0)
    up = R0.T @ (p1 - p0 - v0 * dt - 0.5 * g * dt * dt)
    uv = R0.T @ (v1 - v0 - g * dt)
    E = gamma.T @ R0.T @ R1
    rth = log_so3(E, check=False)
    r = np.concatenate([up - alpha, uv - beta, rth, ba1 - ba0, bg1 - bg0])
    if not with_jac:
        return r, None
    Z = np.zeros((15, 3))
    J = [Z.copy() for _ in range(10)]
    Jri = right_jacobian_inv(rth)
    # position row
    J[0][0:3] = -R0.T
    J[1][0:3] = skew(up)
    J[2][0:3] = -R0.T * dt
    J[3][0:3] = -pre.J_alpha[:, 0:3]
    J[4][0:3] = -pre.J_alpha[:, 3:6]
    J[5][0:3] = R0.T
    # velocity row
    J[1][3:6] = skew(uv)
    J[2][3:6] = -R0.T
    J[3][3:6] = -pre.J_beta[:, 0:3]
    J[4][3:6] = -pre.J_beta[:, 3:6]
    J[7][3:6] = R0.T
    # rotation row
    J[1][6:9] = -Jri @ R1.T @ R0
    J[6][6:9] = Jri
    J[4][6:9] = -Jri @ E.T @ right_jacobian(phi) @ pre.J_gamma[:, 3:6]
    # bias rows
    J[3][9:12] = -I3
    J[8][9:12] = I3
    J[4][12:15] = -I3
    J[9][12:15] = I3
    return r, J


def imu_residual(state_k: State, state_k1: State, pre: Preintegration, g) -> np.ndarray:
    """Whitened 15-vector inertial residual between two states."""
    gap = state_k1.stamp - state_k.stamp
    if abs(gap - pre.dt_total) > 1e-6:
        raise ValueError(f"state gap {gap} does not match preintegration span {pre.dt_total}")
    r, _ = imu_residual_raw(state_k.p, state_k.theta, state_k.v, state_k.bias.accel, state_k.bias.gyro,
                            state_k1.p, state_k1.theta, state_k1.v, state_k1.bias.accel, state_k1.bias.gyro,
                            pre, np.asarray(g, dtype=float), with_jac=False)
    return pre.sqrt_info() @ r


def make_imu_block_fn(pre: Preintegration, g):
    """Callback for a solver block over slots (p0, th0, v0, ba0, bg0, p1, th1, v1, ba1, bg1)."""
    g = np.asarray(g, dtype=float)
    W = pre.sqrt_info()

    def fn(*vals):
        r, J = imu_residual_raw(*vals, pre=pre, g=g)
        WJ = W @ np.hstack(J)
        return W @ r, [WJ[:, 3 * k:3 * k + 3] for k in range(10)]

    return fn


def gravity_from_accel(mean_accel, magnitude: float) -> np.ndarray:
    """Gravity acceleration vector in the body frame from a static accelerometer mean."""
    a = np.asarray(mean_accel, dtype=float)
    n = np.linalg.norm(a)
    if n == 0:
        raise ValueError("zero accelerometer mean")
    return -a / n * magnitude


def rotation_aligning(a, b) -> np.ndarray:
    """Smallest rotation R with R @ unit(a) = unit(b)."""
    a = np.asarray(a, dtype=float) / np.linalg.norm(a)
    b = np.asarray(b, dtype=float) / np.linalg.norm(b)
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(a @ b)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        perp = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.cross(a, [0.0, 1.0, 0.0])
        return exp_so3(perp / np.linalg.norm(perp) * math.pi)
    return exp_so3(axis / s * math.atan2(s, c))
