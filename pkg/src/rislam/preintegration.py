"""On-manifold IMU preintegration.

Many IMU samples between two frames are condensed into relative rotation,
velocity, and position increments with a 9x9 covariance (rotation, velocity,
position order) and Jacobians w.r.t. the gyro/accel biases, so a later bias
update only needs a first-order correction instead of re-integration.

Integration uses midpoint averaging of consecutive samples. The bias
Jacobians are the exact first-order derivatives of that discrete recursion,
which is what makes the re-integration cross-checks tight.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import ImuData
from .geometry import (
    Pose3,
    Rot3,
    skew,
    so3_exp_matrix,
    so3_log_matrix,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)
from .state import NavState


@dataclass(frozen=True)
class ImuBias:
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        for name in ("gyro", "accel"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite {name} bias")
            object.__setattr__(self, name, v)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])


@dataclass(frozen=True)
class ImuNoise:
    gyro_density: float = 2e-3  # rad/s/sqrt(Hz)
    accel_density: float = 2e-2  # m/s^2/sqrt(Hz)
    gyro_walk: float = 1e-5  # (rad/s)/sqrt(s)
    accel_walk: float = 1e-4  # (m/s^2)/sqrt(s)


@dataclass(frozen=True)
class PreintegratedImu:
    delta_R: Rot3
    delta_v: np.ndarray
    delta_p: np.ndarray
    dt: float
    covariance: np.ndarray  # 9x9, (rotation, velocity, position)
    bias_jacobian: np.ndarray  # 9x6, d(dR, dv, dp) / d(bg, ba)
    bias: ImuBias  # linearization point
    noise: ImuNoise

    @property
    def d_R_d_bg(self) -> np.ndarray:
        return self.bias_jacobian[0:3, 0:3]

    @property
    def d_v_d_bg(self) -> np.ndarray:
        return self.bias_jacobian[3:6, 0:3]

    @property
    def d_v_d_ba(self) -> np.ndarray:
        return self.bias_jacobian[3:6, 3:6]

    @property
    def d_p_d_bg(self) -> np.ndarray:
        return self.bias_jacobian[6:9, 0:3]

    @property
    def d_p_d_ba(self) -> np.ndarray:
        return self.bias_jacobian[6:9, 3:6]


def integrate(
    times: np.ndarray,
    gyro: np.ndarray,
    accel: np.ndarray,
    bias: ImuBias,
    noise: ImuNoise,
) -> PreintegratedImu:
    """Preintegrate a sample window (arrays of shape (N,), (N,3), (N,3))."""
    times = np.asarray(times, dtype=float)
    if len(times) < 2:
        raise ValueError("need at least two IMU samples to integrate")
    dts = np.diff(times)
    if np.any(dts <= 0):
        raise ValueError("IMU timestamps must be strictly increasing")
    total = float(times[-1] - times[0])
    if total > 1.0:
        warnings.warn(f"preintegration window of {total:.2f} s is unusually long")

    R = Rot3.identity()
    v = np.zeros(3)
    p = np.zeros(3)
    P = np.zeros((9, 9))
    J = np.zeros((9, 6))
    I3 = np.eye(3)

    for k in range(len(times) - 1):
        dt = float(dts[k])
        w = 0.5 * (gyro[k] + gyro[k + 1]) - bias.gyro
        f0 = accel[k] - bias.accel
        f1 = accel[k + 1] - bias.accel

        Rk = R.matrix()
        step = Rot3.exp(w * dt)
        R_next = R.compose(step)
        Rk1 = R_next.matrix()
        a = 0.5 * (Rk @ f0 + Rk1 @ f1)

        E = step.matrix().T  # transports rotation errors across the step
        Jr = so3_right_jacobian(w * dt)
        F = -0.5 * (Rk @ skew(f0) + Rk1 @ skew(f1) @ E)

        # error-state transition (rotation, velocity, position)
        A = np.zeros((9, 9))
        A[0:3, 0:3] = E
        A[3:6, 0:3] = F * dt
        A[3:6, 3:6] = I3
        A[6:9, 0:3] = 0.5 * F * dt * dt
        A[6:9, 3:6] = I3 * dt
        A[6:9, 6:9] = I3

        # noise gains (gyro, accel)
        B = np.zeros((9, 6))
        B[0:3, 0:3] = Jr * dt
        B[3:6, 3:6] = 0.5 * (Rk + Rk1) * dt
        B[6:9, 3:6] = 0.25 * (Rk + Rk1) * dt * dt

        Q = np.zeros((6, 6))
        Q[0:3, 0:3] = (noise.gyro_density**2 / dt) * I3
        Q[3:6, 3:6] = (noise.accel_density**2 / dt) * I3

        P = A @ P @ A.T + B @ Q @ B.T

        # exact first-order bias sensitivities of this discrete recursion
        D_R = J[0:3, 0:3]
        dA_bg = -0.5 * (Rk @ skew(f0) @ D_R + Rk1 @ skew(f1) @ (E @ D_R - Jr * dt))
        dA_ba = -0.5 * (Rk + Rk1)
        J_new = J.copy()
        J_new[0:3, 0:3] = E @ D_R - Jr * dt
        J_new[3:6, 0:3] = J[3:6, 0:3] + dA_bg * dt
        J_new[3:6, 3:6] = J[3:6, 3:6] + dA_ba * dt
        J_new[6:9, 0:3] = J[6:9, 0:3] + J[3:6, 0:3] * dt + 0.5 * dA_bg * dt * dt
        J_new[6:9, 3:6] = J[6:9, 3:6] + J[3:6, 3:6] * dt + 0.5 * dA_ba * dt * dt
        J = J_new

        p = p + v * dt + 0.5 * a * dt * dt
        v = v + a * dt
        R = R_next

    P = 0.5 * (P + P.T)
    return PreintegratedImu(R, v, p, total, P, J, bias, noise)


def integrate_window(window, bias: ImuBias, noise: ImuNoise) -> PreintegratedImu:
    """Convenience overload for dataset ImuWindow slices."""
    return integrate(window.times, window.gyro, window.accel, bias, noise)


def bias_corrected(
    preint: PreintegratedImu, new_bias: ImuBias
) -> tuple[Rot3, np.ndarray, np.ndarray]:
    """First-order corrected (dR, dv, dp) at a bias away from linearization."""
    db = new_bias.as_vector() - preint.bias.as_vector()
    if np.linalg.norm(db) > 0.1:
        warnings.warn("bias moved far from the preintegration linearization point")
    dbg, dba = db[:3], db[3:]
    dR = preint.delta_R.compose(Rot3.exp(preint.d_R_d_bg @ dbg))
    dv = preint.delta_v + preint.d_v_d_bg @ dbg + preint.d_v_d_ba @ dba
    dp = preint.delta_p + preint.d_p_d_bg @ dbg + preint.d_p_d_ba @ dba
    return dR, dv, dp


def predict(state: NavState, preint: PreintegratedImu, gravity: np.ndarray) -> NavState:
    """Propagate a state through the preintegrated increments."""
    gravity = np.asarray(gravity, dtype=float)
    dR, dv, dp = bias_corrected(preint, ImuBias(state.gyro_bias, state.accel_bias))
    R_i = state.pose.rotation
    dt = preint.dt
    R_j = R_i.compose(dR)
    v_j = state.velocity + gravity * dt + R_i.rotate(dv)
    p_j = (
        state.pose.translation
        + state.velocity * dt
        + 0.5 * gravity * dt * dt
        + R_i.rotate(dp)
    )
    return NavState(Pose3(R_j, p_j), v_j, state.gyro_bias, state.accel_bias)


def residual(
    preint: PreintegratedImu,
    state_i: NavState,
    state_j: NavState,
    gravity: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """15-vector residual and its Jacobians w.r.t. both states.

    Residual order: (rotation, velocity, position, gyro-bias walk,
    accel-bias walk). State tangent order: (theta, position, velocity,
    gyro bias, accel bias); rotation perturbs on the right, translation
    additively.
    """
    gravity = np.asarray(gravity, dtype=float)
    dt = preint.dt
    dbg = state_i.gyro_bias - preint.bias.gyro
    dba = state_i.accel_bias - preint.bias.accel

    # raw rotation matrices throughout: this runs in the hot loop of the
    # sliding-window solver and quaternion wrappers cost more than the math
    corr = preint.d_R_d_bg @ dbg
    dR_hat = preint.delta_R.matrix() @ so3_exp_matrix(corr)
    dv_hat = preint.delta_v + preint.d_v_d_bg @ dbg + preint.d_v_d_ba @ dba
    dp_hat = preint.delta_p + preint.d_p_d_bg @ dbg + preint.d_p_d_ba @ dba

    Ri_T = state_i.pose.rotation.matrix().T
    Mj = state_j.pose.rotation.matrix()

    M = dR_hat.T @ (Ri_T @ Mj)
    r_R = so3_log_matrix(M)
    u = state_j.velocity - state_i.velocity - gravity * dt
    r_v = Ri_T @ u - dv_hat
    w = (
        state_j.pose.translation
        - state_i.pose.translation
        - state_i.velocity * dt
        - 0.5 * gravity * dt * dt
    )
    r_p = Ri_T @ w - dp_hat
    r_bg = state_j.gyro_bias - state_i.gyro_bias
    r_ba = state_j.accel_bias - state_i.accel_bias
    r = np.concatenate([r_R, r_v, r_p, r_bg, r_ba])

    Jr_inv = so3_right_jacobian_inv(r_R)
    Rji = Mj.T @ Ri_T.T
    I3 = np.eye(3)

    Ji = np.zeros((15, 15))
    Jj = np.zeros((15, 15))
    # rotation rows
    Ji[0:3, 0:3] = -Jr_inv @ Rji
    Ji[0:3, 9:12] = -Jr_inv @ M.T @ so3_right_jacobian(corr) @ preint.d_R_d_bg
    Jj[0:3, 0:3] = Jr_inv
    # velocity rows
    Ji[3:6, 0:3] = skew(Ri_T @ u)
    Ji[3:6, 6:9] = -Ri_T
    Ji[3:6, 9:12] = -preint.d_v_d_bg
    Ji[3:6, 12:15] = -preint.d_v_d_ba
    Jj[3:6, 6:9] = Ri_T
    # position rows
    Ji[6:9, 0:3] = skew(Ri_T @ w)
    Ji[6:9, 3:6] = -Ri_T
    Ji[6:9, 6:9] = -Ri_T * dt
    Ji[6:9, 9:12] = -preint.d_p_d_bg
    Ji[6:9, 12:15] = -preint.d_p_d_ba
    Jj[6:9, 3:6] = Ri_T
    # bias random-walk rows
    Ji[9:12, 9:12] = -I3
    Ji[12:15, 12:15] = -I3
    Jj[9:12, 9:12] = I3
    Jj[12:15, 12:15] = I3
    return r, Ji, Jj


def edge_information(preint: PreintegratedImu) -> np.ndarray:
    """15x15 information whitening the residual: preintegration block plus
    the bias random-walk block over the window length."""
    info = np.zeros((15, 15))
    cov9 = preint.covariance + np.eye(9) * 1e-12
    info[0:9, 0:9] = np.linalg.inv(cov9)
    dt = max(preint.dt, 1e-6)
    info[9:12, 9:12] = np.eye(3) / (preint.noise.gyro_walk**2 * dt)
    info[12:15, 12:15] = np.eye(3) / (preint.noise.accel_walk**2 * dt)
    return info


def initialize_from_imu(
    imu: ImuData, gravity: float, duration: float = 0.5
) -> NavState:
    """Bootstrap attitude and gyro bias from a quasi-static opening stretch.

    Roll/pitch come from the mean accelerometer direction, yaw is set to 0,
    gyro bias to the mean angular rate; position and velocity start at 0.
    """
    t_end = imu.times[0] + duration
    mask = imu.times <= t_end
    if mask.sum() < 2:
        mask = np.ones(len(imu.times), dtype=bool)
    mean_f = imu.accel[mask].mean(axis=0)
    mean_w = imu.gyro[mask].mean(axis=0)
    norm_f = np.linalg.norm(mean_f)
    if norm_f < 0.5 * gravity:
        warnings.warn("accelerometer mean far from gravity; attitude init unreliable")
    f_hat = mean_f / norm_f if norm_f > 0 else np.array([0.0, 0.0, 1.0])
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(f_hat, z)
    s = np.linalg.norm(axis)
    c = float(f_hat @ z)
    if s < 1e-12:
        R = Rot3.identity() if c > 0 else Rot3.exp(np.array([math.pi, 0.0, 0.0]))
    else:
        R = Rot3.exp(axis / s * math.atan2(s, c))
    return NavState(Pose3(R, np.zeros(3)), np.zeros(3), mean_w, np.zeros(3))
