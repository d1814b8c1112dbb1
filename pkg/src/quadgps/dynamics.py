"""Rigid-body quadrotor simulation with tangent-space linearization.

State layout, shape (..., 13):
    [0:3]   p   position, world frame, m
    [3:6]   v   linear velocity, world frame, m/s
    [6:10]  q   orientation quaternion, scalar first (w, x, y, z), body -> world
    [10:13] w   angular velocity, body frame, rad/s

Action layout, shape (..., 4): commanded rotor speeds, rad/s, clamped to
[0, max_rotor_speed] inside ``step``.

Local optimal control operates on a 12-dimensional tangent state
    [dp, dv, dtheta, dw]
where dtheta is a 3-parameter error rotation: x = from_tangent(ref, xi) applies
q = q_ref * exp(dtheta). Direct quaternion Jacobians would violate the unit
constraint, so all linearizations live in this chart.

Rotor geometry is an X configuration. With d = arm_length / sqrt(2):
    rotor 0: (+d, -d)  front right      rotor 1: (+d, +d)  front left
    rotor 2: (-d, +d)  back left        rotor 3: (-d, -d)  back right
Yaw reaction signs alternate (+, -, +, -) so equal speeds produce zero yaw
torque. "left" rotors are {1, 2} (y > 0), "right" rotors are {0, 3}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

STATE_DIM = 13
TANGENT_DIM = 12
ACTION_DIM = 4

POS = slice(0, 3)
VEL = slice(3, 6)
QUAT = slice(6, 10)
ANGVEL = slice(10, 13)

T_POS = slice(0, 3)
T_VEL = slice(3, 6)
T_ROT = slice(6, 9)
T_ANGVEL = slice(9, 12)

_COMPONENT_NAMES = (("position", POS), ("velocity", VEL),
                    ("quaternion", QUAT), ("angular velocity", ANGVEL))


class SimulationDiverged(RuntimeError):
    """Integration produced a non-finite state component."""


# ---------------------------------------------------------------------------
# Quaternion utilities (scalar-first, vectorized over leading axes)
# ---------------------------------------------------------------------------

def quat_multiply(a, b):
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = aw * bw - ax * bx - ay * by - az * bz
    out[..., 1] = aw * bx + ax * bw + ay * bz - az * by
    out[..., 2] = aw * by - ax * bz + ay * bw + az * bx
    out[..., 3] = aw * bz + ax * by - ay * bx + az * bw
    return out


def quat_conjugate(q):
    out = np.array(q, dtype=float, copy=True)
    out[..., 1:] = -out[..., 1:]
    return out


def quat_normalize(q):
    return q / np.sqrt(np.sum(q * q, axis=-1, keepdims=True))


def quat_rotate(q, v):
    """Rotate vectors v by quaternions q (body -> world for state quaternions)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    qw = q[..., 0]
    qx, qy, qz = q[..., 1], q[..., 2], q[..., 3]
    vx, vy, vz = v[..., 0], v[..., 1], v[..., 2]
    # t = 2 q_v x v, out = v + qw t + q_v x t
    tx = 2.0 * (qy * vz - qz * vy)
    ty = 2.0 * (qz * vx - qx * vz)
    tz = 2.0 * (qx * vy - qy * vx)
    out = np.empty(np.broadcast_shapes(q.shape[:-1], v.shape[:-1]) + (3,))
    out[..., 0] = vx + qw * tx + qy * tz - qz * ty
    out[..., 1] = vy + qw * ty + qz * tx - qx * tz
    out[..., 2] = vz + qw * tz + qx * ty - qy * tx
    return out


def quat_exp(phi):
    """Map rotation vectors (rad) to unit quaternions, q = exp(phi)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.sqrt(np.sum(phi * phi, axis=-1))
    half = 0.5 * angle
    small = angle < 1e-8
    # sin(a/2)/a, series for small angles
    factor = np.where(small, 0.5 - angle**2 / 48.0,
                      np.sin(half) / np.where(small, 1.0, angle))
    out = np.empty(phi.shape[:-1] + (4,))
    out[..., 0] = np.cos(half)
    out[..., 1:] = factor[..., None] * phi
    return out


def quat_log(q):
    """Inverse of quat_exp; returns the rotation vector of the shortest arc."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)
    vec = q[..., 1:]
    w = q[..., :1]
    n = np.sqrt(np.sum(vec * vec, axis=-1, keepdims=True))
    angle = 2.0 * np.arctan2(n, w)
    small = n < 1e-12
    factor = np.where(small, 2.0 / np.clip(w, 1e-12, None),
                      angle / np.where(small, 1.0, n))
    return factor * vec


# ---------------------------------------------------------------------------
# Parameters and model errors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VehicleParams:
    """Physical parameters. Defaults approximate a 1.5 kg, 0.47 m quad."""

    mass_kg: float = 1.5
    inertia_kgm2: tuple[float, float, float] = (0.0172, 0.0172, 0.0314)
    arm_length_m: float = 0.235
    # rotor coefficients sized so the hover command is ~39 rad/s; with the
    # flight-cost weights this keeps actuator-bias disturbances inside the
    # controllable envelope (the residual attitude offset needed to hold a
    # one-sided rotor bias scales with the hover command magnitude)
    thrust_coeff: float = 2.4e-3      # N / (rad/s)^2
    torque_coeff: float = 5.1e-5      # N*m / (rad/s)^2
    drag_coeff: float = 1.0           # N / (m/s), isotropic linear drag
    rotor_gains: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    gravity_mps2: float = 9.81
    max_rotor_speed: float = 118.0    # rad/s, about 3x hover for the defaults

    def __post_init__(self):
        if self.mass_kg <= 0.0:
            raise ValueError("mass_kg must be positive")
        if any(i <= 0.0 for i in self.inertia_kgm2):
            raise ValueError("inertia components must be positive")
        if self.thrust_coeff <= 0.0:
            raise ValueError("thrust_coeff must be positive")
        if any(g <= 0.0 for g in self.rotor_gains):
            raise ValueError("rotor_gains must be positive")
        if self.max_rotor_speed <= 0.0:
            raise ValueError("max_rotor_speed must be positive")


@dataclass(frozen=True)
class ModelErrorSpec:
    """Perturbation applied to the true plant while the controller keeps
    nominal parameters."""

    variant: str = "none"             # none | mass_offset | rotor_bias | parameter_rounding
    mass_offset_kg: float = 0.05
    bias_fraction: float = 0.08
    bias_side: str = "left"           # left | right | front | back

    def __post_init__(self):
        if self.variant not in ("none", "mass_offset", "rotor_bias", "parameter_rounding"):
            raise ValueError(f"unknown model error variant {self.variant!r}")
        if not -1.0 < self.bias_fraction < 1.0:
            raise ValueError("bias_fraction must lie in (-1, 1)")
        if self.bias_side not in _SIDE_ROTORS:
            raise ValueError(f"bias_side must be one of {tuple(_SIDE_ROTORS)}")


_SIDE_ROTORS = {"front": (0, 1), "back": (2, 3), "left": (1, 2),
                "right": (0, 3)}


def _round_one_sig(value):
    if value == 0.0:
        return 0.0
    exp = math.floor(math.log10(abs(value)))
    scale = 10.0 ** exp
    return round(value / scale) * scale


def apply_model_error(params: VehicleParams, spec: ModelErrorSpec) -> VehicleParams:
    """Return the TRUE plant parameters for a given error spec. Pure function;
    the input params are untouched and describe the controller's model."""
    if spec.variant == "none":
        return params
    if spec.variant == "mass_offset":
        new_mass = params.mass_kg + spec.mass_offset_kg
        if new_mass <= 0.0:
            raise ValueError("mass_offset would make mass non-positive")
        return replace(params, mass_kg=new_mass)
    if spec.variant == "rotor_bias":
        idx = _SIDE_ROTORS[spec.bias_side]
        gains = list(params.rotor_gains)
        for i in idx:
            gains[i] = gains[i] * (1.0 + spec.bias_fraction)
        return replace(params, rotor_gains=tuple(gains))
    # parameter_rounding: keep one significant digit of the secondary
    # parameters (inertia, geometry, rotor coefficients, drag); mass and
    # gravity stay exact.
    return replace(
        params,
        inertia_kgm2=tuple(_round_one_sig(i) for i in params.inertia_kgm2),
        arm_length_m=_round_one_sig(params.arm_length_m),
        thrust_coeff=_round_one_sig(params.thrust_coeff),
        torque_coeff=_round_one_sig(params.torque_coeff),
        drag_coeff=_round_one_sig(params.drag_coeff),
    )


def hover_controls(params: VehicleParams) -> np.ndarray:
    """Equal rotor speeds balancing gravity: 4 k u^2 = m g."""
    u = math.sqrt(params.mass_kg * params.gravity_mps2 / (4.0 * params.thrust_coeff))
    return np.full(ACTION_DIM, u)


@lru_cache(maxsize=64)
def _geometry(params: VehicleParams):
    d = params.arm_length_m / math.sqrt(2.0)
    rotor_x = np.array([d, d, -d, -d])
    rotor_y = np.array([-d, d, d, -d])
    yaw_sign = np.array([1.0, -1.0, 1.0, -1.0])
    gains = np.asarray(params.rotor_gains, dtype=float)
    inertia = np.asarray(params.inertia_kgm2, dtype=float)
    return rotor_x, rotor_y, yaw_sign, gains, inertia


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def _derivative(x, thrust_z, torque, params, inertia):
    out = np.empty_like(x)
    v = x[..., VEL]
    qw, qx, qy, qz = x[..., 6], x[..., 7], x[..., 8], x[..., 9]
    wx, wy, wz = x[..., 10], x[..., 11], x[..., 12]

    out[..., POS] = v
    # body-z thrust rotated to world: thrust * (third column of R(q))
    inv_m = 1.0 / params.mass_kg
    drag = params.drag_coeff
    out[..., 3] = (thrust_z * 2.0 * (qx * qz + qw * qy) - drag * v[..., 0]) * inv_m
    out[..., 4] = (thrust_z * 2.0 * (qy * qz - qw * qx) - drag * v[..., 1]) * inv_m
    out[..., 5] = (thrust_z * (1.0 - 2.0 * (qx * qx + qy * qy))
                   - drag * v[..., 2]) * inv_m - params.gravity_mps2

    # dq = 0.5 q * (0, w)
    out[..., 6] = 0.5 * (-qx * wx - qy * wy - qz * wz)
    out[..., 7] = 0.5 * (qw * wx + qy * wz - qz * wy)
    out[..., 8] = 0.5 * (qw * wy - qx * wz + qz * wx)
    out[..., 9] = 0.5 * (qw * wz + qx * wy - qy * wx)

    ix, iy, iz = inertia
    out[..., 10] = (torque[..., 0] - wy * wz * (iz - iy)) / ix
    out[..., 11] = (torque[..., 1] - wx * wz * (ix - iz)) / iy
    out[..., 12] = (torque[..., 2] - wx * wy * (iy - ix)) / iz
    return out


def step(state, action, params: VehicleParams, dt: float) -> np.ndarray:
    """One RK4 integration step with zero-order-hold controls.

    Deterministic; process noise is the caller's responsibility. The output
    quaternion is renormalized to unit length. Broadcasts over leading axes.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x = np.asarray(state, dtype=float)
    u = np.clip(np.asarray(action, dtype=float), 0.0, params.max_rotor_speed)

    rotor_x, rotor_y, yaw_sign, gains, inertia = _geometry(params)
    speeds = gains * u
    thrusts = params.thrust_coeff * speeds**2
    thrust_z = np.sum(thrusts, axis=-1)
    torque = np.stack([
        np.sum(rotor_y * thrusts, axis=-1),
        -np.sum(rotor_x * thrusts, axis=-1),
        params.torque_coeff * np.sum(yaw_sign * speeds**2, axis=-1),
    ], axis=-1)

    with np.errstate(invalid="ignore", over="ignore"):
        k1 = _derivative(x, thrust_z, torque, params, inertia)
        k2 = _derivative(x + 0.5 * dt * k1, thrust_z, torque, params, inertia)
        k3 = _derivative(x + 0.5 * dt * k2, thrust_z, torque, params, inertia)
        k4 = _derivative(x + dt * k3, thrust_z, torque, params, inertia)
        out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[..., QUAT] = quat_normalize(out[..., QUAT])

    if not np.all(np.isfinite(out)):
        for name, sl in _COMPONENT_NAMES:
            if not np.all(np.isfinite(out[..., sl])):
                raise SimulationDiverged(f"non-finite {name} after integration step")
    return out


def make_state(p=(0.0, 0.0, 0.0), v=(0.0, 0.0, 0.0),
               q=(1.0, 0.0, 0.0, 0.0), w=(0.0, 0.0, 0.0)) -> np.ndarray:
    x = np.zeros(STATE_DIM)
    x[POS] = p
    x[VEL] = v
    x[QUAT] = quat_normalize(np.asarray(q, dtype=float))
    x[ANGVEL] = w
    return x


def assert_valid_state(x):
    x = np.asarray(x)
    if x.shape[-1] != STATE_DIM:
        raise ValueError(f"state must have {STATE_DIM} components")
    if not np.all(np.isfinite(x)):
        raise ValueError("state has non-finite components")
    norms = np.linalg.norm(x[..., QUAT], axis=-1)
    if not np.all(np.abs(norms - 1.0) < 1e-6):
        raise ValueError("state quaternion is not normalized")


# ---------------------------------------------------------------------------
# Tangent-space charts and linearization
# ---------------------------------------------------------------------------

def to_tangent(state, ref) -> np.ndarray:
    """Coordinates of ``state`` in the local chart centered at ``ref``."""
    state = np.asarray(state, dtype=float)
    ref = np.asarray(ref, dtype=float)
    dq = quat_multiply(quat_conjugate(ref[..., QUAT]), state[..., QUAT])
    shape = np.broadcast_shapes(state.shape[:-1], ref.shape[:-1])
    out = np.empty(shape + (TANGENT_DIM,))
    out[..., T_POS] = state[..., POS] - ref[..., POS]
    out[..., T_VEL] = state[..., VEL] - ref[..., VEL]
    out[..., T_ROT] = quat_log(dq)
    out[..., T_ANGVEL] = state[..., ANGVEL] - ref[..., ANGVEL]
    return out


def from_tangent(ref, xi) -> np.ndarray:
    """Apply tangent coordinates ``xi`` to the chart center ``ref``."""
    ref = np.asarray(ref, dtype=float)
    xi = np.asarray(xi, dtype=float)
    shape = np.broadcast_shapes(ref.shape[:-1], xi.shape[:-1])
    out = np.empty(shape + (STATE_DIM,))
    out[..., POS] = ref[..., POS] + xi[..., T_POS]
    out[..., VEL] = ref[..., VEL] + xi[..., T_VEL]
    out[..., QUAT] = quat_normalize(
        quat_multiply(np.broadcast_to(ref[..., QUAT], shape + (4,)), quat_exp(xi[..., T_ROT])))
    out[..., ANGVEL] = ref[..., ANGVEL] + xi[..., T_ANGVEL]
    return out


@dataclass
class LinearDynamics:
    """Local linear-Gaussian transition model in tangent coordinates."""

    f_x: np.ndarray      # (12, 12)
    f_u: np.ndarray      # (12, 4)
    f_c: np.ndarray      # (12,)  drift of the nominal relative to the next chart
    noise: np.ndarray    # (12, 12) process covariance


def default_process_noise(variance: float = 1e-4) -> np.ndarray:
    """Diagonal process covariance on velocity and angular velocity rows."""
    f = np.zeros((TANGENT_DIM, TANGENT_DIM))
    f[T_VEL, T_VEL] = np.eye(3) * variance
    f[T_ANGVEL, T_ANGVEL] = np.eye(3) * variance
    return f


_FD_STEP = 1e-5


def linearize_trajectory(states, actions, params: VehicleParams, dt: float,
                         noise=None, fd_step: float = _FD_STEP):
    """Central-difference linearization of ``step`` along a trajectory.

    states: (T+1, 13) with states[t+1] used as the chart for step t's output
    (so f_c measures dynamic inconsistency of the nominal and is zero on a
    rolled-out trajectory). actions: (T, 4). Returns a list of LinearDynamics.
    """
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    T = actions.shape[0]
    n, m = TANGENT_DIM, ACTION_DIM
    h = fd_step
    if noise is None:
        noise = np.zeros((n, n))
    noise = np.asarray(noise, dtype=float)

    # Perturbation template: 2n state offsets, 2m action offsets, 1 nominal.
    pert = np.zeros((2 * n, n))
    pert[:n] = np.eye(n) * h
    pert[n:] = -np.eye(n) * h

    xs = states[:T]
    x_pert = from_tangent(xs[:, None, :], pert[None, :, :])        # (T, 2n, 13)
    x_batch = np.concatenate(
        [x_pert, np.repeat(xs[:, None, :], 2 * m + 1, axis=1)], axis=1)  # (T, P, 13)

    u_pert = np.zeros((2 * m, m))
    u_pert[:m] = np.eye(m) * h
    u_pert[m:] = -np.eye(m) * h
    u_batch = np.concatenate([
        np.repeat(actions[:, None, :], 2 * n, axis=1),
        actions[:, None, :] + u_pert[None, :, :],
        actions[:, None, :],
    ], axis=1)                                                     # (T, P, 4)

    nexts = step(x_batch, u_batch, params, dt)                     # (T, P, 13)
    base = nexts[:, -1, :]
    tans = to_tangent(nexts, base[:, None, :])                     # (T, P, 12)

    f_x = (tans[:, :n] - tans[:, n:2 * n]) / (2.0 * h)             # (T, n, n)
    f_x = np.swapaxes(f_x, 1, 2)
    f_u = (tans[:, 2 * n:2 * n + m] - tans[:, 2 * n + m:2 * n + 2 * m]) / (2.0 * h)
    f_u = np.swapaxes(f_u, 1, 2)
    f_c = to_tangent(base, states[1:])

    return [LinearDynamics(f_x[t], f_u[t], f_c[t], noise) for t in range(T)]


def linearize(state, action, params: VehicleParams, dt: float, noise=None,
              next_reference=None, fd_step: float = _FD_STEP) -> LinearDynamics:
    """Linearize ``step`` at a single point. ``next_reference`` sets the chart
    for the successor state; defaults to step(state, action), making f_c zero.
    """
    x = np.asarray(state, dtype=float)
    if next_reference is None:
        next_reference = step(x, action, params, dt)
    lin = linearize_trajectory(
        np.stack([x, np.asarray(next_reference, dtype=float)]),
        np.asarray(action, dtype=float)[None, :],
        params, dt, noise=noise, fd_step=fd_step)[0]
    return lin


# ---------------------------------------------------------------------------
# Model wrapper used by the trajectory optimizer and MPC
# ---------------------------------------------------------------------------

class QuadrotorModel:
    """Bundles parameters, step size, and process noise behind the interface
    the optimizer expects (step / charts / linearize_trajectory)."""

    state_dim = STATE_DIM
    tangent_dim = TANGENT_DIM
    action_dim = ACTION_DIM

    def __init__(self, params: VehicleParams, dt: float = 0.05, process_noise=None):
        self.params = params
        self.dt = dt
        self.process_noise = (np.zeros((TANGENT_DIM, TANGENT_DIM))
                              if process_noise is None else np.asarray(process_noise, dtype=float))
        self._noise_chol = None
        if np.any(self.process_noise):
            self._noise_chol = np.linalg.cholesky(
                self.process_noise + 1e-18 * np.eye(TANGENT_DIM))

    def step(self, state, action):
        return step(state, action, self.params, self.dt)

    def step_noisy(self, state, action, rng):
        nxt = self.step(state, action)
        if self._noise_chol is None:
            return nxt
        xi = self._noise_chol @ rng.standard_normal(TANGENT_DIM)
        return from_tangent(nxt, xi)

    def to_tangent(self, state, ref):
        return to_tangent(state, ref)

    def from_tangent(self, ref, xi):
        return from_tangent(ref, xi)

    def linearize_trajectory(self, states, actions):
        return linearize_trajectory(states, actions, self.params, self.dt,
                                    noise=self.process_noise)

    def initial_actions(self, x1, horizon):
        return np.tile(hover_controls(self.params), (horizon, 1))
