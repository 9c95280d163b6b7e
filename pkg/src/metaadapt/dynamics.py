"""Hybrid discrete-time vehicle dynamics.

State layout (10)::

    [x, y, yaw, vx, vy, yaw_rate, brake, steer_col, steer_col_rate, engine]

Control layout (3): ``[throttle, brake, steering]`` with throttle and brake in
``[0, 1]`` and steering in ``[-1, 1]``.

Terrain layout (14): ``[roll, pitch, n_fl(3), n_fr(3), n_rl(3), n_rr(3)]``
where the wheel normals are unit vectors expressed in the yaw-aligned frame.

The body acceleration is

    vdot = M^-1 (X(x) F + zeta) + D

where ``F`` are per-wheel tire forces from a linear-with-saturation tire law,
``X`` maps wheel-frame forces to body-frame force and yaw moment, ``zeta`` is
the learned residual and ``D`` collects Coriolis, drag and slope gravity.
The state is advanced with one explicit Euler step of ``DT`` seconds.

All functions act on a single sample; use ``jax.vmap`` for batches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from metaadapt import network as nn

Array = jax.Array

DT = 0.02
GRAVITY = 9.81
SLIP_VELOCITY_FLOOR = 0.1

STATE_DIM = 10
CONTROL_DIM = 3
TERRAIN_DIM = 14
FORCE_DIM = 8

X, Y, YAW, VX, VY, YAW_RATE, BRAKE, STEER, STEER_RATE, ENGINE = range(10)
POSE = slice(0, 3)
VEL = slice(3, 6)
ACT = slice(6, 10)

THROTTLE_CMD, BRAKE_CMD, STEER_CMD = range(3)
ROLL, PITCH = 0, 1

CONTROL_LOW = np.array([0.0, 0.0, -1.0])
CONTROL_HIGH = np.array([1.0, 1.0, 1.0])


class NonFiniteStateError(FloatingPointError):
    """Raised when a propagated state contains NaN or inf entries."""


class ParametricParams(NamedTuple):
    """Physical parameters ``psi`` of the parametric part of the model."""

    mass: float = 900.0  # kg
    yaw_inertia: float = 1100.0  # kg m^2
    wheelbase: float = 2.9  # m
    cg_to_rear: float = 1.5  # m
    track_width: float = 1.6  # m
    cg_height: float = 0.6  # m
    lat_stiffness: float = 2.0e4  # N/rad per wheel
    long_stiffness: float = 250.0  # N per m/s of wheel slip speed, per wheel
    friction: float = 0.9
    rolling_resistance: float = 0.02
    aero_drag: float = 0.8  # N/(m/s)^2
    brake_gain: float = 2500.0  # N per wheel at full brake
    brake_time_constant: float = 0.2  # s
    steer_time_constant: float = 0.15  # s
    engine_time_constant: float = 0.4  # s
    engine_idle: float = 100.0  # rad/s
    engine_throttle_gain: float = 500.0  # rad/s at full throttle
    gear_ratio: float = 0.04  # m/s of wheel speed per rad/s above idle
    engine_load: float = 2.0  # rad/s^2 per m/s of drivetrain slip
    steer_column_max: float = 6.0  # rad
    steer_ratio: float = 0.1  # wheel angle per column angle


# Geometry and actuator limits are not fitted.
PSI_TRAINABLE = (
    "yaw_inertia",
    "lat_stiffness",
    "long_stiffness",
    "friction",
    "rolling_resistance",
    "aero_drag",
    "brake_gain",
    "brake_time_constant",
    "steer_time_constant",
    "engine_time_constant",
    "engine_throttle_gain",
    "gear_ratio",
    "engine_load",
    "steer_ratio",
)


def validate_params(psi: ParametricParams) -> None:
    for name, value in psi._asdict().items():
        if not np.isfinite(value) or value <= 0:
            raise ValueError(f"parametric parameter {name} must be positive and finite, got {value}")
    if psi.cg_to_rear >= psi.wheelbase:
        raise ValueError("cg_to_rear must be shorter than the wheelbase")


def wrap_angle(a: Array) -> Array:
    """Wrap to ``(-pi, pi]``."""
    return a - 2.0 * jnp.pi * jnp.ceil((a - jnp.pi) / (2.0 * jnp.pi))


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    yaw: float
    vx: float
    vy: float
    yaw_rate: float
    brake: float = 0.0
    steer_col: float = 0.0
    steer_col_rate: float = 0.0
    engine: float = 100.0

    def __post_init__(self):
        vals = np.array(self.as_tuple(), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("vehicle state entries must be finite")
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))
        object.__setattr__(self, "brake", float(np.clip(self.brake, 0.0, 1.0)))

    def as_tuple(self) -> tuple[float, ...]:
        return (
            self.x, self.y, self.yaw, self.vx, self.vy, self.yaw_rate,
            self.brake, self.steer_col, self.steer_col_rate, self.engine,
        )

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)

    @classmethod
    def from_array(cls, arr) -> "VehicleState":
        return cls(*map(float, np.asarray(arr).reshape(STATE_DIM)))


@dataclass(frozen=True)
class ControlInput:
    throttle: float = 0.0
    brake: float = 0.0
    steering: float = 0.0

    def __post_init__(self):
        arr = self.as_array()
        if np.any(arr < CONTROL_LOW) or np.any(arr > CONTROL_HIGH):
            raise ValueError(f"control {arr} outside bounds")

    def as_array(self) -> np.ndarray:
        return np.array([self.throttle, self.brake, self.steering], dtype=float)


@dataclass(frozen=True)
class TerrainInput:
    roll: float = 0.0
    pitch: float = 0.0
    wheel_normals: tuple = ((0.0, 0.0, 1.0),) * 4

    def __post_init__(self):
        normals = np.asarray(self.wheel_normals, dtype=float)
        if normals.shape != (4, 3):
            raise ValueError("need four 3-vector wheel normals")
        if np.any(np.abs(np.linalg.norm(normals, axis=1) - 1.0) > 1e-9):
            raise ValueError("wheel normals must be unit length")
        if not (abs(self.roll) < np.pi / 2 and abs(self.pitch) < np.pi / 2):
            raise ValueError("roll and pitch must lie in (-pi/2, pi/2)")

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.roll, self.pitch], np.asarray(self.wheel_normals, float).ravel()])

    @classmethod
    def from_array(cls, arr) -> "TerrainInput":
        arr = np.asarray(arr, dtype=float)
        return cls(float(arr[0]), float(arr[1]), tuple(map(tuple, arr[2:].reshape(4, 3))))


def flat_terrain(dtype=float) -> Array:
    y = np.zeros(TERRAIN_DIM)
    y[2 + 2 :: 3] = 1.0
    return jnp.asarray(y, dtype=dtype)


# --- parametric components -------------------------------------------------


def wheel_positions(psi: ParametricParams) -> tuple[Array, Array]:
    """Body-frame wheel coordinates in the order FL, FR, RL, RR."""
    lf = psi.wheelbase - psi.cg_to_rear
    half = 0.5 * psi.track_width
    xs = jnp.array([lf, lf, -psi.cg_to_rear, -psi.cg_to_rear])
    ys = jnp.array([half, -half, half, -half])
    return xs, ys


def wheel_angles(x: Array, psi: ParametricParams) -> Array:
    delta = psi.steer_ratio * x[STEER]
    zero = jnp.zeros_like(delta)
    return jnp.stack([delta, delta, zero, zero])


def normal_loads(psi: ParametricParams) -> Array:
    lf = psi.wheelbase - psi.cg_to_rear
    front = psi.mass * GRAVITY * psi.cg_to_rear / (2.0 * psi.wheelbase)
    rear = psi.mass * GRAVITY * lf / (2.0 * psi.wheelbase)
    return jnp.stack([front, front, rear, rear])


def actuator_rates(x: Array, u: Array, psi: ParametricParams) -> Array:
    """First-order actuator lags ``zdot = g_z(x, u)``."""
    brake_rate = (u[BRAKE_CMD] - x[BRAKE]) / psi.brake_time_constant
    steer_rate = (u[STEER_CMD] * psi.steer_column_max - x[STEER]) / psi.steer_time_constant
    steer_accel = (steer_rate - x[STEER_RATE]) / psi.steer_time_constant
    engine_target = psi.engine_idle + psi.engine_throttle_gain * u[THROTTLE_CMD]
    drivetrain_slip = psi.gear_ratio * (x[ENGINE] - psi.engine_idle) - x[VX]
    engine_rate = (engine_target - x[ENGINE]) / psi.engine_time_constant - psi.engine_load * drivetrain_slip
    return jnp.stack([brake_rate, steer_rate, steer_accel, engine_rate])


def wheel_velocities(x: Array, psi: ParametricParams) -> tuple[Array, Array]:
    """Longitudinal and lateral velocity of each wheel in its own frame."""
    xs, ys = wheel_positions(psi)
    delta = wheel_angles(x, psi)
    vbx = x[VX] - x[YAW_RATE] * ys
    vby = x[VY] + x[YAW_RATE] * xs
    c, s = jnp.cos(delta), jnp.sin(delta)
    return vbx * c + vby * s, -vbx * s + vby * c


def tire_forces(x: Array, u: Array, psi: ParametricParams) -> Array:
    """Per-wheel ``[Fx_fl, Fx_fr, Fx_rl, Fx_rr, Fy_fl, Fy_fr, Fy_rl, Fy_rr]``.

    Actuator commands act through the lagged brake and engine states, so ``u``
    does not enter directly.
    """
    del u
    v_long, v_lat = wheel_velocities(x, psi)
    limit = psi.friction * normal_loads(psi)

    wheel_speed = psi.gear_ratio * (x[ENGINE] - psi.engine_idle)
    drive = psi.long_stiffness * (wheel_speed - v_long)
    brake = -psi.brake_gain * x[BRAKE] * jnp.tanh(v_long / 0.5)
    fx = jnp.clip(drive + brake, -limit, limit)

    alpha = jnp.arctan(v_lat / jnp.maximum(jnp.abs(v_long), SLIP_VELOCITY_FLOOR))
    fy = jnp.clip(-psi.lat_stiffness * alpha, -limit, limit)
    return jnp.concatenate([fx, fy])


def force_transform(x: Array, psi: ParametricParams) -> Array:
    """``X(x)``: wheel-frame forces (8) to body force and yaw moment (3)."""
    xs, ys = wheel_positions(psi)
    delta = wheel_angles(x, psi)
    c, s = jnp.cos(delta), jnp.sin(delta)
    # body force of each wheel: [fx_b, fy_b] = R(delta) [fx, fy]
    fxb = jnp.concatenate([c, -s])
    fyb = jnp.concatenate([s, c])
    xs2 = jnp.concatenate([xs, xs])
    ys2 = jnp.concatenate([ys, ys])
    mz = xs2 * fyb - ys2 * fxb
    return jnp.stack([fxb, fyb, mz])


def drift_acceleration(x: Array, y: Array, psi: ParametricParams) -> Array:
    """``D``: Coriolis, rolling resistance, aero drag and slope gravity."""
    vx, vy, r = x[VX], x[VY], x[YAW_RATE]
    roll, pitch = y[ROLL], y[PITCH]
    ax = (
        r * vy
        - GRAVITY * jnp.sin(pitch)
        - psi.rolling_resistance * GRAVITY * jnp.tanh(vx / 0.5)
        - psi.aero_drag * vx * jnp.abs(vx) / psi.mass
    )
    ay = -r * vx - GRAVITY * jnp.cos(pitch) * jnp.sin(roll)
    return jnp.stack([ax, ay, jnp.zeros_like(ax)])


def inverse_mass(psi: ParametricParams) -> Array:
    return jnp.stack([1.0 / psi.mass, 1.0 / psi.mass, 1.0 / psi.yaw_inertia])


def acceleration(x: Array, u: Array, y: Array, forces: Array, zeta: Array, psi: ParametricParams) -> Array:
    del u
    return inverse_mass(psi) * (force_transform(x, psi) @ forces + zeta) + drift_acceleration(x, y, psi)


def network_input(x: Array, u: Array, y: Array, forces: Array) -> Array:
    return jnp.concatenate([x, u, y, forces])


def planar_velocity_world(x: Array) -> Array:
    c, s = jnp.cos(x[YAW]), jnp.sin(x[YAW])
    return jnp.stack([c * x[VX] - s * x[VY], s * x[VX] + c * x[VY], x[YAW_RATE]])


def _euler(x: Array, vdot: Array, zdot: Array, dt: float) -> Array:
    pose = x[POSE] + dt * planar_velocity_world(x)
    pose = pose.at[2].set(wrap_angle(pose[2]))
    vel = x[VEL] + dt * vdot
    act = x[ACT] + dt * zdot
    act = act.at[0].set(jnp.clip(act[0], 0.0, 1.0))
    return jnp.concatenate([pose, vel, act])


def step_with_residual(
    x: Array, u: Array, y: Array, zeta: Array, psi: ParametricParams, dt: float = DT
) -> Array:
    """One Euler step with the residual force supplied directly."""
    forces = tire_forces(x, u, psi)
    vdot = acceleration(x, u, y, forces, zeta, psi)
    return _euler(x, vdot, actuator_rates(x, u, psi), dt)


def model_features(x: Array, u: Array, y: Array, net: nn.NetParams, psi: ParametricParams) -> Array:
    return nn.features(network_input(x, u, y, tire_forces(x, u, psi)), net)


def step(
    x: Array,
    u: Array,
    y: Array,
    net: nn.NetParams,
    theta: Array,
    psi: ParametricParams,
    dt: float = DT,
) -> Array:
    """``x_{t+1} = f(x_t, u_t, y_t; phi, theta, psi)``."""
    zeta = nn.residual_from_features(model_features(x, u, y, net, psi), net, theta)
    return step_with_residual(x, u, y, zeta, psi, dt)


def step_checked(x, u, y, net, theta, psi, dt: float = DT) -> Array:
    """:func:`step` that raises :class:`NonFiniteStateError` on blow-up."""
    out = step(x, u, y, net, theta, psi, dt)
    if not bool(jnp.all(jnp.isfinite(out))):
        raise NonFiniteStateError(f"non-finite state after step: {np.asarray(out)}")
    return out


def state_jacobian(x, u, y, net, theta, psi, dt: float = DT) -> Array:
    """``df/dx`` (10x10) with the residual held fixed at its value at ``x``."""
    zeta = jax.lax.stop_gradient(
        nn.residual_from_features(model_features(x, u, y, net, psi), net, theta)
    )
    return jax.jacfwd(step_with_residual)(x, u, y, zeta, psi, dt)


def param_jacobian_from_features(phi: Array, net: nn.NetParams, psi: ParametricParams, dt: float = DT) -> Array:
    jz = nn.feature_param_jacobian(phi, net)
    block = dt * inverse_mass(psi)[:, None] * jz
    return jnp.zeros((STATE_DIM, net.n_theta), dtype=block.dtype).at[VEL].set(block)


def param_jacobian(x, u, y, net, psi, dt: float = DT) -> Array:
    """``df/dtheta`` (10 x n_theta); exact since the step is affine in theta."""
    return param_jacobian_from_features(model_features(x, u, y, net, psi), net, psi, dt)


def rollout(x0: Array, controls: Array, terrains: Array, net, theta, psi, dt: float = DT) -> Array:
    """Open-loop propagation; returns states ``x_1..x_n`` for ``n`` controls."""

    def body(x, inp):
        u, y = inp
        xn = step(x, u, y, net, theta, psi, dt)
        return xn, xn

    _, xs = jax.lax.scan(body, x0, (controls, terrains))
    return xs


def cast_params(tree, dtype):
    """Cast every floating leaf of a parameter pytree to ``dtype``."""
    return jax.tree_util.tree_map(lambda a: jnp.asarray(a, dtype=dtype), tree)
