import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaadapt import dynamics as dyn
from metaadapt import network as nn

from conftest import make_net, random_control, random_state, random_terrain

PSI = dyn.ParametricParams()


# --- independent scalar re-implementations ---------------------------------


def lag_rates_oracle(x, u, p):
    brake = (u[1] - x[6]) / p.brake_time_constant
    steer = (u[2] * p.steer_column_max - x[7]) / p.steer_time_constant
    steer_acc = (steer - x[8]) / p.steer_time_constant
    target = p.engine_idle + p.engine_throttle_gain * u[0]
    slip = p.gear_ratio * (x[9] - p.engine_idle) - x[3]
    engine = (target - x[9]) / p.engine_time_constant - p.engine_load * slip
    return np.array([brake, steer, steer_acc, engine])


def wheel_geometry(p):
    lf = p.wheelbase - p.cg_to_rear
    w = p.track_width / 2
    return [(lf, w), (lf, -w), (-p.cg_to_rear, w), (-p.cg_to_rear, -w)]


def tire_oracle(x, p):
    delta = p.steer_ratio * x[7]
    lf = p.wheelbase - p.cg_to_rear
    fz_front = p.mass * 9.81 * p.cg_to_rear / p.wheelbase / 2
    fz_rear = p.mass * 9.81 * lf / p.wheelbase / 2
    fx, fy = [], []
    for i, (px, py) in enumerate(wheel_geometry(p)):
        d = delta if i < 2 else 0.0
        fz = fz_front if i < 2 else fz_rear
        # velocity of the contact point, rotated into the wheel frame
        ux = x[3] - x[5] * py
        uy = x[4] + x[5] * px
        vl = math.cos(d) * ux + math.sin(d) * uy
        vt = -math.sin(d) * ux + math.cos(d) * uy
        slip_speed = p.gear_ratio * (x[9] - p.engine_idle) - vl
        f_long = p.long_stiffness * slip_speed - p.brake_gain * x[6] * math.tanh(vl / 0.5)
        alpha = math.atan(vt / max(abs(vl), 0.1))
        lim = p.friction * fz
        fx.append(min(max(f_long, -lim), lim))
        fy.append(min(max(-p.lat_stiffness * alpha, -lim), lim))
    return np.array(fx + fy)


def accel_oracle(x, y, forces, zeta, p):
    delta = p.steer_ratio * x[7]
    fx_body = fy_body = mz = 0.0
    for i, (px, py) in enumerate(wheel_geometry(p)):
        d = delta if i < 2 else 0.0
        bx = math.cos(d) * forces[i] - math.sin(d) * forces[4 + i]
        by = math.sin(d) * forces[i] + math.cos(d) * forces[4 + i]
        fx_body += bx
        fy_body += by
        mz += px * by - py * bx
    vx, vy, r = x[3], x[4], x[5]
    g = 9.81
    ax = (fx_body + zeta[0]) / p.mass + r * vy - g * math.sin(y[1]) \
        - p.rolling_resistance * g * math.tanh(vx / 0.5) - p.aero_drag * vx * abs(vx) / p.mass
    ay = (fy_body + zeta[1]) / p.mass - r * vx - g * math.cos(y[1]) * math.sin(y[0])
    ar = (mz + zeta[2]) / p.yaw_inertia
    return np.array([ax, ay, ar])


def step_oracle(x, u, y, zeta, p, dt=0.02):
    forces = tire_oracle(x, p)
    vdot = accel_oracle(x, y, forces, zeta, p)
    zdot = lag_rates_oracle(x, u, p)
    c, s = math.cos(x[2]), math.sin(x[2])
    out = x.copy()
    out[0] += dt * (c * x[3] - s * x[4])
    out[1] += dt * (s * x[3] + c * x[4])
    out[2] = math.remainder(x[2] + dt * x[5], 2 * math.pi)
    if out[2] == -math.pi:
        out[2] = math.pi
    out[3:6] += dt * vdot
    out[6:10] += dt * zdot
    out[6] = min(max(out[6], 0.0), 1.0)
    return out


def equilibrium_state(p=PSI):
    x = np.zeros(10)
    x[dyn.ENGINE] = p.engine_idle
    return x


# --- actuator_rates ----------------------------------------------------------


def test_actuator_rates_zero_at_lag_fixed_point():
    x = equilibrium_state()
    x[dyn.BRAKE] = 0.4
    x[dyn.STEER] = 0.5 * PSI.steer_column_max
    u = np.array([0.0, 0.4, 0.5])
    np.testing.assert_allclose(dyn.actuator_rates(x, u, PSI), 0.0, atol=1e-12)


def test_brake_rate_from_time_constant():
    x = equilibrium_state()
    rates = dyn.actuator_rates(x, np.array([0.0, 1.0, 0.0]), PSI._replace(brake_time_constant=0.2))
    assert float(rates[0]) == pytest.approx(5.0)


def test_actuator_rates_match_scalar_recomputation(rng):
    for _ in range(20):
        x, u = random_state(rng), random_control(rng)
        np.testing.assert_allclose(dyn.actuator_rates(x, u, PSI), lag_rates_oracle(x, u, PSI), rtol=1e-12)


# --- tire_forces --------------------------------------------------------------


def test_tire_forces_zero_at_rest():
    f = dyn.tire_forces(equilibrium_state(), np.zeros(3), PSI)
    np.testing.assert_allclose(f, 0.0, atol=1e-12)


def test_pure_lateral_slip_follows_linear_law():
    x = equilibrium_state()
    x[dyn.VX] = 5.0
    x[dyn.ENGINE] = PSI.engine_idle + 5.0 / PSI.gear_ratio  # no longitudinal slip
    alpha = 0.02
    x[dyn.VY] = 5.0 * math.tan(alpha)  # pure side slip, no yaw: every wheel sees alpha
    f = np.asarray(dyn.tire_forces(x, np.zeros(3), PSI))
    np.testing.assert_allclose(f[4:], -PSI.lat_stiffness * alpha, rtol=1e-12)
    np.testing.assert_allclose(f[:4], 0.0, atol=1e-9)


def test_tire_forces_match_brute_force(rng):
    for _ in range(30):
        x = random_state(rng)
        np.testing.assert_allclose(dyn.tire_forces(x, np.zeros(3), PSI), tire_oracle(x, PSI),
                                   rtol=1e-10, atol=1e-9)


def test_tire_forces_saturate_at_friction_limit():
    x = equilibrium_state()
    x[dyn.VX] = 3.0
    x[dyn.VY] = 3.0  # 45 degree slip, far past the linear range
    f = np.asarray(dyn.tire_forces(x, np.zeros(3), PSI))
    np.testing.assert_allclose(np.abs(f[4:]), PSI.friction * np.asarray(dyn.normal_loads(PSI)), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(vx=st.floats(0.5, 15), vy=st.floats(-3, 3), r=st.floats(-1, 1), steer=st.floats(-5, 5))
def test_lateral_forces_odd_in_slip(vx, vy, r, steer):
    x = equilibrium_state()
    x[[dyn.VX, dyn.VY, dyn.YAW_RATE, dyn.STEER]] = vx, vy, r, steer
    mirrored = x.copy()
    mirrored[[dyn.VY, dyn.YAW_RATE, dyn.STEER]] *= -1
    f = np.asarray(dyn.tire_forces(x, np.zeros(3), PSI))
    g = np.asarray(dyn.tire_forces(mirrored, np.zeros(3), PSI))
    # mirroring left/right swaps the wheels of each axle and negates lateral force
    swap = [1, 0, 3, 2]
    np.testing.assert_allclose(g[4:][swap], -f[4:], atol=1e-9)


# --- acceleration -------------------------------------------------------------


def test_acceleration_zero_without_forces():
    x = equilibrium_state()
    a = dyn.acceleration(x, np.zeros(3), dyn.flat_terrain(), np.zeros(8), np.zeros(3), PSI)
    np.testing.assert_allclose(a, 0.0, atol=1e-12)


def test_residual_force_scaled_by_mass():
    x = equilibrium_state()
    a = dyn.acceleration(x, np.zeros(3), dyn.flat_terrain(), np.zeros(8), np.array([PSI.mass * 1.7, 0, 0]), PSI)
    np.testing.assert_allclose(a, [1.7, 0.0, 0.0], atol=1e-12)


def test_acceleration_matches_elementwise_recomputation(rng):
    for _ in range(20):
        x, y = random_state(rng), random_terrain(rng)
        forces = rng.normal(0, 2000, 8)
        zeta = rng.normal(0, 300, 3)
        np.testing.assert_allclose(dyn.acceleration(x, np.zeros(3), y, forces, zeta, PSI),
                                   accel_oracle(x, y, forces, zeta, PSI), rtol=1e-10, atol=1e-10)


# --- step -----------------------------------------------------------------------


def test_step_identity_when_all_rates_zero():
    net = make_net(1)
    x = equilibrium_state()
    x[[dyn.X, dyn.Y, dyn.YAW]] = 3.0, -2.0, 0.7
    zeta = nn.residual(dyn.network_input(x, np.zeros(3), dyn.flat_terrain(), np.zeros(8)), net, nn.zero_theta(net))
    out = dyn.step_with_residual(x, np.zeros(3), dyn.flat_terrain(), jnp.zeros(3), PSI)
    np.testing.assert_allclose(out, x, atol=1e-12)
    assert zeta.shape == (3,)


def test_step_rotates_planar_velocity():
    x = equilibrium_state()
    x[dyn.YAW] = np.pi / 2
    x[dyn.VX] = 1.0
    out = np.asarray(dyn.step_with_residual(x, np.zeros(3), dyn.flat_terrain(), jnp.zeros(3), PSI))
    np.testing.assert_allclose(out[:2], [0.0, dyn.DT], atol=1e-15)


def test_ten_steps_match_independent_recomputation(rng, net):
    x = random_state(rng)
    theta = rng.normal(0, 0.5, net.n_theta)
    ref = x.copy()
    for _ in range(10):
        u, y = random_control(rng), random_terrain(rng)
        zeta = np.asarray(nn.residual(dyn.network_input(ref, u, y, tire_oracle(ref, PSI)), net, theta))
        ref = step_oracle(ref, u, y, zeta, PSI)
        x = dyn.step(x, u, y, net, theta, PSI)
    np.testing.assert_allclose(x, ref, rtol=1e-9, atol=1e-9)


def test_step_matches_explicit_matrix_form(rng, net):
    """x+ = E_A R(p) x + E_B [v; vdot; zdot] with the block matrices written out."""
    x, u, y = random_state(rng), random_control(rng), random_terrain(rng)
    theta = rng.normal(0, 0.5, net.n_theta)
    forces = dyn.tire_forces(x, u, PSI)
    zeta = nn.residual(dyn.network_input(x, u, y, forces), net, theta)
    vdot = np.asarray(dyn.acceleration(x, u, y, forces, zeta, PSI))
    zdot = np.asarray(dyn.actuator_rates(x, u, PSI))
    c, s = math.cos(x[2]), math.sin(x[2])
    rot = np.eye(3)
    rot[:2, :2] = [[c, -s], [s, c]]
    e_a = np.eye(10)
    e_b = np.zeros((10, 10))
    e_b[0:3, 0:3] = dyn.DT * rot
    e_b[3:6, 3:6] = dyn.DT * np.eye(3)
    e_b[6:10, 6:10] = dyn.DT * np.eye(4)
    rates = np.concatenate([x[3:6], vdot, zdot])
    expected = e_a @ x + e_b @ rates
    got = np.asarray(dyn.step(x, u, y, net, theta, PSI))
    expected[2] = float(dyn.wrap_angle(expected[2]))
    expected[6] = np.clip(expected[6], 0, 1)
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_step_checked_raises_on_non_finite(net):
    x = equilibrium_state()
    x[dyn.VX] = np.inf
    with pytest.raises(dyn.NonFiniteStateError):
        dyn.step_checked(x, np.zeros(3), dyn.flat_terrain(), net, nn.zero_theta(net), PSI)


def test_yaw_wrapped_after_step():
    x = equilibrium_state()
    x[dyn.YAW] = np.pi - 1e-4
    x[dyn.YAW_RATE] = 1.0
    out = np.asarray(dyn.step_with_residual(x, np.zeros(3), dyn.flat_terrain(), jnp.zeros(3), PSI))
    assert -np.pi < out[dyn.YAW] <= np.pi
    assert out[dyn.YAW] == pytest.approx(-np.pi + 0.02 - 1e-4)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), lam=st.floats(0, 1))
def test_step_linear_in_theta(seed, lam):
    r = np.random.default_rng(seed)
    net = make_net(seed % 5)
    x, u, y = random_state(r), random_control(r), random_terrain(r)
    t1, t2 = r.normal(0, 1, net.n_theta), r.normal(0, 1, net.n_theta)
    mixed = dyn.step(x, u, y, net, lam * t1 + (1 - lam) * t2, PSI)
    combo = lam * dyn.step(x, u, y, net, t1, PSI) + (1 - lam) * dyn.step(x, u, y, net, t2, PSI)
    # brake clipping and yaw wrapping are the only non-affine pieces; stay away from them
    np.testing.assert_allclose(mixed, combo, atol=1e-10)


# --- state_jacobian -------------------------------------------------------------


def frozen_fd_jacobian(x, u, y, net, theta, eps=1e-6):
    zeta = nn.residual(dyn.network_input(x, u, y, dyn.tire_forces(x, u, PSI)), net, theta)
    cols = []
    for i in range(10):
        e = np.zeros(10)
        e[i] = eps
        hi = np.asarray(dyn.step_with_residual(x + e, u, y, zeta, PSI))
        lo = np.asarray(dyn.step_with_residual(x - e, u, y, zeta, PSI))
        cols.append((hi - lo) / (2 * eps))
    return np.stack(cols, axis=1)


def test_state_jacobian_matches_finite_differences(rng, net):
    jac = jax.jit(dyn.state_jacobian)
    worst = 0.0
    for _ in range(100):
        x, u, y = random_state(rng), random_control(rng), random_terrain(rng)
        theta = rng.normal(0, 0.5, net.n_theta)
        a = np.asarray(jac(x, u, y, net, theta, PSI))
        b = frozen_fd_jacobian(x, u, y, net, theta)
        worst = max(worst, np.linalg.norm(a - b) / np.linalg.norm(b))
    assert worst < 1e-5


def test_state_jacobian_pose_block_at_rest(net):
    x = equilibrium_state()
    x[dyn.YAW] = 0.3
    jac = np.asarray(dyn.state_jacobian(x, np.zeros(3), dyn.flat_terrain(), net, nn.zero_theta(net), PSI))
    c, s = math.cos(0.3), math.sin(0.3)
    expected = np.zeros((3, 6))
    expected[:3, :3] = np.eye(3)
    expected[:3, 3:6] = dyn.DT * np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    np.testing.assert_allclose(jac[:3, :6], expected, atol=1e-15)


def test_state_jacobian_tends_to_identity(rng, net):
    x, u, y = random_state(rng), random_control(rng), random_terrain(rng)
    jac = np.asarray(dyn.state_jacobian(x, u, y, net, nn.zero_theta(net), PSI, dt=1e-9))
    np.testing.assert_allclose(jac, np.eye(10), atol=1e-5)


def test_param_jacobian_is_exact(rng, net):
    x, u, y = random_state(rng), random_control(rng), random_terrain(rng)
    theta = rng.normal(0, 1, net.n_theta)
    d = rng.normal(0, 1, net.n_theta)
    jac = np.asarray(dyn.param_jacobian(x, u, y, net, PSI))
    diff = np.asarray(dyn.step(x, u, y, net, theta + d, PSI) - dyn.step(x, u, y, net, theta, PSI))
    np.testing.assert_allclose(diff, jac @ d, atol=1e-10)


# --- domain types ---------------------------------------------------------------


def test_vehicle_state_wraps_and_clamps():
    s = dyn.VehicleState(0, 0, 3 * np.pi, 1, 0, 0, brake=1.5)
    assert s.yaw == pytest.approx(np.pi)
    assert s.brake == 1.0
    with pytest.raises(ValueError):
        dyn.VehicleState(np.nan, 0, 0, 0, 0, 0)
    np.testing.assert_allclose(dyn.VehicleState.from_array(s.as_array()).as_array(), s.as_array())


def test_control_and_terrain_validation():
    with pytest.raises(ValueError):
        dyn.ControlInput(throttle=1.2)
    with pytest.raises(ValueError):
        dyn.TerrainInput(wheel_normals=((0, 0, 2.0),) * 4)
    with pytest.raises(ValueError):
        dyn.TerrainInput(roll=2.0)
    y = dyn.TerrainInput(0.1, -0.05)
    np.testing.assert_allclose(dyn.TerrainInput.from_array(y.as_array()).as_array(), y.as_array())
    np.testing.assert_allclose(y.as_array(), np.asarray(dyn.flat_terrain()) + np.r_[0.1, -0.05, np.zeros(12)])


def test_params_validation():
    dyn.validate_params(PSI)
    with pytest.raises(ValueError):
        dyn.validate_params(PSI._replace(mass=-1.0))
    with pytest.raises(ValueError):
        dyn.validate_params(PSI._replace(cg_to_rear=5.0))


def test_wrap_angle_range():
    a = np.linspace(-20, 20, 1001)
    w = np.asarray(dyn.wrap_angle(a))
    assert np.all(w > -np.pi) and np.all(w <= np.pi)
    np.testing.assert_allclose(np.cos(w), np.cos(a), atol=1e-12)
