"""Ground-truth vehicle simulator and closed-loop episode runner.

The simulator is a kinematic-dynamic bicycle model that deliberately differs
from :mod:`metaadapt.dynamics`: axle-level tires with a saturating
magic-formula-like curve and a friction circle, friction read from the map at
the vehicle position, load-dependent rolling resistance and its own actuator
constants.  Below a few metres per second it blends into a kinematic bicycle,
which keeps low-speed motion well behaved.

Two parameter presets model the two "worlds": :data:`DATA_GEN_PARAMS` produces
training data and :data:`DEPLOY_PARAMS` is the held-out evaluation world.

The simulator state uses the same 10-element layout as the model state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np

from metaadapt import dynamics as dyn
from metaadapt.terrain import SCALAR, TerrainMap, attitude_from_gradient, bilinear, sense_terrain

G = dyn.GRAVITY
OFF_MAP_FRICTION = 0.8
MEASUREMENT_STD = {"position": 0.05, "yaw": 0.01, "velocity": 0.05}


class SimParams(NamedTuple):
    mass: float = 950.0
    yaw_inertia: float = 1200.0
    wheelbase: float = 2.9
    cg_to_rear: float = 1.5
    track_width: float = 1.6
    cg_height: float = 0.6
    cornering_front: float = 3.6e4  # N/rad per axle
    cornering_rear: float = 4.2e4
    tire_shape: float = 1.4
    friction_scale: float = 1.0
    drive_stiffness: float = 900.0  # N per m/s of drivetrain slip, whole vehicle
    brake_gain: float = 9000.0  # N at full brake, whole vehicle
    rolling_resistance: float = 0.025
    aero_drag: float = 0.9
    brake_time_constant: float = 0.25
    steer_time_constant: float = 0.18
    engine_time_constant: float = 0.5
    engine_idle: float = 100.0
    engine_throttle_gain: float = 450.0
    gear_ratio: float = 0.04
    engine_load: float = 1.5
    steer_column_max: float = 6.0
    steer_ratio: float = 0.1
    blend_low: float = 1.0  # m/s, fully kinematic below
    blend_high: float = 3.0  # m/s, fully dynamic above
    substeps: int = 2


DATA_GEN_PARAMS = SimParams()

# Held-out world: less grip, stronger engine, more drag, slower steering.
DEPLOY_PARAMS = SimParams(
    mass=1000.0,
    cornering_front=3.0e4,
    cornering_rear=3.4e4,
    tire_shape=1.5,
    friction_scale=0.85,
    drive_stiffness=1100.0,
    engine_throttle_gain=600.0,
    aero_drag=1.6,
    rolling_resistance=0.04,
    steer_time_constant=0.25,
    brake_gain=7000.0,
)


def randomize_params(base: SimParams, rng: np.random.Generator) -> SimParams:
    """Per-run variation of the data-generation world."""
    return base._replace(
        friction_scale=base.friction_scale * rng.uniform(0.8, 1.2),
        engine_throttle_gain=base.engine_throttle_gain * rng.uniform(0.85, 1.15),
        aero_drag=base.aero_drag * rng.uniform(0.7, 1.3),
        cornering_front=base.cornering_front * rng.uniform(0.85, 1.15),
        cornering_rear=base.cornering_rear * rng.uniform(0.85, 1.15),
    )


@dataclass
class SimState:
    x: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.shape != (dyn.STATE_DIM,) or not np.all(np.isfinite(self.x)):
            raise ValueError("simulator state must be a finite 10-vector")


def initial_state(x: float, y: float, yaw: float, speed: float = 0.0, p: SimParams = DATA_GEN_PARAMS) -> SimState:
    s = np.zeros(dyn.STATE_DIM)
    s[dyn.X], s[dyn.Y], s[dyn.YAW], s[dyn.VX] = x, y, yaw, speed
    # Engine at the speed that sustains the drivetrain without slip.
    s[dyn.ENGINE] = p.engine_idle + speed / p.gear_ratio
    return SimState(s)


def _local_terrain(tmap: TerrainMap | None, px: float, py: float, yaw: float):
    if tmap is None or not tmap.contains(px, py):
        return 0.0, 0.0, OFF_MAP_FRICTION
    hx = bilinear(tmap.grad_x, px, py, tmap.cell_size)
    hy = bilinear(tmap.grad_y, px, py, tmap.cell_size)
    roll, pitch = attitude_from_gradient(hx, hy, yaw, xp=SCALAR)
    return roll, pitch, bilinear(tmap.friction, px, py, tmap.cell_size)


def _tire_lateral(alpha: float, stiffness: float, cap: float, shape: float, peak: float) -> float:
    """Saturating lateral force with initial slope ``stiffness`` and peak ``cap``."""
    if peak <= 0.0:
        return 0.0
    b = stiffness / (shape * peak)
    return -cap * math.sin(shape * math.atan(b * alpha))


def axle_forces(x: np.ndarray, roll: float, pitch: float, mu: float, p: SimParams):
    """``(Fx_front, Fy_front, Fx_rear, Fy_rear, N_front, N_rear)`` in wheel frames."""
    vx, vy, r = x[dyn.VX], x[dyn.VY], x[dyn.YAW_RATE]
    lf = p.wheelbase - p.cg_to_rear
    lr = p.cg_to_rear
    delta = p.steer_ratio * x[dyn.STEER]
    load = p.mass * G * math.cos(pitch) * math.cos(roll)
    nf, nr = load * lr / p.wheelbase, load * lf / p.wheelbase

    wheel_speed = p.gear_ratio * (x[dyn.ENGINE] - p.engine_idle)
    drive = p.drive_stiffness * (wheel_speed - vx)
    brake = -p.brake_gain * x[dyn.BRAKE] * math.tanh(vx / 0.3)
    limit = mu * (nf + nr)
    fx = min(max(drive + brake, -limit), limit)
    fxf, fxr = fx * nf / (nf + nr), fx * nr / (nf + nr)

    # Slip angles from wheel-frame velocities, so a stationary car feels no force.
    cd, sd = math.cos(delta), math.sin(delta)
    vyf = vy + lf * r
    long_f, lat_f = vx * cd + vyf * sd, -vx * sd + vyf * cd
    alpha_f = math.atan(lat_f / max(abs(long_f), 0.5))
    alpha_r = math.atan((vy - lr * r) / max(abs(vx), 0.5))
    caps = []
    for fxa, n in ((fxf, nf), (fxr, nr)):
        ratio = min(abs(fxa) / max(mu * n, 1e-9), 1.0)
        caps.append(mu * n * math.sqrt(1.0 - ratio * ratio))
    fyf = _tire_lateral(alpha_f, p.cornering_front, caps[0], p.tire_shape, mu * nf)
    fyr = _tire_lateral(alpha_r, p.cornering_rear, caps[1], p.tire_shape, mu * nr)
    return fxf, fyf, fxr, fyr, nf, nr


def _substep(x: np.ndarray, u: np.ndarray, tmap: TerrainMap | None, p: SimParams, h: float) -> np.ndarray:
    px, py, yaw = x[dyn.X], x[dyn.Y], x[dyn.YAW]
    roll, pitch, mu = _local_terrain(tmap, px, py, yaw)
    mu *= p.friction_scale
    vx, vy, r = x[dyn.VX], x[dyn.VY], x[dyn.YAW_RATE]
    lf, lr = p.wheelbase - p.cg_to_rear, p.cg_to_rear
    delta = p.steer_ratio * x[dyn.STEER]
    cd, sd = math.cos(delta), math.sin(delta)
    fxf, fyf, fxr, fyr, _, _ = axle_forces(x, roll, pitch, mu, p)

    ax = (fxf * cd - fyf * sd + fxr) / p.mass - G * math.sin(pitch)
    ax -= p.rolling_resistance * G * math.cos(pitch) * math.tanh(vx / 0.5)
    ax -= p.aero_drag * vx * abs(vx) / p.mass
    ay = (fxf * sd + fyf * cd + fyr) / p.mass - G * math.cos(pitch) * math.sin(roll)
    rdot = (lf * (fxf * sd + fyf * cd) - lr * fyr) / p.yaw_inertia

    out = x.copy()
    c, s = math.cos(yaw), math.sin(yaw)
    out[dyn.X] = px + h * (c * vx - s * vy)
    out[dyn.Y] = py + h * (s * vx + c * vy)
    out[dyn.YAW] = (yaw + h * r + math.pi) % (2 * math.pi) - math.pi
    # The rotating-frame terms are applied as an exact rotation of the velocity
    # vector, so they never inject kinetic energy.
    cr, sr = math.cos(r * h), math.sin(r * h)
    vx_n = cr * vx + sr * vy + h * ax
    vy_n = -sr * vx + cr * vy + h * ay
    r_n = r + h * rdot

    w = min(max((abs(vx_n) - p.blend_low) / (p.blend_high - p.blend_low), 0.0), 1.0)
    if w < 1.0:
        delta_n = p.steer_ratio * out[dyn.STEER]
        r_kin = vx_n * math.tan(delta_n) / p.wheelbase
        vy_n = w * vy_n + (1.0 - w) * lr * r_kin
        r_n = w * r_n + (1.0 - w) * r_kin
    out[dyn.VX], out[dyn.VY], out[dyn.YAW_RATE] = vx_n, vy_n, r_n

    # Actuators.
    u_thr = min(max(u[0], 0.0), 1.0)
    u_brk = min(max(u[1], 0.0), 1.0)
    u_str = min(max(u[2], -1.0), 1.0)
    out[dyn.BRAKE] = min(max(x[dyn.BRAKE] + h * (u_brk - x[dyn.BRAKE]) / p.brake_time_constant, 0.0), 1.0)
    steer_rate = (u_str * p.steer_column_max - x[dyn.STEER]) / p.steer_time_constant
    out[dyn.STEER] = x[dyn.STEER] + h * steer_rate
    out[dyn.STEER_RATE] = steer_rate
    target = p.engine_idle + p.engine_throttle_gain * u_thr
    slip = p.gear_ratio * (x[dyn.ENGINE] - p.engine_idle) - vx
    out[dyn.ENGINE] = max(
        x[dyn.ENGINE] + h * ((target - x[dyn.ENGINE]) / p.engine_time_constant - p.engine_load * slip), 0.0
    )
    return out


def sim_step(s: SimState, control, tmap: TerrainMap | None, p: SimParams = DEPLOY_PARAMS,
             dt: float = dyn.DT) -> SimState:
    """Advance the true state by ``dt`` seconds (split into ``p.substeps``)."""
    u = np.asarray(control, dtype=float)
    x = s.x
    h = dt / p.substeps
    for _ in range(p.substeps):
        x = _substep(x, u, tmap, p, h)
    return SimState(x, s.t + dt)


def kinetic_energy(x: np.ndarray, p: SimParams) -> float:
    return 0.5 * p.mass * (x[dyn.VX] ** 2 + x[dyn.VY] ** 2) + 0.5 * p.yaw_inertia * x[dyn.YAW_RATE] ** 2


def lateral_loading(vx, yaw_rate, roll, p) -> tuple[float, float]:
    """Mass-normalized left/right loading from lateral acceleration and roll."""
    k = p.cg_height / p.track_width
    t = vx * yaw_rate / G + math.tan(roll)
    return min(max(0.5 - k * t, 0.0), 1.0), min(max(0.5 + k * t, 0.0), 1.0)


def measure(x: np.ndarray, rng: np.random.Generator, std: dict | None = None) -> np.ndarray:
    """True state plus zero-mean Gaussian noise on pose and velocities."""
    std = std or MEASUREMENT_STD
    sigma = np.zeros(dyn.STATE_DIM)
    sigma[[dyn.X, dyn.Y]] = std["position"]
    sigma[dyn.YAW] = std["yaw"]
    sigma[dyn.VEL] = std["velocity"]
    z = x + sigma * rng.standard_normal(dyn.STATE_DIM)
    z[dyn.YAW] = (z[dyn.YAW] + math.pi) % (2 * math.pi) - math.pi
    return z


# --- closed loop -------------------------------------------------------------


class Controller(Protocol):
    def reset(self, tmap: TerrainMap, waypoints: np.ndarray, seed: int) -> None: ...

    def act(self, x_meas: np.ndarray, target: int, theta: np.ndarray, steps_since_last: int) -> tuple[np.ndarray, float]: ...


class Adapter(Protocol):
    def observe(self, x: np.ndarray, u: np.ndarray, y: np.ndarray) -> bool: ...

    @property
    def theta(self) -> np.ndarray: ...


@dataclass
class FrozenTheta:
    """Adapter stand-in that never changes ``theta`` (no adaptation)."""

    n_theta: int

    def observe(self, x, u, y) -> bool:
        return False

    @property
    def theta(self) -> np.ndarray:
        return np.zeros(self.n_theta)


@dataclass
class EpisodeLimits:
    max_time: float = 90.0
    waypoint_radius: float = 4.0
    control_hz: float = 30.0
    adapt_every: int = 10  # simulator steps per adaptation window (5 Hz)
    r_limit: float = 0.25


@dataclass
class EpisodeLog:
    t: np.ndarray
    x_true: np.ndarray
    x_meas: np.ndarray
    u: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    cost: np.ndarray
    completed: bool
    completion_time: float
    waypoints_reached: int
    off_map_steps: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    def write(self, path: str | Path) -> tuple[Path, Path]:
        """JSON-lines step records plus a summary JSON next to them."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        jl = path.with_suffix(".jsonl")
        with jl.open("w") as fh:
            for k in range(len(self)):
                rec = {
                    "t": float(self.t[k]),
                    "x_true": self.x_true[k].tolist(),
                    "x_meas": self.x_meas[k].tolist(),
                    "u": self.u[k].tolist(),
                    "y": self.y[k].tolist(),
                    "theta": self.theta[k].tolist(),
                    "cost": float(self.cost[k]),
                }
                fh.write(json.dumps(rec) + "\n")
        summary = path.with_suffix(".summary.json")
        summary.write_text(json.dumps(self.summary(), indent=2))
        return jl, summary

    def summary(self) -> dict:
        speed = np.hypot(self.x_true[:, dyn.VX], self.x_true[:, dyn.VY]) if len(self) else np.zeros(0)
        return {
            "completed": self.completed,
            "completion_time": self.completion_time,
            "waypoints_reached": self.waypoints_reached,
            "steps": len(self),
            "average_speed": float(speed.mean()) if len(self) else 0.0,
            "off_map_steps": self.off_map_steps,
            **self.meta,
        }

    @classmethod
    def read(cls, path: str | Path) -> "EpisodeLog":
        path = Path(path)
        recs = [json.loads(line) for line in path.with_suffix(".jsonl").read_text().splitlines() if line]
        summary = json.loads(path.with_suffix(".summary.json").read_text())

        def col(name, width):
            return np.array([r[name] for r in recs], dtype=float).reshape(len(recs), width)

        known = {"completed", "completion_time", "waypoints_reached", "steps", "average_speed", "off_map_steps"}
        n_theta = len(recs[0]["theta"]) if recs else 0
        return cls(
            t=np.array([r["t"] for r in recs]),
            x_true=col("x_true", dyn.STATE_DIM),
            x_meas=col("x_meas", dyn.STATE_DIM),
            u=col("u", dyn.CONTROL_DIM),
            y=col("y", dyn.TERRAIN_DIM),
            theta=col("theta", n_theta),
            cost=np.array([r["cost"] for r in recs]),
            completed=summary["completed"],
            completion_time=summary["completion_time"],
            waypoints_reached=summary["waypoints_reached"],
            off_map_steps=summary["off_map_steps"],
            meta={k: v for k, v in summary.items() if k not in known},
        )


def run_episode(
    tmap: TerrainMap,
    controller: Controller,
    adapter: Adapter,
    waypoints,
    limits: EpisodeLimits | None = None,
    start: SimState | None = None,
    params: SimParams = DEPLOY_PARAMS,
    seed: int = 0,
    noise_std: dict | None = None,
) -> EpisodeLog:
    """Closed loop: 50 Hz simulation, ``control_hz`` replanning, windowed adaptation.

    Terminates when the last waypoint is reached or at ``limits.max_time``;
    timeouts are reported through ``completed = False``.
    """
    limits = limits or EpisodeLimits()
    waypoints = np.atleast_2d(np.asarray(waypoints, dtype=float))
    if waypoints.size == 0:
        raise ValueError("waypoint list must not be empty")
    if start is None:
        heading = math.atan2(waypoints[0, 1] - waypoints[-1, 1], waypoints[0, 0] - waypoints[-1, 0])
        start = initial_state(waypoints[-1, 0], waypoints[-1, 1], heading, 0.0, params)
    # Independent streams: measurement noise vs. everything the controller samples.
    noise_rng = np.random.default_rng([seed, 1])
    controller.reset(tmap, waypoints, seed)

    state = start
    target = 0
    reached = 0
    completion = math.nan
    n_max = int(round(limits.max_time / dyn.DT))
    control_period = 1.0 / limits.control_hz
    next_plan = 0.0
    steps_since = 0
    u = np.array([0.0, 1.0, 0.0])
    cost = math.nan
    rec_t, rec_x, rec_z, rec_u, rec_y, rec_th, rec_c = [], [], [], [], [], [], []
    off_map = 0

    def at_target(x):
        return math.hypot(x[dyn.X] - waypoints[target, 0], x[dyn.Y] - waypoints[target, 1]) <= limits.waypoint_radius

    for k in range(n_max + 1):
        while target < len(waypoints) and at_target(state.x):
            target += 1
            reached += 1
        if target >= len(waypoints):
            completion = state.t
            break
        if k == n_max:
            break
        z = measure(state.x, noise_rng, noise_std)
        y, off = sense_terrain(tmap, state.x[dyn.POSE])
        off_map += int(off)
        theta = np.asarray(adapter.theta)
        if state.t + 1e-9 >= next_plan:
            u, cost = controller.act(z, target, theta, steps_since)
            u = np.clip(u, dyn.CONTROL_LOW, dyn.CONTROL_HIGH)
            next_plan += control_period
            steps_since = 0
        rec_t.append(state.t)
        rec_x.append(state.x)
        rec_z.append(z)
        rec_u.append(u)
        rec_y.append(y)
        rec_th.append(theta)
        rec_c.append(cost)
        adapter.observe(z, u, y)
        state = sim_step(state, u, tmap, params)
        steps_since += 1

    n_theta = len(np.asarray(adapter.theta))

    def arr(rows, width):
        return np.array(rows, dtype=float).reshape(len(rows), width)

    return EpisodeLog(
        t=np.array(rec_t, dtype=float),
        x_true=arr(rec_x, dyn.STATE_DIM),
        x_meas=arr(rec_z, dyn.STATE_DIM),
        u=arr(rec_u, dyn.CONTROL_DIM),
        y=arr(rec_y, dyn.TERRAIN_DIM),
        theta=arr(rec_th, n_theta),
        cost=np.array(rec_c, dtype=float),
        completed=not math.isnan(completion),
        completion_time=completion if not math.isnan(completion) else limits.max_time,
        waypoints_reached=reached,
        off_map_steps=off_map,
    )


# --- data-collection driver -----------------------------------------------------


@dataclass
class PurePursuit:
    """Geometric path follower with a speed PI loop and exploration noise.

    Used to drive the data-generation world; cheap enough to collect many runs.
    """

    params: SimParams = DATA_GEN_PARAMS
    lookahead: float = 6.0
    target_speed: float = 6.0
    speed_gain: float = 0.3
    noise_std: float = 0.1
    noise_corr: float = 0.97
    speed_change_prob: float = 0.01
    speed_range: tuple[float, float] = (2.5, 8.0)
    _rng: np.random.Generator = field(init=False, repr=False, default=None)
    _noise: np.ndarray = field(init=False, repr=False, default=None)
    _waypoints: np.ndarray = field(init=False, repr=False, default=None)
    _speed: float = field(init=False, repr=False, default=0.0)

    def reset(self, tmap, waypoints, seed):
        self._rng = np.random.default_rng([seed, 2])
        self._noise = np.zeros(3)
        self._waypoints = np.asarray(waypoints, dtype=float)
        self._speed = self.target_speed

    def act(self, x, target, theta, steps_since_last):
        p = self.params
        wp = self._waypoints[min(target, len(self._waypoints) - 1)]
        dx, dy = wp[0] - x[dyn.X], wp[1] - x[dyn.Y]
        alpha = math.atan2(dy, dx) - x[dyn.YAW]
        alpha = (alpha + math.pi) % (2 * math.pi) - math.pi
        ld = max(self.lookahead, math.hypot(dx, dy) * 0.5)
        delta = math.atan2(2.0 * p.wheelbase * math.sin(alpha), ld)
        steer = delta / p.steer_ratio / p.steer_column_max
        if self._rng.random() < self.speed_change_prob:
            self._speed = self._rng.uniform(*self.speed_range)
        err = self._speed - x[dyn.VX]
        throttle = min(0.3 + self.speed_gain * err, 0.8)
        brake = -0.3 * err if err < -1.0 else 0.0
        self._noise = self.noise_corr * self._noise + math.sqrt(1 - self.noise_corr**2) * self.noise_std * (
            self._rng.standard_normal(3)
        )
        u = np.array([throttle, brake, steer]) + self._noise
        return np.clip(u, dyn.CONTROL_LOW, dyn.CONTROL_HIGH), 0.0
