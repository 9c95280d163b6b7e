"""Sampling-based receding-horizon control (MPPI) on the adapted model.

Each call samples ``N`` perturbed control sequences around a nominal one,
rolls them out on :func:`metaadapt.dynamics.step` with the current adapted
``theta``, scores each with

    J = V(x_T) + sum_t [ l(x_t, u_t, y_t) + V(x_t) ]

and returns the exponentially weighted average of the samples.  ``V`` is a
cost-to-go field computed once per goal with Dijkstra's algorithm on a
traversal-cost grid; ``l`` sums a track (obstacle) cost, a rollover cost on
the minimum side loading, and control-effort, slip and speed terms.

Rollouts run in float32 for speed.
"""

from __future__ import annotations

import json
import math
from functools import partial
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import csgraph

from metaadapt import dynamics as dyn
from metaadapt import network as nn
from metaadapt.terrain import TerrainMap, TerrainGrids, bilinear_jax, sense_terrain_jax

BRAKE_CONTROL = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class MppiConfig:
    num_samples: int = 128
    horizon: int = 250
    temperature: float = 20.0
    noise_std: tuple[float, float, float] = (0.3, 0.2, 0.35)
    control_hz: float = 30.0
    smoothing: float = 0.0  # AR(1) coefficient of the sampled noise; 0 = white
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "noise_std", tuple(float(v) for v in self.noise_std))

    def validate(self) -> "MppiConfig":
        if self.num_samples < 1 or self.horizon < 1:
            raise ValueError("num_samples and horizon must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if any(s < 0 for s in self.noise_std) or len(self.noise_std) != dyn.CONTROL_DIM:
            raise ValueError("noise_std must be three non-negative values")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing must lie in [0, 1)")
        return self


@dataclass(frozen=True)
class CostConfig:
    rollover_power: float = 2.0
    r_limit: float = 0.25
    rollover_weight: float = 2.0e4
    track_weight: float = 200.0
    boundary_penalty: float = 1.0e3
    boundary_margin: float = 3.0
    control_weights: tuple[float, float, float] = (0.0, 0.5, 0.5)
    slip_weight: float = 50.0
    speed_limit: float = 9.0
    speed_weight: float = 20.0
    cost_to_go_weight: float = 0.1
    slope_cost: float = 4.0  # traversal cost per unit tan(slope) in the Dijkstra grid
    obstacle_inflation: float = 1.5  # m
    value_resolution: float = 1.0  # m, grid of the cost-to-go field

    def __post_init__(self):
        object.__setattr__(self, "control_weights", tuple(float(v) for v in self.control_weights))

    def validate(self) -> "CostConfig":
        if self.rollover_power < 1:
            raise ValueError("rollover power must be >= 1")
        if not 0.0 < self.r_limit < 1.0:
            raise ValueError("r_limit must lie in (0, 1)")
        weights = (self.rollover_weight, self.track_weight, self.boundary_penalty, self.slip_weight,
                   self.speed_weight, self.cost_to_go_weight, *self.control_weights)
        if any(w < 0 for w in weights):
            raise ValueError("cost weights must be non-negative")
        return self


# --- cost-to-go ------------------------------------------------------------------


@dataclass
class CostToGoField:
    values: np.ndarray  # inf on unreachable cells
    goal: tuple[int, int]
    cell_size: float

    def finite_values(self, margin: float = 50.0) -> np.ndarray:
        """Values with unreachable cells replaced by a large finite number."""
        finite = np.isfinite(self.values)
        cap = (self.values[finite].max() if finite.any() else 0.0) + margin
        return np.where(finite, self.values, cap)


_NEIGHBOURS = ((0, 1), (1, 0), (1, 1), (1, -1))


def grid_graph(costmap: np.ndarray, cell_size: float) -> sparse.csr_matrix:
    """8-connected graph; edge weight = step length times mean endpoint cost."""
    n0, n1 = costmap.shape
    idx = np.arange(n0 * n1).reshape(n0, n1)
    finite = np.isfinite(costmap)
    rows, cols, weights = [], [], []
    for di, dj in _NEIGHBOURS:
        i0, i1 = max(0, -di), n0 - max(0, di)
        j0, j1 = max(0, -dj), n1 - max(0, dj)
        src = (slice(i0, i1), slice(j0, j1))
        dst = (slice(i0 + di, i1 + di), slice(j0 + dj, j1 + dj))
        ok = finite[src] & finite[dst]
        rows.append(idx[src][ok])
        cols.append(idx[dst][ok])
        weights.append(math.hypot(di, dj) * cell_size * 0.5 * (costmap[src][ok] + costmap[dst][ok]))
    n = n0 * n1
    return sparse.csr_matrix(
        (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def build_cost_to_go(costmap: np.ndarray, goal: tuple[int, int], cell_size: float = 1.0) -> CostToGoField:
    """Shortest-path cost from every cell to ``goal`` (``inf`` if unreachable).

    ``costmap`` holds per-cell traversal costs ``>= 1``; ``inf`` marks cells
    that cannot be entered.
    """
    costmap = np.asarray(costmap, dtype=float)
    gi, gj = int(goal[0]), int(goal[1])
    if not (0 <= gi < costmap.shape[0] and 0 <= gj < costmap.shape[1]):
        raise ValueError(f"goal {goal} outside the {costmap.shape} grid")
    if not np.isfinite(costmap[gi, gj]):
        raise ValueError(f"goal {goal} lies on an untraversable cell")
    finite = costmap[np.isfinite(costmap)]
    if np.any(finite < 1.0) or np.any(np.isnan(costmap)):
        raise ValueError("traversal costs must be >= 1 (or inf)")
    graph = grid_graph(costmap, cell_size)
    dist = csgraph.dijkstra(graph, directed=False, indices=gi * costmap.shape[1] + gj)
    return CostToGoField(dist.reshape(costmap.shape), (gi, gj), cell_size)


def traversal_costmap(tmap: TerrainMap, cc: CostConfig) -> tuple[np.ndarray, float]:
    """Coarse Dijkstra grid from terrain slope and inflated obstacles."""
    stride = max(int(round(cc.value_resolution / tmap.cell_size)), 1)
    slope = np.hypot(tmap.grad_x, tmap.grad_y)
    cost = 1.0 + cc.slope_cost * slope
    blocked = inflated_obstacles(tmap, cc.obstacle_inflation) > 0
    cost = np.where(blocked, np.inf, cost)
    if stride > 1:
        cost = ndimage.maximum_filter(cost, size=2 * stride - 1, mode="nearest")[::stride, ::stride]
    return cost, tmap.cell_size * stride


def inflated_obstacles(tmap: TerrainMap, radius: float) -> np.ndarray:
    if radius <= 0:
        return tmap.obstacle.copy()
    dist = ndimage.distance_transform_edt(tmap.obstacle == 0) * tmap.cell_size
    return (dist <= radius).astype(float)


# --- costs ------------------------------------------------------------------------


class PlannerMap(NamedTuple):
    grad_x: jax.Array
    grad_y: jax.Array
    track: jax.Array  # obstacle cost grid at terrain resolution
    value: jax.Array  # finite cost-to-go grid
    terrain_cell: jax.Array
    value_cell: jax.Array
    extent: jax.Array  # (x_max, y_max)

    @property
    def grids(self) -> TerrainGrids:
        return TerrainGrids(self.grad_x, self.grad_y, self.terrain_cell)


def planner_map(tmap: TerrainMap, field_: CostToGoField, cc: CostConfig, dtype=jnp.float32) -> PlannerMap:
    return PlannerMap(
        grad_x=jnp.asarray(tmap.grad_x, dtype),
        grad_y=jnp.asarray(tmap.grad_y, dtype),
        track=jnp.asarray(inflated_obstacles(tmap, cc.obstacle_inflation), dtype),
        value=jnp.asarray(field_.finite_values(), dtype),
        terrain_cell=jnp.asarray(tmap.cell_size, dtype),
        value_cell=jnp.asarray(field_.cell_size, dtype),
        extent=jnp.asarray(tmap.extent, dtype),
    )


def side_loading(x, y, psi: dyn.ParametricParams, xp=jnp):
    """Mass-normalized loading ``(F_L, F_R)`` from roll and steering-induced lateral acceleration."""
    delta = psi.steer_ratio * x[dyn.STEER]
    a_lat = x[dyn.VX] ** 2 * xp.tan(delta) / psi.wheelbase
    shift = psi.cg_height / psi.track_width * (a_lat / dyn.GRAVITY + xp.tan(y[dyn.ROLL]))
    return xp.clip(0.5 - shift, 0.0, 1.0), xp.clip(0.5 + shift, 0.0, 1.0)


def rollover_penalty(min_loading, cc: CostConfig, xp=jnp):
    """``P_n``: zero above ``r_limit``, ``w (r_limit - F)^n`` below."""
    return cc.rollover_weight * xp.maximum(cc.r_limit - min_loading, 0.0) ** cc.rollover_power


def rollover_cost(x, y, psi: dyn.ParametricParams, cc: CostConfig):
    fl, fr = side_loading(x, y, psi)
    return rollover_penalty(jnp.minimum(fl, fr), cc)


def value_at(pm: PlannerMap, x):
    return bilinear_jax(pm.value, x[dyn.X], x[dyn.Y], pm.value_cell)


def track_cost(pm: PlannerMap, x, cc: CostConfig):
    return cc.track_weight * bilinear_jax(pm.track, x[dyn.X], x[dyn.Y], pm.terrain_cell)


def boundary_cost(pm: PlannerMap, x, cc: CostConfig):
    m = cc.boundary_margin
    outside = (x[dyn.X] < m) | (x[dyn.Y] < m) | (x[dyn.X] > pm.extent[0] - m) | (x[dyn.Y] > pm.extent[1] - m)
    return jnp.where(outside, cc.boundary_penalty, 0.0)


def other_cost(x, u, cc: CostConfig):
    effort = jnp.sum(jnp.asarray(cc.control_weights, dtype=u.dtype) * u**2)
    slip = jnp.arctan(x[dyn.VY] / jnp.maximum(jnp.abs(x[dyn.VX]), 1.0))
    over = jnp.maximum(jnp.abs(x[dyn.VX]) - cc.speed_limit, 0.0)
    return effort + cc.slip_weight * slip**2 + cc.speed_weight * over**2


def stage_cost(x, u, y, pm: PlannerMap, psi: dyn.ParametricParams, cc: CostConfig):
    """``l(x, u, y)`` = track + rollover + other (+ boundary outside the map margin)."""
    return (
        track_cost(pm, x, cc)
        + rollover_cost(x, y, psi, cc)
        + other_cost(x, u, cc)
        + boundary_cost(pm, x, cc)
    )


def trajectory_cost(x0, controls, theta, pm: PlannerMap, net, psi, cc: CostConfig):
    """Rollout cost ``J``; ``inf`` for rollouts that leave the finite numbers."""

    def body(x, u):
        y = sense_terrain_jax(pm.grids, x[dyn.POSE], psi)
        cost = stage_cost(x, u, y, pm, psi, cc) + cc.cost_to_go_weight * value_at(pm, x)
        return dyn.step(x, u, y, net, theta, psi), cost

    xt, costs = jax.lax.scan(body, x0, controls)
    j = jnp.sum(costs) + cc.cost_to_go_weight * value_at(pm, xt)
    ok = jnp.isfinite(j) & jnp.all(jnp.isfinite(xt))
    return jnp.where(ok, j, jnp.inf)


# --- sampling and weighting ---------------------------------------------------------


class PlanResult(NamedTuple):
    controls: jax.Array  # (T, 3) optimal sequence u*
    costs: jax.Array  # (N,) sample costs
    weights: jax.Array  # (N,) normalized weights
    fallback: jax.Array  # bool: every rollout failed, braking returned


def mppi_weights(costs, temperature):
    """Normalized ``exp(-(J - min J) / lambda)``; non-finite costs get weight 0."""
    finite = jnp.isfinite(costs)
    best = jnp.min(jnp.where(finite, costs, jnp.inf))
    w = jnp.where(finite, jnp.exp(-(costs - best) / temperature), 0.0)
    return w / jnp.sum(w)


def sample_controls(key, nominal, cfg: MppiConfig):
    """``N`` perturbed copies of ``nominal`` (T, 3), clipped to actuator bounds."""
    std = jnp.asarray(cfg.noise_std, dtype=nominal.dtype)
    eps = jax.random.normal(key, (cfg.num_samples, *nominal.shape), dtype=nominal.dtype) * std
    if cfg.smoothing > 0:
        a = cfg.smoothing

        def ar1(prev, e):
            nxt = a * prev + math.sqrt(1 - a * a) * e
            return nxt, nxt

        _, eps = jax.lax.scan(ar1, eps[:, 0], jnp.swapaxes(eps, 0, 1))
        eps = jnp.swapaxes(eps, 0, 1)
    low = jnp.asarray(dyn.CONTROL_LOW, dtype=nominal.dtype)
    high = jnp.asarray(dyn.CONTROL_HIGH, dtype=nominal.dtype)
    return jnp.clip(nominal[None] + eps, low, high)


def combine(samples, costs, temperature) -> PlanResult:
    weights = mppi_weights(costs, temperature)
    failed = ~jnp.any(jnp.isfinite(costs))
    u_star = jnp.einsum("n,ntc->tc", jnp.where(failed, 0.0, weights), samples)
    brake = jnp.broadcast_to(jnp.asarray(BRAKE_CONTROL, samples.dtype), u_star.shape)
    return PlanResult(jnp.where(failed, brake, u_star), costs, weights, failed)


def plan(cost_fn, nominal, key, cfg: MppiConfig) -> PlanResult:
    """Generic MPPI step for any batched ``cost_fn(samples (N,T,3)) -> (N,)``."""
    samples = sample_controls(key, jnp.asarray(nominal), cfg)
    return combine(samples, cost_fn(samples), cfg.temperature)


@partial(jax.jit, static_argnames=("cfg", "cc"))
def plan_vehicle(x0, nominal, key, theta, pm: PlannerMap, net, psi, cfg: MppiConfig, cc: CostConfig) -> PlanResult:
    """MPPI step on the vehicle model (arguments in the planner's dtype)."""
    samples = sample_controls(key, nominal, cfg)
    costs = jax.vmap(lambda us: trajectory_cost(x0, us, theta, pm, net, psi, cc))(samples)
    return combine(samples, costs, cfg.temperature)


# --- receding-horizon controller --------------------------------------------------------


@dataclass
class MppiController:
    """Receding-horizon controller implementing the episode-runner protocol.

    Cost-to-go fields are computed lazily per waypoint and cached per map.
    """

    net: nn.NetParams
    psi: dyn.ParametricParams
    cfg: MppiConfig = field(default_factory=MppiConfig)
    cc: CostConfig = field(default_factory=CostConfig)
    dtype: object = jnp.float32
    debug_path: Path | None = None
    initial_throttle: float = 0.3

    def __post_init__(self):
        self.cfg.validate()
        self.cc.validate()
        self._net = dyn.cast_params(self.net, self.dtype)
        self._psi = dyn.cast_params(self.psi, self.dtype)
        self._maps: dict = {}
        self._cache_key = None

    def reset(self, tmap: TerrainMap, waypoints, seed: int) -> None:
        key = (id(tmap), tmap.category, tmap.seed)
        if key != self._cache_key:
            self._maps = {}
            self._costmap, self._value_cell = traversal_costmap(tmap, self.cc)
            self._cache_key = key
        self._tmap = tmap
        self._waypoints = np.asarray(waypoints, dtype=float)
        self._key = jax.random.PRNGKey(np.uint32(seed * 7919 + self.cfg.seed))
        nominal = np.zeros((self.cfg.horizon, dyn.CONTROL_DIM))
        nominal[:, dyn.THROTTLE_CMD] = self.initial_throttle
        self._nominal = jnp.asarray(nominal, self.dtype)
        self.fallbacks = 0

    def field_for(self, target: int) -> PlannerMap:
        wp = tuple(np.round(self._waypoints[target], 6))
        if wp not in self._maps:
            cm = self._costmap
            gi = int(np.clip(round(wp[0] / self._value_cell), 0, cm.shape[0] - 1))
            gj = int(np.clip(round(wp[1] / self._value_cell), 0, cm.shape[1] - 1))
            if not np.isfinite(cm[gi, gj]):
                cm = cm.copy()
                cm[gi, gj] = 1.0
            ctg = build_cost_to_go(cm, (gi, gj), self._value_cell)
            self._maps[wp] = planner_map(self._tmap, ctg, self.cc, self.dtype)
        return self._maps[wp]

    def act(self, x_meas, target, theta, steps_since_last):
        if steps_since_last > 0:
            k = min(int(steps_since_last), self.cfg.horizon - 1)
            self._nominal = jnp.concatenate([self._nominal[k:], jnp.repeat(self._nominal[-1:], k, axis=0)])
        self._key, sub = jax.random.split(self._key)
        result = plan_vehicle(
            jnp.asarray(x_meas, self.dtype), self._nominal, sub, jnp.asarray(theta, self.dtype),
            self.field_for(target), self._net, self._psi, self.cfg, self.cc,
        )
        self._nominal = result.controls
        costs = np.asarray(result.costs, dtype=float)
        weights = np.asarray(result.weights, dtype=float)
        fallback = bool(result.fallback)
        self.fallbacks += int(fallback)
        chosen = float(np.sum(weights * np.where(np.isfinite(costs), costs, 0.0))) if not fallback else math.inf
        if self.debug_path is not None:
            with Path(self.debug_path).open("a") as fh:
                fh.write(json.dumps({
                    "sample_costs": [c if math.isfinite(c) else None for c in costs.tolist()],
                    "chosen_cost": chosen if math.isfinite(chosen) else None,
                    "theta": np.asarray(theta, dtype=float).tolist(),
                    "fallback": fallback,
                }) + "\n")
        return np.asarray(result.controls[0], dtype=float), chosen
