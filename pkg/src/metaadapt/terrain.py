"""Procedural terrain maps and terrain sensing.

Grids are node-based and indexed ``[ix, iy]``: node ``(ix, iy)`` sits at world
position ``(ix * cell, iy * cell)``.  Heights come from band-limited Gaussian
noise rescaled to a category-dependent maximum slope; obstacles are discs
drawn from a seeded stream so that the dense variant of a map contains the
sparse one.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from scipy import ndimage

from metaadapt import dynamics as dyn

CATEGORIES = ("shallow-sparse", "shallow-dense", "steep-sparse", "steep-dense")
MAX_SLOPE_DEG = {"shallow": 9.0, "steep": 28.0}
OBSTACLE_COUNT = {"sparse": 25, "dense": 100}
FRICTION_RANGE = (0.2, 1.2)
FORMAT_VERSION = 1
MAX_PLACEMENT_DRAWS = 100_000

logger = logging.getLogger(__name__)


class _ScalarMath:
    """numpy-style names over :mod:`math`, for fast scalar evaluation."""

    sin, cos, sqrt = staticmethod(math.sin), staticmethod(math.cos), staticmethod(math.sqrt)
    arctan, arcsin = staticmethod(math.atan), staticmethod(math.asin)


SCALAR = _ScalarMath()


@dataclass
class TerrainMap:
    height: np.ndarray
    friction: np.ndarray
    obstacle: np.ndarray  # 1 inside obstacles, 0 elsewhere
    cell_size: float
    category: str = "custom"
    seed: int = 0
    grad_x: np.ndarray = field(init=False, repr=False)
    grad_y: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not (self.height.shape == self.friction.shape == self.obstacle.shape):
            raise ValueError("terrain grids must share a shape")
        if not np.all(np.isfinite(self.height)):
            raise ValueError("heights must be finite")
        lo, hi = FRICTION_RANGE
        if np.any(self.friction < lo - 1e-12) or np.any(self.friction > hi + 1e-12):
            raise ValueError("friction outside [0.2, 1.2]")
        self.grad_x, self.grad_y = np.gradient(self.height, self.cell_size, self.cell_size)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height.shape

    @property
    def extent(self) -> tuple[float, float]:
        return ((self.shape[0] - 1) * self.cell_size, (self.shape[1] - 1) * self.cell_size)

    def contains(self, px: float, py: float) -> bool:
        ex, ey = self.extent
        return 0.0 <= px <= ex and 0.0 <= py <= ey

    def slope_deg(self) -> np.ndarray:
        return np.degrees(np.arctan(np.hypot(self.grad_x, self.grad_y)))

    def friction_at(self, px: float, py: float) -> float:
        return bilinear(self.friction, px, py, self.cell_size)

    # --- serialization: flat float64 grid + JSON header -------------------

    def save(self, path: str | Path) -> tuple[Path, Path]:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = np.stack([self.height, self.friction, self.obstacle]).astype("<f8")
        bin_path = path.with_suffix(".bin")
        data.tofile(bin_path)
        header = {
            "format": "metaadapt-terrain",
            "version": FORMAT_VERSION,
            "layers": ["height", "friction", "obstacle"],
            "shape": list(self.shape),
            "dtype": "<f8",
            "cell_size": self.cell_size,
            "category": self.category,
            "seed": self.seed,
        }
        json_path = path.with_suffix(".json")
        json_path.write_text(json.dumps(header, indent=2))
        return json_path, bin_path

    @classmethod
    def load(cls, path: str | Path) -> "TerrainMap":
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text())
        if header.get("format") != "metaadapt-terrain" or header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported terrain file {path}")
        shape = tuple(header["shape"])
        data = np.fromfile(path.with_suffix(".bin"), dtype=header["dtype"]).reshape(3, *shape)
        return cls(data[0].copy(), data[1].copy(), data[2].copy(), header["cell_size"],
                   header["category"], header["seed"])


def _smooth_noise(rng: np.random.Generator, shape, sigmas_cells, weights) -> np.ndarray:
    out = np.zeros(shape)
    for sigma, w in zip(sigmas_cells, weights):
        f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
        out += w * f / f.std()
    return out


def figure_eight(center=(100.0, 100.0), scale: float = 55.0, n: int = 12) -> np.ndarray:
    """Waypoints on a figure-8 (lemniscate of Gerono) loop."""
    s = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    return np.stack([center[0] + scale * np.sin(s), center[1] + 0.6 * scale * np.sin(s) * np.cos(s)], axis=1)


def generate_map(category: str, seed: int, size: float = 200.0, cell_size: float = 0.5,
                 keep_clear: np.ndarray | None = None, clear_radius: float = 8.0) -> TerrainMap:
    """Procedural map for one of :data:`CATEGORIES`; deterministic in ``seed``."""
    if category not in CATEGORIES:
        raise ValueError(f"unknown map category {category!r}; expected one of {CATEGORIES}")
    steepness, density = category.split("-")
    n = int(round(size / cell_size)) + 1
    rng = np.random.default_rng(seed)
    height = _smooth_noise(rng, (n, n), [24.0 / cell_size, 8.0 / cell_size], [1.0, 0.35])
    gx, gy = np.gradient(height, cell_size, cell_size)
    max_grad = np.hypot(gx, gy).max()
    height *= math.tan(math.radians(MAX_SLOPE_DEG[steepness])) / max_grad

    fr_noise = _smooth_noise(rng, (n, n), [15.0 / cell_size], [1.0])
    base = rng.uniform(0.55, 0.75)
    friction = np.clip(base + 0.18 * fr_noise, *FRICTION_RANGE)

    # Obstacle stream is drawn after everything else so sparse/dense share it.
    ob_rng = np.random.default_rng([seed, 7])
    if keep_clear is None:
        keep_clear = figure_eight()
    candidates = []
    for _ in range(MAX_PLACEMENT_DRAWS):
        if len(candidates) == max(OBSTACLE_COUNT.values()):
            break
        cx, cy = ob_rng.uniform(10.0, size - 10.0, size=2)
        r = ob_rng.uniform(1.0, 3.5)
        if np.min(np.hypot(keep_clear[:, 0] - cx, keep_clear[:, 1] - cy)) > clear_radius + r:
            candidates.append((cx, cy, r))
    if len(candidates) < OBSTACLE_COUNT[density]:
        logger.warning("placed %d of %d obstacles: keep-clear zone covers most of the map",
                       len(candidates), OBSTACLE_COUNT[density])
    xs = np.arange(n) * cell_size
    gxs, gys = np.meshgrid(xs, xs, indexing="ij")
    obstacle = np.zeros((n, n))
    for cx, cy, r in candidates[: OBSTACLE_COUNT[density]]:
        obstacle[np.hypot(gxs - cx, gys - cy) <= r] = 1.0
    return TerrainMap(height, friction, obstacle, cell_size, category, seed)


def flat_map(size: float = 50.0, cell_size: float = 0.5, friction: float = 0.9) -> TerrainMap:
    n = int(round(size / cell_size)) + 1
    return TerrainMap(np.zeros((n, n)), np.full((n, n), friction), np.zeros((n, n)), cell_size, "flat")


# --- sensing -------------------------------------------------------------------


def bilinear(grid: np.ndarray, px: float, py: float, cell: float) -> float:
    fx = min(max(px / cell, 0.0), grid.shape[0] - 1.000001)
    fy = min(max(py / cell, 0.0), grid.shape[1] - 1.000001)
    ix, iy = int(fx), int(fy)
    ax, ay = fx - ix, fy - iy
    g = grid
    return float(
        (1 - ax) * (1 - ay) * g[ix, iy] + ax * (1 - ay) * g[ix + 1, iy]
        + (1 - ax) * ay * g[ix, iy + 1] + ax * ay * g[ix + 1, iy + 1]
    )


def attitude_from_gradient(hx, hy, yaw, xp=np):
    """Roll and pitch of a vehicle resting on a plane with gradient ``(hx, hy)``.

    Pitch is positive nose-up, roll positive with the left side up.
    """
    c, s = xp.cos(yaw), xp.sin(yaw)
    along = hx * c + hy * s
    left = -hx * s + hy * c
    pitch = xp.arctan(along)
    roll = xp.arcsin(left / xp.sqrt(1.0 + hx * hx + hy * hy))
    return roll, pitch


def normal_in_yaw_frame(hx, hy, yaw, xp=np):
    c, s = xp.cos(yaw), xp.sin(yaw)
    norm = xp.sqrt(1.0 + hx * hx + hy * hy)
    nx, ny, nz = -hx / norm, -hy / norm, 1.0 / norm
    return c * nx + s * ny, -s * nx + c * ny, nz


def wheel_world_positions(pose, psi: dyn.ParametricParams):
    lf = psi.wheelbase - psi.cg_to_rear
    half = 0.5 * psi.track_width
    bx = np.array([lf, lf, -psi.cg_to_rear, -psi.cg_to_rear])
    by = np.array([half, -half, half, -half])
    c, s = math.cos(pose[2]), math.sin(pose[2])
    return pose[0] + c * bx - s * by, pose[1] + s * bx + c * by


def sense_terrain(tmap: TerrainMap, pose, psi: dyn.ParametricParams | None = None) -> tuple[np.ndarray, bool]:
    """Terrain input ``y`` (14,) at ``pose = (x, y, yaw)`` and an off-map flag.

    Off-map poses return flat terrain.
    """
    psi = psi or dyn.ParametricParams()
    px, py, yaw = float(pose[0]), float(pose[1]), float(pose[2])
    if not tmap.contains(px, py):
        return np.asarray(dyn.flat_terrain()), True
    cell = tmap.cell_size
    hx = bilinear(tmap.grad_x, px, py, cell)
    hy = bilinear(tmap.grad_y, px, py, cell)
    roll, pitch = attitude_from_gradient(hx, hy, yaw, xp=SCALAR)
    out = np.empty(dyn.TERRAIN_DIM)
    out[0], out[1] = roll, pitch
    wx, wy = wheel_world_positions((px, py, yaw), psi)
    for k in range(4):
        ghx = bilinear(tmap.grad_x, wx[k], wy[k], cell)
        ghy = bilinear(tmap.grad_y, wx[k], wy[k], cell)
        n = np.array(normal_in_yaw_frame(ghx, ghy, yaw, xp=SCALAR))
        out[2 + 3 * k : 5 + 3 * k] = n / np.linalg.norm(n)
    return out, False


# --- jax version used inside planner rollouts -----------------------------------


class TerrainGrids(NamedTuple):
    grad_x: jax.Array
    grad_y: jax.Array
    cell_size: float


def terrain_grids(tmap: TerrainMap, dtype=jnp.float32) -> TerrainGrids:
    return TerrainGrids(jnp.asarray(tmap.grad_x, dtype), jnp.asarray(tmap.grad_y, dtype), tmap.cell_size)


def bilinear_jax(grid: jax.Array, px, py, cell) -> jax.Array:
    fx = jnp.clip(px / cell, 0.0, grid.shape[0] - 1.0001)
    fy = jnp.clip(py / cell, 0.0, grid.shape[1] - 1.0001)
    ix = jnp.floor(fx).astype(jnp.int32)
    iy = jnp.floor(fy).astype(jnp.int32)
    ax, ay = fx - ix, fy - iy
    return (
        (1 - ax) * (1 - ay) * grid[ix, iy] + ax * (1 - ay) * grid[ix + 1, iy]
        + (1 - ax) * ay * grid[ix, iy + 1] + ax * ay * grid[ix + 1, iy + 1]
    )


def sense_terrain_jax(grids: TerrainGrids, pose: jax.Array, psi: dyn.ParametricParams) -> jax.Array:
    """Same as :func:`sense_terrain` for in-map poses, traceable by jax."""
    px, py, yaw = pose[0], pose[1], pose[2]
    hx = bilinear_jax(grids.grad_x, px, py, grids.cell_size)
    hy = bilinear_jax(grids.grad_y, px, py, grids.cell_size)
    roll, pitch = attitude_from_gradient(hx, hy, yaw, xp=jnp)
    xs, ys = dyn.wheel_positions(psi)
    c, s = jnp.cos(yaw), jnp.sin(yaw)
    wx = px + c * xs - s * ys
    wy = py + s * xs + c * ys
    ghx = bilinear_jax(grids.grad_x, wx, wy, grids.cell_size)
    ghy = bilinear_jax(grids.grad_y, wx, wy, grids.cell_size)
    nx, ny, nz = normal_in_yaw_frame(ghx, ghy, yaw, xp=jnp)
    normals = jnp.stack([nx, ny, nz * jnp.ones_like(nx)], axis=1).reshape(-1)
    return jnp.concatenate([jnp.stack([roll, pitch]), normals]).astype(pose.dtype)
