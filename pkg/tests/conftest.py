"""Shared fixtures: small random networks and operating points."""

from __future__ import annotations

import jax
import jax.numpy as jnp
import numpy as np
import pytest

import metaadapt  # noqa: F401  (enables 64-bit JAX)
from metaadapt import dynamics as dyn
from metaadapt import network as nn


def make_net(seed: int = 0, n_w: int = 8, n_hidden: int = 32, n_in: int = 32, output_scale: float = 300.0):
    """A random network whose residuals are large enough to matter."""
    net = nn.init_network(jax.random.PRNGKey(seed), n_hidden=n_hidden, n_in=n_in, n_w=n_w,
                          output_scale=output_scale)
    rng = np.random.default_rng(seed)
    # Non-trivial standardization and output bias.
    return net._replace(
        bias=jnp.asarray(rng.normal(0, 10.0, net.n_out)),
        in_mean=jnp.asarray(rng.normal(0, 0.5, nn.N_ETA)),
        in_scale=jnp.asarray(rng.uniform(0.5, 5.0, nn.N_ETA)),
    )


def random_state(rng: np.random.Generator, speed: float = 6.0) -> np.ndarray:
    x = np.zeros(dyn.STATE_DIM)
    x[dyn.X:dyn.YAW + 1] = rng.uniform(-20, 20, 3)
    x[dyn.YAW] = rng.uniform(-np.pi, np.pi)
    x[dyn.VX] = rng.uniform(1.0, speed)
    x[dyn.VY] = rng.normal(0, 0.4)
    x[dyn.YAW_RATE] = rng.normal(0, 0.3)
    x[dyn.BRAKE] = rng.uniform(0.05, 0.5)
    x[dyn.STEER] = rng.uniform(-3, 3)
    x[dyn.STEER_RATE] = rng.normal(0, 1)
    x[dyn.ENGINE] = rng.uniform(150, 400)
    return x


def random_control(rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(0, 1), rng.uniform(0, 0.3), rng.uniform(-1, 1)])


def random_terrain(rng: np.random.Generator, max_tilt: float = 0.2) -> np.ndarray:
    roll, pitch = rng.uniform(-max_tilt, max_tilt, 2)
    normals = rng.normal(0, 0.1, (4, 3))
    normals[:, 2] = 1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return np.concatenate([[roll, pitch], normals.ravel()])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def net():
    return make_net(0)


@pytest.fixture(scope="session")
def psi():
    return dyn.ParametricParams()


# --- acceptance summary ---------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def acceptance_line(number: int, passed: bool, detail: str) -> str:
    """Record (and print) the one-line verdict of an acceptance criterion."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
