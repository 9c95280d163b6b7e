"""Watch the Kalman filter pin down a constant residual on the vehicle model.

A random network defines the residual; the "true" vehicle uses a fixed
last-layer vector ``theta_star`` and the filter starts from zero.  Prints the
relative parameter error after every 50 updates (10 simulator steps each).

    python3 demos/identify_residual.py
"""

import jax
import jax.numpy as jnp
import numpy as np

import metaadapt  # noqa: F401  (64-bit JAX)
from metaadapt import adaptation as ad
from metaadapt import dynamics as dyn
from metaadapt import network as nn

PSI = dyn.ParametricParams()
STEPS, NOISE = 5000, 0.002


def excitation(n):
    t = np.arange(n) * dyn.DT
    return np.stack([
        0.35 + 0.2 * np.sin(0.3 * t),
        0.05 * (np.sin(0.7 * t) > 0.8),
        0.6 * np.sin(0.25 * t) + 0.2 * np.sin(1.3 * t),
    ], axis=1)


def main():
    net = nn.init_network(jax.random.PRNGKey(0), n_hidden=32, n_in=32, n_w=8, output_scale=300.0)
    rng = np.random.default_rng(0)
    theta_star = np.r_[rng.normal(0, 0.5, net.n_w), rng.normal(0, 100, net.n_out)]

    controls = excitation(STEPS)
    terrains = np.tile(np.asarray(dyn.flat_terrain()), (STEPS, 1))
    x0 = np.zeros(dyn.STATE_DIM)
    x0[dyn.VX] = 4.0
    x0[dyn.ENGINE] = PSI.engine_idle + 4.0 / PSI.gear_ratio
    states = np.vstack([x0, np.asarray(dyn.rollout(x0, controls, terrains, net, jnp.asarray(theta_star), PSI))])
    states[1:, dyn.VEL] += rng.normal(0, NOISE, (STEPS, 3))

    base = ad.default_filter_params(net)
    fp = ad.FilterParams(p0=base.p0, q=1e-8 * base.p0, r=jnp.full(3, 2 * NOISE**2), eps=base.eps, h=10)
    run = jax.jit(lambda ks, s, u, y: ad.adapt_window(ks, s, u, y, net, PSI, fp))
    ks = fp.initial_state()
    chunk = 50 * fp.h
    print(f"{'updates':>8}  {'rel. error':>10}")
    for start in range(0, STEPS, chunk):
        sl = slice(start, start + chunk)
        ks, _ = run(ks, states[start:start + chunk + 1], controls[sl], terrains[sl])
        err = np.linalg.norm(np.asarray(ks.theta) - theta_star) / np.linalg.norm(theta_star)
        print(f"{(start + chunk) // fp.h:>8}  {err:>10.4f}")


if __name__ == "__main__":
    main()
