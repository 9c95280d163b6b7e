"""One closed-loop episode of the MPPI planner on the evaluation course.

Without arguments the planner uses the untrained parametric model (no
residual, no adaptation).  Given a checkpoint directory written by
``metaadapt train``, it uses the meta-learned model with online adaptation.
Prints a progress line every two seconds.

    python3 demos/plan_on_terrain.py [CHECKPOINT_DIR]
"""

import sys

import jax
import numpy as np

import metaadapt  # noqa: F401  (64-bit JAX)
from metaadapt import dynamics as dyn
from metaadapt import experiment as ex
from metaadapt import mppi
from metaadapt import network as nn
from metaadapt import sim


def main():
    cfg = ex.RunConfig.resolve(overrides={"episode.max_time": 30.0})
    waypoints = ex.course_waypoints(cfg)
    tmap = ex.evaluation_map(cfg, "shallow-sparse")
    if len(sys.argv) > 1:
        model = ex.load_models(sys.argv[1], ["meta-adaptation"])["meta-adaptation"]
        net, psi, adapter = model.net, model.psi, ex.make_adapter("meta-adaptation", model, cfg)
    else:
        net = nn.init_network(jax.random.PRNGKey(0), output_scale=0.0)
        psi, adapter = dyn.ParametricParams(), sim.FrozenTheta(net.n_theta)
    controller = mppi.MppiController(net, psi, cfg.mppi, cfg.cost)
    start = ex.start_state(waypoints, 3.0, sim.DEPLOY_PARAMS)
    episode = sim.run_episode(tmap, controller, adapter, waypoints, cfg.limits, start, sim.DEPLOY_PARAMS, seed=0)
    for k in range(0, len(episode), int(2.0 / dyn.DT)):
        x = episode.x_true[k]
        print(f"t={episode.t[k]:5.1f}s  pos=({x[dyn.X]:6.1f}, {x[dyn.Y]:6.1f})  speed={x[dyn.VX]:4.1f} m/s  "
              f"|theta|={np.linalg.norm(episode.theta[k]):7.2f}  "
              f"u=({episode.u[k, 0]:.2f}, {episode.u[k, 1]:.2f}, {episode.u[k, 2]:+.2f})")
    print(f"waypoints reached: {episode.waypoints_reached}/{len(waypoints)}, completed: {episode.completed}")


if __name__ == "__main__":
    main()
