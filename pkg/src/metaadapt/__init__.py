"""Meta-learned online dynamics model adaptation for sampling-based MPC.

The package is organised by subsystem:

- :mod:`metaadapt.dynamics` -- hybrid vehicle dynamics (parametric + residual)
- :mod:`metaadapt.network` -- residual force network with an adaptable
  last-layer ensemble
- :mod:`metaadapt.adaptation` -- Kalman-filter parameter adaptation and the
  sliding-window least-squares baseline
- :mod:`metaadapt.meta` -- offline meta-learning through the filter
- :mod:`metaadapt.mppi` -- MPPI controller, stage costs and cost-to-go fields
- :mod:`metaadapt.terrain` / :mod:`metaadapt.sim` -- procedural maps and the
  ground-truth bicycle simulator
- :mod:`metaadapt.experiment` -- data collection, evaluation and reports
"""

import jax

# Filter and gradient checks are done in double precision; the planner casts
# down to float32 explicitly.
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
