"""Offline meta-learning through the adaptation filter.

Each training example is a logged trajectory segment of ``tau + T + 1``
steps.  The filter is run over the first ``tau`` steps (with a small decay
on ``theta`` for stability), the model is rolled out open-loop for ``T``
steps with the resulting ``theta``, and the weighted mean-squared state error
is the segment loss.  Gradients flow through the whole procedure to the
network, the parametric model, and the filter covariances.

Positive quantities (parametric constants, covariance diagonals, the gate
constant) are optimized in log space.
"""

from __future__ import annotations

import csv
import functools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np
import optax

from metaadapt import adaptation as ad
from metaadapt import dynamics as dyn
from metaadapt import network as nn

Array = jax.Array
log = logging.getLogger(__name__)

# Typical error scales for [x, y, yaw, vx, vy, yaw_rate]; actuator states are
# not part of the loss.
LOSS_SCALES = np.array([1.0, 1.0, 0.1, 0.5, 0.25, 0.1])
LOSS_WEIGHTS = 1.0 / LOSS_SCALES**2


@dataclass
class MetaTrainConfig:
    tau: int = 1000
    horizon: int = 250
    batch_size: int = 16
    epochs: int = 20
    pretrain_epochs: int = 5
    stride: int = 250
    lr_net: float = 1e-3
    lr_last_layer: float = 0.2  # basis and bias live in Newtons
    lr_psi: float = 3e-3
    lr_filter: float = 1e-2
    beta: float = 0.995
    h: int = 10
    loss_ceiling: float = 1e4
    seed: int = 0
    meta: bool = True  # False trains the no-adaptation baseline

    def validate(self) -> None:
        if self.tau % self.h:
            raise ValueError("tau must be divisible by h")
        for name in ("tau", "horizon", "batch_size", "epochs", "stride", "h"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.pretrain_epochs <= self.epochs:
            raise ValueError("pretrain_epochs must lie in [0, epochs]")


class TrajectorySegment(NamedTuple):
    states: np.ndarray  # (tau + T + 1, 10)
    controls: np.ndarray  # (tau + T + 1, 3)
    terrains: np.ndarray  # (tau + T + 1, 14)
    t_ref: int  # index of the reference step within the run
    run_id: str


class RunLog(NamedTuple):
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    run_id: str = ""


# --- positivity-preserving parametrization -----------------------------------


def to_raw(value):
    return jnp.log(value)


def from_raw(raw):
    return jnp.exp(raw)


def psi_to_raw(psi: dyn.ParametricParams) -> dict[str, Array]:
    return {k: jnp.log(jnp.asarray(getattr(psi, k), dtype=float)) for k in dyn.PSI_TRAINABLE}


def psi_from_raw(raw: dict[str, Array], base: dyn.ParametricParams) -> dyn.ParametricParams:
    return base._replace(**{k: jnp.exp(v) for k, v in raw.items()})


def filter_to_raw(fp: ad.FilterParams) -> dict[str, Array]:
    return {k: to_raw(jnp.asarray(getattr(fp, k), dtype=float)) for k in ("p0", "q", "r", "eps")}


def filter_from_raw(raw: dict[str, Array], beta: float, h: int) -> ad.FilterParams:
    return ad.FilterParams(
        p0=from_raw(raw["p0"]), q=from_raw(raw["q"]), r=from_raw(raw["r"]), eps=from_raw(raw["eps"]),
        beta=beta, h=h,
    )


class Model(NamedTuple):
    """Everything the deployed controller needs: ``phi``, ``psi`` and the filter."""

    net: nn.NetParams
    psi: dyn.ParametricParams
    fp: ad.FilterParams


def meta_params(model: Model) -> dict:
    """Trainable pytree of a model (the six parameter groups)."""
    net = nn.trainable(model.net)
    return {
        "net": {k: v for k, v in net.items() if k != "basis"},
        "basis": {"basis": net["basis"]},
        "psi": psi_to_raw(model.psi),
        "filter": filter_to_raw(model.fp),
    }


def model_from_params(params: dict, base: Model, beta: float | None = None) -> Model:
    net = nn.with_trainable(base.net, {**params["net"], **params["basis"]})
    psi = psi_from_raw(params["psi"], base.psi)
    fp = filter_from_raw(params["filter"], base.fp.beta if beta is None else beta, base.fp.h)
    return Model(net, psi, fp)


# --- dataset handling ---------------------------------------------------------


def slice_dataset(runs: Sequence[RunLog], tau: int, horizon: int, stride: int) -> list[TrajectorySegment]:
    """Cut runs into (possibly overlapping) segments of ``tau + horizon + 1`` steps.

    Segments never span two runs.  Runs too short for a single segment are
    skipped and counted in a warning.
    """
    length = tau + horizon + 1
    segments: list[TrajectorySegment] = []
    skipped = 0
    for run in runs:
        n = len(run.x)
        if n < length:
            skipped += 1
            continue
        for start in range(0, n - length + 1, stride):
            sl = slice(start, start + length)
            segments.append(
                TrajectorySegment(run.x[sl], run.u[sl], run.y[sl], start + tau, run.run_id)
            )
    if skipped:
        log.warning("skipped %d run(s) shorter than %d steps", skipped, length)
    return segments


def stack_segments(segments: Sequence[TrajectorySegment]) -> tuple[Array, Array, Array]:
    return (
        jnp.asarray(np.stack([s.states for s in segments])),
        jnp.asarray(np.stack([s.controls for s in segments])),
        jnp.asarray(np.stack([s.terrains for s in segments])),
    )


# --- loss -------------------------------------------------------------------------


def state_error(pred: Array, truth: Array) -> Array:
    """Pose/velocity error with the yaw difference wrapped."""
    d = pred[..., :6] - truth[..., :6]
    return d.at[..., dyn.YAW].set(jnp.arctan2(jnp.sin(d[..., dyn.YAW]), jnp.cos(d[..., dyn.YAW])))


def prediction_loss(pred: Array, truth: Array) -> Array:
    """``(1/T) sum_j sum_c w_c (pred - truth)^2`` over the ``T`` predicted steps."""
    err = state_error(pred, truth)
    return jnp.sum(jnp.asarray(LOSS_WEIGHTS) * jnp.square(err)) / pred.shape[0]


def adapted_theta(states, controls, terrains, model: Model, tau: int, gamma_override=None) -> Array:
    ks, _ = ad.adapt_window(
        None, states[: tau + 1], controls[:tau], terrains[:tau], model.net, model.psi, model.fp,
        training=True, gamma_override=gamma_override,
    )
    return ks.theta


def segment_loss_raw(states, controls, terrains, model: Model, tau: int, horizon: int, adapt: bool = True,
                     gamma_override=None) -> Array:
    """Loss of one segment before divergence capping."""
    if adapt:
        theta = adapted_theta(states, controls, terrains, model, tau, gamma_override)
    else:
        theta = nn.zero_theta(model.net, dtype=states.dtype)
    pred = dyn.rollout(
        states[tau], controls[tau : tau + horizon], terrains[tau : tau + horizon],
        model.net, theta, model.psi,
    )
    return prediction_loss(pred, states[tau + 1 : tau + horizon + 1])


def segment_loss(states, controls, terrains, model: Model, tau: int, horizon: int, adapt: bool = True,
                 ceiling: float = 1e4, gamma_override=None) -> Array:
    """Adapt over ``[t - tau, t]``, roll out ``T`` steps, return the weighted MSE.

    Non-finite or exploding losses are replaced by ``ceiling``.
    """
    raw = segment_loss_raw(states, controls, terrains, model, tau, horizon, adapt, gamma_override)
    ok = jnp.isfinite(raw) & (raw < ceiling)
    return jnp.where(ok, raw, ceiling)


def batch_loss(params, base: Model, states, controls, terrains, tau, horizon, adapt, ceiling,
               gamma_override=None, beta=None):
    model = model_from_params(params, base, beta)
    losses = jax.vmap(
        lambda s, u, y: segment_loss(s, u, y, model, tau, horizon, adapt, ceiling, gamma_override)
    )(states, controls, terrains)
    return jnp.sum(losses), losses


@jax.jit
def _tree_all_finite(tree) -> Array:
    leaves = jax.tree_util.tree_leaves(tree)
    return jnp.all(jnp.stack([jnp.all(jnp.isfinite(x)) for x in leaves]))


class BatchRejected(FloatingPointError):
    pass


@functools.lru_cache(maxsize=32)
def make_meta_gradient(tau: int, horizon: int, adapt: bool = True, ceiling: float = 1e4,
                       gamma_override=None, beta: float | None = None):
    """Jitted ``(params, base, states, controls, terrains) -> (loss, losses, grads)``.

    Cached per argument tuple so repeated calls reuse compiled code.
    """

    @jax.jit
    def fn(params, base, states, controls, terrains):
        (total, losses), grads = jax.value_and_grad(batch_loss, has_aux=True)(
            params, base, states, controls, terrains, tau, horizon, adapt, ceiling, gamma_override, beta
        )
        return total, losses, grads

    return fn


def meta_gradient(segments, model: Model, tau: int, horizon: int, adapt: bool = True,
                  ceiling: float = 1e4, gamma_override=None):
    """Exact gradient of the summed segment losses w.r.t. all parameter groups.

    Returns ``(total_loss, grads)`` where ``grads`` mirrors :func:`meta_params`:
    ``net`` (hidden layers, ensemble weights, output bias), ``basis``,
    ``psi`` (log-parametric constants) and ``filter`` (log ``p0, q, r, eps``).
    Raises :class:`BatchRejected` if any gradient entry is non-finite.
    """
    if len(segments) == 0:
        raise ValueError("batch must not be empty")
    states, controls, terrains = stack_segments(segments)
    fn = make_meta_gradient(tau, horizon, adapt, ceiling, gamma_override)
    total, _, grads = fn(meta_params(model), model, states, controls, terrains)
    if not bool(_tree_all_finite(grads)):
        raise BatchRejected("non-finite meta-gradient")
    return total, grads


# --- training ---------------------------------------------------------------------


def _labels(params: dict) -> dict:
    labels = {
        "net": {k: ("last" if k == "bias" else "net") for k in params["net"]},
        "basis": {"basis": "last"},
        "psi": jax.tree_util.tree_map(lambda _: "psi", params["psi"]),
        "filter": jax.tree_util.tree_map(lambda _: "filter", params["filter"]),
    }
    return labels


def make_optimizer(cfg: MetaTrainConfig, params: dict) -> optax.GradientTransformation:
    return optax.multi_transform(
        {
            "net": optax.adam(cfg.lr_net),
            "last": optax.adam(cfg.lr_last_layer),
            "psi": optax.adam(cfg.lr_psi),
            "filter": optax.adam(cfg.lr_filter),
        },
        _labels(params),
    )


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    mean_loss: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    rejected: list[int] = field(default_factory=list)
    phase: list[str] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "phase", "mean_loss", "wall_time", "rejected_batches"])
            for row in zip(self.epoch, self.phase, self.mean_loss, self.wall_time, self.rejected):
                w.writerow([row[0], row[1], repr(row[2]), f"{row[3]:.3f}", row[4]])
        return path


def train(segments: Sequence[TrajectorySegment], model: Model, cfg: MetaTrainConfig,
          callback=None) -> tuple[Model, TrainHistory]:
    """Pretrain without adaptation, then meta-train through the filter.

    With ``cfg.meta`` false every epoch is a no-adaptation epoch, which gives
    the baseline model.  Batches are drawn without replacement from a
    per-epoch permutation seeded by ``cfg.seed``.
    """
    cfg.validate()
    if len(segments) == 0:
        raise ValueError("dataset is empty")
    base = Model(model.net, model.psi, ad.FilterParams(model.fp.p0, model.fp.q, model.fp.r,
                                                        model.fp.eps, cfg.beta, cfg.h))
    params = meta_params(base)
    opt = make_optimizer(cfg, params)
    opt_state = opt.init(params)
    states, controls, terrains = stack_segments(segments)
    grad_fns = {
        adapt: make_meta_gradient(cfg.tau, cfg.horizon, adapt, cfg.loss_ceiling, beta=cfg.beta)
        for adapt in (False, True)
    }

    @jax.jit
    def apply(params, opt_state, grads):
        updates, opt_state = opt.update(grads, opt_state, params)
        return optax.apply_updates(params, updates), opt_state

    history = TrainHistory()
    rng = np.random.default_rng(cfg.seed)
    n = len(segments)
    t_start = time.perf_counter()
    for epoch in range(cfg.epochs):
        adapt = cfg.meta and epoch >= cfg.pretrain_epochs
        order = rng.permutation(n)
        total, count, rejected = 0.0, 0, 0
        for i in range(0, n, cfg.batch_size):
            idx = np.sort(order[i : i + cfg.batch_size])
            loss, losses, grads = grad_fns[adapt](params, base, states[idx], controls[idx], terrains[idx])
            if not bool(_tree_all_finite(grads)):
                rejected += 1
                log.warning("epoch %d: rejected batch with non-finite gradient", epoch)
                continue
            params, opt_state = apply(params, opt_state, grads)
            total += float(loss)
            count += len(idx)
        history.epoch.append(epoch)
        history.phase.append("meta" if adapt else "pretrain")
        history.mean_loss.append(total / max(count, 1))
        history.wall_time.append(time.perf_counter() - t_start)
        history.rejected.append(rejected)
        log.info("epoch %d (%s): mean loss %.4f", epoch, history.phase[-1], history.mean_loss[-1])
        if callback is not None:
            callback(epoch, history)
    return model_from_params(params, base, beta=1.0), history


def evaluate_loss(segments, model: Model, tau: int, horizon: int, adapt: bool, beta: float = 1.0,
                  batch_size: int = 32) -> np.ndarray:
    """Per-segment losses without gradients (used for validation)."""
    states, controls, terrains = stack_segments(segments)
    m = Model(model.net, model.psi, ad.FilterParams(model.fp.p0, model.fp.q, model.fp.r, model.fp.eps, beta,
                                                     model.fp.h))

    @jax.jit
    def fn(s, u, y):
        return jax.vmap(lambda a, b, c: segment_loss_raw(a, b, c, m, tau, horizon, adapt))(s, u, y)

    out = [np.asarray(fn(states[i : i + batch_size], controls[i : i + batch_size], terrains[i : i + batch_size]))
           for i in range(0, len(segments), batch_size)]
    return np.concatenate(out)
