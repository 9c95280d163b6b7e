"""Kalman-filter adaptation of the last-layer parameters.

Every ``h`` steps the model is propagated from the latest measured state with
the current ``theta``; the sensitivity of the predicted state to ``theta`` is
accumulated along the way (the multi-step Jacobian ``H``), and a Kalman update
on the velocity channels corrects ``theta``.  Updates are scaled by a
speed-dependent gate so the filter stays quiet when the vehicle is nearly
stopped.

The jittable pieces (:func:`kalman_step`, :func:`adapt_window`) are written
with ``jax.numpy`` so the offline meta-learner can differentiate through
them.  :class:`OnlineAdapter` and :class:`SlidingLSQAdapter` wrap them for
closed-loop use.
"""

from __future__ import annotations

import csv
import functools
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from metaadapt import dynamics as dyn
from metaadapt import network as nn

Array = jax.Array
log = logging.getLogger(__name__)

THETA_NORM_LIMIT = 1e3
SINGULAR_CONDITION = 1e12


class SingularInnovationError(np.linalg.LinAlgError):
    def __init__(self, condition: float):
        super().__init__(f"innovation covariance is numerically singular (cond={condition:.3g})")
        self.condition = condition


class KalmanAdaptState(NamedTuple):
    theta: Array
    cov: Array


@functools.partial(
    jax.tree_util.register_dataclass,
    data_fields=["p0", "q", "r", "eps", "beta"],
    meta_fields=["h"],
)
@dataclass(frozen=True)
class FilterParams:
    """Filter settings; the covariances are stored by their diagonals.

    ``r`` lives in the 3-d measured-velocity space.  ``beta`` is the per-cycle
    decay applied only in training mode.
    """

    p0: Array  # (n_theta,)
    q: Array  # (n_theta,)
    r: Array  # (3,)
    eps: Array  # m^2/s^2
    beta: float = 1.0
    h: int = 10

    def validate(self) -> None:
        for name in ("p0", "q", "r"):
            if not np.all(np.asarray(getattr(self, name)) > 0):
                raise ValueError(f"{name} diagonal must be strictly positive")
        if not float(self.eps) > 0:
            raise ValueError("eps must be positive")
        if not 0 < float(self.beta) <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.h < 1:
            raise ValueError("update interval h must be >= 1")

    def initial_state(self) -> KalmanAdaptState:
        p0 = jnp.asarray(self.p0)
        return KalmanAdaptState(jnp.zeros_like(p0), jnp.diag(p0))


def default_filter_params(net: nn.NetParams, h: int = 10, beta: float = 1.0) -> FilterParams:
    """Hand-tuned starting point used before meta-learning."""
    p0 = np.concatenate([np.full(net.n_w, 1.0), np.full(net.n_out, 200.0**2)])
    q = 1e-3 * p0
    return FilterParams(
        p0=jnp.asarray(p0), q=jnp.asarray(q), r=jnp.asarray([0.05, 0.05, 0.02]) ** 2,
        eps=jnp.asarray(1.0), beta=beta, h=h,
    )


def measurement_selector(dtype=float) -> np.ndarray:
    """``C``: picks the body velocities out of the 10-d state."""
    c = np.zeros((3, dyn.STATE_DIM), dtype=dtype)
    c[0, dyn.VX] = c[1, dyn.VY] = c[2, dyn.YAW_RATE] = 1.0
    return c


def gating(v: Array, eps: Array) -> Array:
    """Update gate ``|v|^2 / (|v|^2 + eps)``."""
    s = jnp.sum(jnp.square(v))
    return s / (s + eps)


# --- multi-step Jacobian ------------------------------------------------------


def vehicle_step_fn(net: nn.NetParams, psi):
    """Step function ``(x, u, y, theta) -> (x_next, F^x, F^theta)`` of the vehicle model.

    ``F^x`` is taken with the residual frozen (its state dependence is
    neglected); ``F^theta`` is exact because the step is affine in theta.
    """

    def fn(x, u, y, theta):
        phi = dyn.model_features(x, u, y, net, psi)
        zeta = nn.residual_from_features(phi, net, theta)
        x_next = dyn.step_with_residual(x, u, y, zeta, psi)
        fx = jax.jacfwd(dyn.step_with_residual)(x, u, y, jax.lax.stop_gradient(zeta), psi)
        ftheta = dyn.param_jacobian_from_features(phi, net, psi)
        return x_next, fx, ftheta

    return fn


def multi_step_jacobian(states: Array, controls: Array, terrains: Array, net, theta, psi) -> Array:
    """``H = d x_hat_{t+h} / d theta`` along a predicted trajectory.

    ``states`` holds ``x_hat_t .. x_hat_{t+h}`` (only the first ``h`` are
    used); both Jacobians of each step are evaluated at the step's origin.
    """
    step_fn = vehicle_step_fn(net, psi)
    n = controls.shape[0]

    def body(h_acc, inp):
        x, u, y = inp
        _, fx, ftheta = step_fn(x, u, y, theta)
        return fx @ h_acc + ftheta, None

    h0 = jnp.zeros((states.shape[1], theta.shape[0]), dtype=states.dtype)
    h_out, _ = jax.lax.scan(body, h0, (states[:n], controls, terrains))
    return h_out


def propagate_with_jacobian(step_fn, x0, controls, terrains, theta) -> tuple[Array, Array]:
    """Propagate ``h`` steps and build the multi-step Jacobian in one pass.

    Returns ``(x_hat_{t+1..t+h}, H_{t+h})``.
    """

    def body(carry, inp):
        x, h_acc = carry
        u, y = inp
        x_next, fx, ftheta = step_fn(x, u, y, theta)
        return (x_next, fx @ h_acc + ftheta), x_next

    h0 = jnp.zeros((x0.shape[0], theta.shape[0]), dtype=x0.dtype)
    (_, h_out), xs = jax.lax.scan(body, (x0, h0), (controls, terrains))
    return xs, h_out


# --- Kalman update ------------------------------------------------------------


def kalman_measurement_update(theta, cov, ch, innovation, gamma, q, r):
    """Kalman update in measurement space.

    ``ch`` is ``C H`` (m x n), ``innovation`` is ``C (x - x_hat)`` (m,), and
    ``q``/``r`` are full covariance matrices.  Returns ``(theta, cov, S)``.
    """
    p_bar = cov + q
    chp = ch @ p_bar
    s = chp @ ch.T + r
    gain = jnp.linalg.solve(s, chp).T
    theta = theta + gamma * (gain @ innovation)
    cov = p_bar - gain @ chp
    return theta, 0.5 * (cov + cov.T), s


def kalman_step(ks: KalmanAdaptState, h_mat: Array, innovation: Array, gamma: Array, fp: FilterParams):
    """One filter update from a full-state innovation ``x_{t+h} - x_hat_{t+h}``."""
    theta, cov, _ = kalman_measurement_update(
        ks.theta, ks.cov, h_mat[dyn.VEL], innovation[dyn.VEL], gamma, jnp.diag(fp.q), jnp.diag(fp.r)
    )
    return KalmanAdaptState(theta, cov)


def kalman_update(ks: KalmanAdaptState, h_mat, innovation, gamma, fp: FilterParams) -> KalmanAdaptState:
    """Checked version of :func:`kalman_step` for use outside ``jit``.

    Raises :class:`SingularInnovationError` when the innovation covariance
    cannot be inverted reliably; the caller should skip the update.
    """
    ch = np.asarray(h_mat)[dyn.VEL]
    p_bar = np.asarray(ks.cov) + np.diag(np.asarray(fp.q))
    s = ch @ p_bar @ ch.T + np.diag(np.asarray(fp.r))
    cond = np.linalg.cond(s)
    if not np.isfinite(cond) or cond > SINGULAR_CONDITION:
        raise SingularInnovationError(float(cond))
    if not np.all(np.isfinite(np.asarray(innovation))):
        raise ValueError("innovation must be finite")
    return kalman_step(ks, jnp.asarray(h_mat), jnp.asarray(innovation), gamma, fp)


# --- adaptation over a logged window ----------------------------------------


class AdaptTrace(NamedTuple):
    step: Array  # index of the update within the window (end of each cycle)
    theta_norm: Array
    gamma: Array
    innovation_norm: Array
    cov_trace: Array
    reset: Array


def _diverged(ks: KalmanAdaptState, fp: FilterParams) -> Array:
    """Non-finite filter state, or ``theta`` beyond the limit in prior standard deviations."""
    finite = jnp.all(jnp.isfinite(ks.theta)) & jnp.all(jnp.isfinite(ks.cov))
    scaled = jnp.where(jnp.isfinite(ks.theta), ks.theta, 0.0) / jnp.sqrt(fp.p0)
    return (~finite) | (jnp.linalg.norm(scaled) > THETA_NORM_LIMIT)


def adaptation_cycle(step_fn, ks, x_start, controls, terrains, x_end, fp: FilterParams, training: bool,
                     gamma_override=None):
    """Propagate one window of ``h`` steps from ``x_start`` and update the filter."""
    x_hat, h_mat = propagate_with_jacobian(step_fn, x_start, controls, terrains, ks.theta)
    innovation = x_end - x_hat[-1]
    gamma = gating(x_start[dyn.VEL], fp.eps) if gamma_override is None else gamma_override
    new = kalman_step(ks, h_mat, innovation, gamma, fp)
    if training:
        new = new._replace(theta=fp.beta * new.theta)
    reset = _diverged(new, fp)
    init = fp.initial_state()
    new = KalmanAdaptState(
        jnp.where(reset, init.theta, new.theta), jnp.where(reset, init.cov, new.cov)
    )
    return new, (gamma, jnp.linalg.norm(innovation[dyn.VEL]), reset)


def run_filter(step_fn, ks, states, controls, terrains, fp: FilterParams, training=False, gamma_override=None):
    """Filter loop over a log for any model that is linear in theta."""
    h = fp.h
    tau = controls.shape[0]
    if tau % h:
        raise ValueError(f"window length {tau} is not a multiple of h={h}")
    n_cycles = tau // h
    if ks is None:
        ks = fp.initial_state()
    starts = states[:-1:h][:n_cycles]
    ends = states[h::h]
    us = controls.reshape(n_cycles, h, -1)
    ys = terrains.reshape(n_cycles, h, -1)

    def body(carry, inp):
        x0, u, y, x1 = inp
        new, (gamma, innov, reset) = adaptation_cycle(
            step_fn, carry, x0, u, y, x1, fp, training, gamma_override
        )
        return new, (jnp.linalg.norm(new.theta), gamma, innov, jnp.trace(new.cov), reset)

    final, recs = jax.lax.scan(body, ks, (starts, us, ys, ends))
    steps = jnp.arange(1, n_cycles + 1) * h
    return final, AdaptTrace(steps, *recs)


def adapt_window(
    ks: KalmanAdaptState | None,
    states: Array,
    controls: Array,
    terrains: Array,
    net: nn.NetParams,
    psi,
    fp: FilterParams,
    training: bool = False,
    gamma_override=None,
) -> tuple[KalmanAdaptState, AdaptTrace]:
    """Run the filter over a log of ``tau`` steps of the vehicle model.

    ``states`` has ``tau + 1`` rows, ``controls`` and ``terrains`` ``tau``.
    ``tau`` must be a multiple of ``fp.h``.  In training mode ``theta`` is
    decayed by ``fp.beta`` after every update.  Jittable and differentiable.
    """
    return run_filter(vehicle_step_fn(net, psi), ks, states, controls, terrains, fp, training, gamma_override)


def write_trace_csv(path: str | Path, trace: AdaptTrace, dt: float = dyn.DT, t0: float = 0.0) -> Path:
    """Per-update records ``t, theta_norm, gamma, innovation_norm, cov_trace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "theta_norm", "gamma", "innovation_norm", "cov_trace", "reset"])
        for row in zip(*(np.asarray(a) for a in trace)):
            w.writerow([f"{t0 + row[0] * dt:.3f}", *(f"{float(v):.6g}" for v in row[1:5]), int(row[5])])
    return path


# --- sliding-window regularized least squares --------------------------------


def sliding_lsq_update(window, ridge: float, length: int | None = None) -> np.ndarray:
    """Ridge fit of the ensemble weights over the most recent pairs.

    ``window`` is a sequence of ``(A_k, b_k)`` with ``A_k`` of shape
    ``(m, n_w)`` and ``b_k`` of shape ``(m,)``.  Solves
    ``min sum |b_k - A_k w|^2 + ridge |w|^2`` over the last ``length`` pairs
    as an augmented least-squares problem.
    """
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    pairs = list(window)
    if length is not None:
        if length < 1:
            raise ValueError("window length must be >= 1")
        pairs = pairs[-length:]
    a = np.concatenate([np.atleast_2d(p[0]) for p in pairs])
    b = np.concatenate([np.atleast_1d(p[1]) for p in pairs])
    n = a.shape[1]
    a_aug = np.vstack([a, np.sqrt(ridge) * np.eye(n)])
    b_aug = np.concatenate([b, np.zeros(n)])
    sol, *_ = np.linalg.lstsq(a_aug, b_aug, rcond=None)
    return sol


# --- closed-loop adapters ----------------------------------------------------


@functools.partial(jax.jit, static_argnames=("training",))
def _online_cycle(ks, x_start, controls, terrains, x_end, net, psi, fp, training=False):
    return adaptation_cycle(vehicle_step_fn(net, psi), ks, x_start, controls, terrains, x_end, fp, training)


@jax.jit
def _lsq_pair(theta, x_start, controls, terrains, x_end, net, psi):
    x_hat, h_mat = propagate_with_jacobian(vehicle_step_fn(net, psi), x_start, controls, terrains, theta)
    ch = h_mat[dyn.VEL, : net.n_w]
    target = (x_end - x_hat[-1])[dyn.VEL] + ch @ theta[: net.n_w]
    return ch, target


class _WindowBuffer:
    def __init__(self, h: int):
        self.h = h
        self.start = None
        self.controls: list = []
        self.terrains: list = []
        self.start_time = 0.0

    def push(self, x, u, y):
        """Record a measurement and the input applied from it.

        Returns the finished window ``(x_start, U, Y, x_end)`` when ``h``
        inputs have been collected since the window start.
        """
        out = None
        if self.start is not None and len(self.controls) == self.h:
            out = (self.start, np.stack(self.controls), np.stack(self.terrains), np.asarray(x))
            self.start, self.controls, self.terrains = None, [], []
        if self.start is None:
            self.start = np.asarray(x)
        self.controls.append(np.asarray(u))
        self.terrains.append(np.asarray(y))
        return out


@dataclass
class OnlineAdapter:
    """Sequential owner of the filter state for closed-loop use.

    Call :meth:`observe` once per control step with the measured state, the
    control about to be applied, and the sensed terrain.  The latest
    ``theta`` is published as an immutable array on :attr:`theta`.
    """

    net: nn.NetParams
    psi: dyn.ParametricParams
    fp: FilterParams
    state: KalmanAdaptState | None = None
    records: list = field(default_factory=list)
    _buffer: _WindowBuffer | None = None
    _t: int = 0

    def __post_init__(self):
        self.fp.validate()
        if self.state is None:
            self.state = self.fp.initial_state()
        self._buffer = _WindowBuffer(self.fp.h)

    @property
    def theta(self) -> np.ndarray:
        return np.asarray(self.state.theta)

    def observe(self, x_meas, u, y) -> bool:
        window = self._buffer.push(x_meas, u, y)
        self._t += 1
        if window is None:
            return False
        new, (gamma, innov, reset) = _online_cycle(self.state, *window, self.net, self.psi, self.fp)
        if bool(reset):
            log.warning("adaptation diverged at step %d; filter reset", self._t)
        self.state = new
        self.records.append(
            (self._t - 1, float(jnp.linalg.norm(new.theta)), float(gamma), float(innov),
             float(jnp.trace(new.cov)), int(reset))
        )
        return True


@dataclass
class SlidingLSQAdapter:
    """Ensemble-weight adaptation by sliding-window ridge regression."""

    net: nn.NetParams
    psi: dyn.ParametricParams
    h: int = 10
    window: int = 25
    ridge: float = 1.0
    records: list = field(default_factory=list)

    def __post_init__(self):
        self._theta = np.zeros(self.net.n_theta)
        self._pairs: deque = deque(maxlen=self.window)
        self._buffer = _WindowBuffer(self.h)
        self._t = 0

    @property
    def theta(self) -> np.ndarray:
        return self._theta.copy()

    def observe(self, x_meas, u, y) -> bool:
        win = self._buffer.push(x_meas, u, y)
        self._t += 1
        if win is None:
            return False
        a, b = _lsq_pair(jnp.asarray(self._theta), *win, self.net, self.psi)
        self._pairs.append((np.asarray(a), np.asarray(b)))
        theta = np.zeros_like(self._theta)
        theta[: self.net.n_w] = sliding_lsq_update(self._pairs, self.ridge)
        self._theta = theta
        self.records.append((self._t - 1, float(np.linalg.norm(theta)), 1.0, float(np.linalg.norm(b)), 0.0, 0))
        return True
