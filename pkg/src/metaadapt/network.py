"""Residual force network with an adaptable last-layer ensemble.

The network maps the standardized model input ``eta = [x, u, y, F]`` through
two tanh hidden layers to a feature vector ``Phi``.  The last layer is not a
single matrix but a weighted combination of an ensemble of matrices ``W``::

    zeta = (phi_w + theta_w)^T W Phi(eta) + phi_b + theta_b

so the output is linear in the adaptable parameters ``theta = [theta_w,
theta_b]``.  Everything here is a pure function of its inputs and can be
``jit``-ed or ``vmap``-ed freely.
"""

from __future__ import annotations

from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

Array = jax.Array

N_ETA = 35
N_OUT = 3

TRAINABLE_FIELDS = ("w1", "b1", "w2", "b2", "ens_weights", "basis", "bias")


class NetParams(NamedTuple):
    """Learned parameters ``phi`` plus the fixed input standardization."""

    w1: Array  # (n_eta, n_hidden)
    b1: Array  # (n_hidden,)
    w2: Array  # (n_hidden, n_in)
    b2: Array  # (n_in,)
    ens_weights: Array  # phi_w, (n_w,)
    basis: Array  # W, (n_w, n_out, n_in)
    bias: Array  # phi_b, (n_out,)
    in_mean: Array  # (n_eta,)
    in_scale: Array  # (n_eta,)
    in_mask: Array  # (n_eta,), 0 drops a feature entirely

    @property
    def n_w(self) -> int:
        return self.basis.shape[0]

    @property
    def n_out(self) -> int:
        return self.basis.shape[1]

    @property
    def n_in(self) -> int:
        return self.basis.shape[2]

    @property
    def n_theta(self) -> int:
        return self.n_w + self.n_out


def init_network(
    key: Array,
    n_hidden: int = 32,
    n_in: int = 32,
    n_w: int = 8,
    n_out: int = N_OUT,
    n_eta: int = N_ETA,
    output_scale: float | Array = 1.0,
) -> NetParams:
    """Random initialization with an identity standardization.

    ``output_scale`` sets the magnitude of each ensemble member (per output
    channel), so that unit changes of the ensemble weights correspond to
    residuals of that size in the units the dynamics expect (Newtons,
    Newton-metres).
    """
    k1, k2, k3 = jax.random.split(key, 3)
    scale = jnp.broadcast_to(jnp.asarray(output_scale, dtype=float), (n_out,))
    w1 = jax.random.normal(k1, (n_eta, n_hidden)) / np.sqrt(n_eta)
    w2 = jax.random.normal(k2, (n_hidden, n_in)) / np.sqrt(n_hidden)
    basis = jax.random.normal(k3, (n_w, n_out, n_in)) / np.sqrt(n_in)
    return NetParams(
        w1=w1,
        b1=jnp.zeros(n_hidden),
        w2=w2,
        b2=jnp.zeros(n_in),
        ens_weights=jnp.full(n_w, 1.0 / n_w),
        basis=basis * scale[None, :, None],
        bias=jnp.zeros(n_out),
        in_mean=jnp.zeros(n_eta),
        in_scale=jnp.ones(n_eta),
        in_mask=jnp.ones(n_eta),
    )


def with_normalizer(
    net: NetParams, etas: np.ndarray, mask: np.ndarray | None = None, min_scale: float = 1e-3
) -> NetParams:
    """Return ``net`` with standardization statistics fitted on ``etas``."""
    etas = np.asarray(etas, dtype=float)
    mean = etas.mean(axis=0)
    scale = np.maximum(etas.std(axis=0), min_scale)
    if mask is None:
        mask = np.ones(etas.shape[1])
    return net._replace(
        in_mean=jnp.asarray(mean), in_scale=jnp.asarray(scale), in_mask=jnp.asarray(mask, dtype=float)
    )


def standardize(eta: Array, net: NetParams) -> Array:
    return (eta - net.in_mean) / net.in_scale * net.in_mask


def features(eta: Array, net: NetParams) -> Array:
    """Second-to-last layer output ``Phi(eta)`` of shape ``(n_in,)``."""
    h = jnp.tanh(standardize(eta, net) @ net.w1 + net.b1)
    return jnp.tanh(h @ net.w2 + net.b2)


def split_theta(theta: Array, n_w: int) -> tuple[Array, Array]:
    return theta[..., :n_w], theta[..., n_w:]


def residual_from_features(phi: Array, net: NetParams, theta: Array) -> Array:
    theta_w, theta_b = split_theta(theta, net.n_w)
    basis_out = jnp.einsum("woi,i->wo", net.basis, phi)
    return (net.ens_weights + theta_w) @ basis_out + net.bias + theta_b


def residual(eta: Array, net: NetParams, theta: Array) -> Array:
    """Residual force ``zeta(eta; phi, theta)``, shape ``(n_out,)``."""
    return residual_from_features(features(eta, net), net, theta)


def feature_param_jacobian(phi: Array, net: NetParams) -> Array:
    basis_out = jnp.einsum("woi,i->ow", net.basis, phi)
    return jnp.concatenate([basis_out, jnp.eye(net.n_out, dtype=basis_out.dtype)], axis=1)


def residual_param_jacobian(eta: Array, net: NetParams, theta: Array | None = None) -> Array:
    """``d zeta / d theta`` of shape ``(n_out, n_theta)``.

    The residual is affine in ``theta`` so the Jacobian does not depend on it;
    ``theta`` is accepted only to mirror :func:`residual`.
    """
    del theta
    return feature_param_jacobian(features(eta, net), net)


def zero_theta(net: NetParams, dtype=None) -> Array:
    return jnp.zeros(net.n_theta, dtype=dtype or net.bias.dtype)


def trainable(net: NetParams) -> dict[str, Array]:
    return {name: getattr(net, name) for name in TRAINABLE_FIELDS}


def with_trainable(net: NetParams, values: dict[str, Array]) -> NetParams:
    return net._replace(**values)
