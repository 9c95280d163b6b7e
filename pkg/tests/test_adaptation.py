import csv

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaadapt import adaptation as ad
from metaadapt import dynamics as dyn
from metaadapt import network as nn

from conftest import make_net, random_control, random_state, random_terrain

PSI = dyn.ParametricParams()


def excitation_log(net, theta, n, noise=0.0, seed=0):
    """Drive the model itself with a rich, smooth input sequence."""
    t = np.arange(n) * dyn.DT
    controls = np.stack([
        0.35 + 0.2 * np.sin(0.3 * t),
        0.05 * (np.sin(0.7 * t) > 0.8),
        0.6 * np.sin(0.25 * t) + 0.2 * np.sin(1.3 * t),
    ], axis=1)
    terrains = np.tile(np.asarray(dyn.flat_terrain()), (n, 1))
    x0 = np.zeros(dyn.STATE_DIM)
    x0[dyn.VX] = 4.0
    x0[dyn.ENGINE] = PSI.engine_idle + 4.0 / PSI.gear_ratio
    xs = dyn.rollout(jnp.asarray(x0), jnp.asarray(controls), jnp.asarray(terrains), net, jnp.asarray(theta), PSI)
    states = np.vstack([x0, np.asarray(xs)])
    if noise:
        rng = np.random.default_rng(seed)
        states[1:, dyn.VEL] += rng.normal(0, noise, (n, 3))
    return states, controls, terrains


def frozen_feature_propagation(x0, controls, terrains, net, theta_nominal):
    """h-step propagation with the network features frozen along the nominal path.

    The state dependence of the residual is neglected in the multi-step
    Jacobian; this propagation is the one whose theta-derivative it is exactly.
    """
    x, phis = np.asarray(x0), []
    for u, y in zip(controls, terrains):
        phis.append(dyn.model_features(x, u, y, net, PSI))
        x = np.asarray(dyn.step(x, u, y, net, theta_nominal, PSI))

    def end(theta):
        x = x0
        for phi, u, y in zip(phis, controls, terrains):
            x = dyn.step_with_residual(x, u, y, nn.residual_from_features(phi, net, theta), PSI)
        return np.asarray(x)

    return end


def fd_jacobian(fn, theta, eps=1e-5):
    cols = [(fn(theta + eps * e) - fn(theta - eps * e)) / (2 * eps) for e in np.eye(len(theta))]
    return np.stack(cols, axis=1)


def random_window(rng, net, h=10):
    x0 = random_state(rng)
    controls = np.stack([random_control(rng) for _ in range(h)])
    terrains = np.stack([random_terrain(rng) for _ in range(h)])
    theta = rng.normal(0, 0.3, net.n_theta)
    states = np.vstack([x0, np.asarray(dyn.rollout(x0, controls, terrains, net, theta, PSI))])
    return x0, controls, terrains, theta, states


# --- multi-step Jacobian ------------------------------------------------------------


def test_single_step_jacobian_is_parameter_jacobian(rng, net):
    x, u, y = random_state(rng), random_control(rng), random_terrain(rng)
    theta = rng.normal(size=net.n_theta)
    h = ad.multi_step_jacobian(x[None], u[None], y[None], net, theta, PSI)
    np.testing.assert_allclose(h, dyn.param_jacobian(x, u, y, net, PSI), atol=1e-15)


def test_identity_state_jacobian_telescopes(rng):
    ftheta = [rng.normal(size=(4, 2)) for _ in range(5)]

    def step_fn(x, u, y, theta):
        return x + u, jnp.eye(4), jnp.asarray(ftheta)[y[0].astype(int)]

    controls = jnp.zeros((5, 4))
    terrains = jnp.arange(5.0)[:, None]
    _, h = ad.propagate_with_jacobian(step_fn, jnp.zeros(4), controls, terrains, jnp.zeros(2))
    np.testing.assert_allclose(h, sum(ftheta), atol=1e-14)


def test_multi_step_jacobian_matches_finite_differences(rng, net):
    x0, controls, terrains, theta, states = random_window(rng, net)
    h = np.asarray(ad.multi_step_jacobian(states, controls, terrains, net, theta, PSI))
    fd = fd_jacobian(frozen_feature_propagation(x0, controls, terrains, net, theta), theta)
    assert np.linalg.norm(h - fd) / np.linalg.norm(fd) < 1e-4


def test_multi_step_jacobian_exact_for_state_independent_features(rng):
    net = make_net(3)
    net = net._replace(w1=jnp.zeros_like(net.w1))  # features no longer depend on the state
    x0, controls, terrains, theta, states = random_window(rng, net)
    h = np.asarray(ad.multi_step_jacobian(states, controls, terrains, net, theta, PSI))

    def full(th):
        return np.asarray(dyn.rollout(x0, controls, terrains, net, th, PSI)[-1])

    fd = fd_jacobian(full, theta)
    assert np.linalg.norm(h - fd) / np.linalg.norm(fd) < 1e-4


def test_propagation_agrees_with_rollout(rng, net):
    x0 = random_state(rng)
    controls = np.stack([random_control(rng) for _ in range(10)])
    terrains = np.stack([random_terrain(rng) for _ in range(10)])
    theta = rng.normal(size=net.n_theta)
    xs, h = ad.propagate_with_jacobian(ad.vehicle_step_fn(net, PSI), x0, controls, terrains, theta)
    np.testing.assert_allclose(xs, dyn.rollout(x0, controls, terrains, net, theta, PSI), atol=1e-12)
    states = np.vstack([x0, np.asarray(xs)])
    np.testing.assert_allclose(h, ad.multi_step_jacobian(states, controls, terrains, net, theta, PSI), atol=1e-12)


# --- gating -------------------------------------------------------------------------


def test_gating_examples():
    assert float(ad.gating(jnp.zeros(3), 1.0)) == 0.0
    assert float(ad.gating(jnp.array([1.0, 1.0, 0.0]), 2.0)) == pytest.approx(0.5)
    assert float(ad.gating(jnp.array([3.0, 0.0, 0.0]), 1.0)) == pytest.approx(0.9)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0, 1e3), b=st.floats(0, 1e3), eps=st.floats(1e-3, 1e3))
def test_gating_monotone(a, b, eps):
    lo, hi = sorted([a, b])
    g_lo = float(ad.gating(jnp.array([np.sqrt(lo), 0, 0]), eps))
    g_hi = float(ad.gating(jnp.array([np.sqrt(hi), 0, 0]), eps))
    assert 0 <= g_lo <= g_hi < 1
    if hi > lo * (1 + 1e-9) + 1e-12:
        assert g_lo < g_hi


# --- Kalman update --------------------------------------------------------------------


def small_fp(n=3, h=1):
    return ad.FilterParams(p0=jnp.ones(n), q=jnp.full(n, 0.1), r=jnp.ones(3), eps=jnp.asarray(1.0), h=h)


def test_zero_sensitivity_only_inflates_covariance(rng):
    fp = small_fp()
    ks = ad.KalmanAdaptState(jnp.asarray(rng.normal(size=3)), jnp.eye(3) * 2.0)
    new = ad.kalman_update(ks, jnp.zeros((10, 3)), jnp.asarray(rng.normal(size=10)), 1.0, fp)
    np.testing.assert_array_equal(new.theta, ks.theta)
    np.testing.assert_allclose(new.cov, ks.cov + jnp.diag(fp.q))


def test_scalar_kalman_step_by_hand():
    theta, cov, s = ad.kalman_measurement_update(
        jnp.zeros(1), jnp.zeros((1, 1)), jnp.ones((1, 1)), jnp.ones(1), 1.0, jnp.ones((1, 1)), jnp.ones((1, 1))
    )
    # P_bar = 1, S = 2, K = 0.5
    assert float(s[0, 0]) == pytest.approx(2.0)
    assert float(theta[0]) == pytest.approx(0.5)
    assert float(cov[0, 0]) == pytest.approx(0.5)


def test_zero_gate_keeps_theta_but_updates_covariance(rng):
    fp = small_fp()
    theta = jnp.asarray(rng.normal(size=3))
    ks = ad.KalmanAdaptState(theta, jnp.eye(3))
    h = jnp.asarray(rng.normal(size=(10, 3)))
    new = ad.kalman_update(ks, h, jnp.asarray(rng.normal(size=10)), 0.0, fp)
    np.testing.assert_array_equal(new.theta, theta)
    assert float(jnp.trace(new.cov)) < float(jnp.trace(ks.cov + jnp.diag(fp.q)))


def test_kalman_update_matches_textbook_form(rng):
    n = 4
    fp = ad.FilterParams(p0=jnp.ones(n), q=jnp.asarray(rng.uniform(0.01, 0.1, n)),
                         r=jnp.asarray(rng.uniform(0.1, 1, 3)), eps=jnp.asarray(1.0))
    a = rng.normal(size=(n, n))
    ks = ad.KalmanAdaptState(jnp.asarray(rng.normal(size=n)), jnp.asarray(a @ a.T + np.eye(n)))
    h = rng.normal(size=(10, n))
    innov = rng.normal(size=10)
    new = ad.kalman_update(ks, h, innov, 0.7, fp)
    c = ad.measurement_selector()
    p_bar = np.asarray(ks.cov) + np.diag(np.asarray(fp.q))
    s = c @ h @ p_bar @ h.T @ c.T + np.diag(np.asarray(fp.r))
    k = p_bar @ h.T @ c.T @ np.linalg.inv(s)
    np.testing.assert_allclose(new.theta, np.asarray(ks.theta) + 0.7 * k @ c @ innov, rtol=1e-10)
    np.testing.assert_allclose(new.cov, p_bar - k @ c @ h @ p_bar, rtol=1e-10, atol=1e-12)


def test_singular_innovation_covariance_raises():
    fp = ad.FilterParams(p0=jnp.ones(2), q=jnp.full(2, 1e20), r=jnp.full(3, 1e-20), eps=jnp.asarray(1.0))
    h = np.zeros((10, 2))
    h[3:6] = [[1, 0], [0, 1], [1, 1]]
    with pytest.raises(ad.SingularInnovationError) as err:
        ad.kalman_update(fp.initial_state(), h, np.zeros(10), 1.0, fp)
    assert err.value.condition > ad.SINGULAR_CONDITION


def test_measurement_selector_rows():
    c = ad.measurement_selector()
    assert c.shape == (3, 10)
    np.testing.assert_array_equal(c.sum(axis=1), 1.0)
    assert list(np.argmax(c, axis=1)) == [dyn.VX, dyn.VY, dyn.YAW_RATE]


def test_covariance_stays_symmetric_psd(rng):
    n = 11
    fp = ad.FilterParams(p0=jnp.ones(n), q=jnp.full(n, 1e-4), r=jnp.full(3, 1e-3), eps=jnp.asarray(1.0))
    hs = jnp.asarray(rng.normal(0, 3, (10_000, 10, n)))
    innovs = jnp.asarray(rng.normal(size=(10_000, 10)))
    gammas = jnp.asarray(rng.uniform(0, 1, 10_000))

    def body(ks, inp):
        ks = ad.kalman_step(ks, *inp, fp)
        return ks, (jnp.min(jnp.linalg.eigvalsh(ks.cov)), jnp.max(jnp.abs(ks.cov - ks.cov.T)))

    _, (min_eig, asym) = jax.jit(lambda: jax.lax.scan(body, fp.initial_state(), (hs, innovs, gammas)))()
    assert float(jnp.min(min_eig)) > -1e-8
    assert float(jnp.max(asym)) < 1e-9


def test_filter_params_validation(net):
    fp = ad.default_filter_params(net)
    fp.validate()
    for bad in (dict(p0=-fp.p0), dict(eps=jnp.asarray(0.0)), dict(beta=1.5), dict(h=0)):
        with pytest.raises(ValueError):
            ad.FilterParams(**{**dict(p0=fp.p0, q=fp.q, r=fp.r, eps=fp.eps, beta=1.0, h=10), **bad}).validate()


# --- adapt_window ----------------------------------------------------------------------


def test_self_generated_log_keeps_theta_zero(net):
    states, controls, terrains = excitation_log(net, np.zeros(net.n_theta), 400)
    ks, trace = ad.adapt_window(None, states, controls, terrains, net, PSI, ad.default_filter_params(net))
    assert float(jnp.linalg.norm(ks.theta)) < 1e-6
    assert trace.theta_norm.shape == (40,)


def test_forced_zero_gate_keeps_theta_exactly_zero(net):
    theta_star = np.r_[np.full(net.n_w, 0.3), [50.0, -20.0, 10.0]]
    states, controls, terrains = excitation_log(net, theta_star, 200)
    ks, _ = ad.adapt_window(None, states, controls, terrains, net, PSI, ad.default_filter_params(net),
                            gamma_override=0.0)
    np.testing.assert_array_equal(ks.theta, 0.0)


def test_identifies_constant_parameters(net):
    rng = np.random.default_rng(0)
    theta_star = np.r_[rng.normal(0, 0.5, net.n_w), rng.normal(0, 100, 3)]
    states, controls, terrains = excitation_log(net, theta_star, 5000, noise=0.002)
    base = ad.default_filter_params(net)
    # constant parameters: almost no random walk; R matched to the measurement noise
    fp = ad.FilterParams(p0=base.p0, q=1e-8 * base.p0, r=jnp.full(3, 2 * 0.002**2), eps=base.eps, h=10)
    ks, _ = jax.jit(lambda s, u, y: ad.adapt_window(None, s, u, y, net, PSI, fp))(states, controls, terrains)
    err = np.linalg.norm(np.asarray(ks.theta) - theta_star) / np.linalg.norm(theta_star)
    assert err < 0.05


def test_window_must_be_multiple_of_h(net):
    states, controls, terrains = excitation_log(net, np.zeros(net.n_theta), 15)
    with pytest.raises(ValueError):
        ad.adapt_window(None, states, controls, terrains, net, PSI, ad.default_filter_params(net))


def test_training_mode_decays_theta(net):
    theta_star = np.r_[np.zeros(net.n_w), [200.0, 0.0, 0.0]]
    states, controls, terrains = excitation_log(net, theta_star, 300)
    fp = ad.default_filter_params(net)
    decayed = ad.FilterParams(fp.p0, fp.q, fp.r, fp.eps, beta=0.5, h=fp.h)
    plain, _ = ad.adapt_window(None, states, controls, terrains, net, PSI, decayed, training=False)
    trained, _ = ad.adapt_window(None, states, controls, terrains, net, PSI, decayed, training=True)
    assert float(jnp.linalg.norm(trained.theta)) < float(jnp.linalg.norm(plain.theta))


def test_divergence_resets_filter(net):
    fp = ad.default_filter_params(net)
    states, controls, terrains = excitation_log(net, np.zeros(net.n_theta), 20)
    states[10, dyn.VX] += 1e9  # absurd measurement blows theta past the limit
    ks, trace = ad.adapt_window(None, states, controls, terrains, net, PSI, fp)
    assert bool(trace.reset[0])
    assert np.all(np.isfinite(np.asarray(ks.theta)))


def test_trace_csv(tmp_path, net):
    states, controls, terrains = excitation_log(net, np.zeros(net.n_theta), 50)
    _, trace = ad.adapt_window(None, states, controls, terrains, net, PSI, ad.default_filter_params(net))
    path = ad.write_trace_csv(tmp_path / "trace.csv", trace)
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 5
    assert [float(r["t"]) for r in rows] == pytest.approx([0.2, 0.4, 0.6, 0.8, 1.0])
    assert set(rows[0]) == {"t", "theta_norm", "gamma", "innovation_norm", "cov_trace", "reset"}


# --- sliding-window least squares -----------------------------------------------------------


def test_lsq_zero_targets_give_zero():
    pairs = [(np.random.default_rng(i).normal(size=(3, 4)), np.zeros(3)) for i in range(5)]
    np.testing.assert_allclose(ad.sliding_lsq_update(pairs, ridge=1.0), 0.0, atol=1e-14)


def test_lsq_exact_fit_limit():
    b = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(ad.sliding_lsq_update([(np.eye(3), b)], ridge=1e-12), b, rtol=1e-9)


def test_lsq_matches_normal_equations(rng):
    pairs = [(rng.normal(size=(3, 8)), rng.normal(size=3)) for _ in range(30)]
    got = ad.sliding_lsq_update(pairs, ridge=0.5, length=20)
    a = np.concatenate([p[0] for p in pairs[-20:]])
    b = np.concatenate([p[1] for p in pairs[-20:]])
    ref = np.linalg.solve(a.T @ a + 0.5 * np.eye(8), a.T @ b)
    np.testing.assert_allclose(got, ref, atol=1e-8)


def test_lsq_argument_checks():
    with pytest.raises(ValueError):
        ad.sliding_lsq_update([(np.eye(2), np.ones(2))], ridge=0.0)
    with pytest.raises(ValueError):
        ad.sliding_lsq_update([(np.eye(2), np.ones(2))], ridge=1.0, length=0)


# --- closed-loop adapters -------------------------------------------------------------------


def test_online_adapter_matches_batch_filter(net):
    theta_star = np.r_[np.full(net.n_w, 0.2), [80.0, -40.0, 20.0]]
    states, controls, terrains = excitation_log(net, theta_star, 100)
    fp = ad.default_filter_params(net)
    adapter = ad.OnlineAdapter(net, PSI, fp)
    updates = [adapter.observe(states[k], controls[k], terrains[k]) for k in range(100)]
    adapter.observe(states[100], controls[0], terrains[0])
    # the k-th window closes when the (k*h)-th state arrives
    assert sum(updates) == 9 and updates[10] and not updates[9]
    ks, _ = ad.adapt_window(None, states, controls, terrains, net, PSI, fp)
    np.testing.assert_allclose(adapter.theta, ks.theta, rtol=1e-9, atol=1e-9)
    assert len(adapter.records) == 10


def test_lsq_adapter_recovers_ensemble_weights(net):
    theta_star = np.r_[np.random.default_rng(1).normal(0, 0.5, net.n_w), np.zeros(3)]
    states, controls, terrains = excitation_log(net, theta_star, 1000)
    adapter = ad.SlidingLSQAdapter(net, PSI, h=10, window=50, ridge=1e-6)
    for k in range(1001):
        adapter.observe(states[k], controls[min(k, 999)], terrains[min(k, 999)])
    np.testing.assert_allclose(adapter.theta[: net.n_w], theta_star[: net.n_w], atol=2e-3)
    np.testing.assert_array_equal(adapter.theta[net.n_w:], 0.0)
