import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact.model import build_heat_model
from artifact.oracle import Oracle1DModel, hjb_discounted
from artifact.randomization import (approximating_alpha, compactness_sweep, randomized_value_mc, required_horizon,
                                    simulate_randomized_pair, tracking_alpha)
from artifact.state_sim import ControlPolicy, TimeGrid
from conftest import const_cost_model, xonly_model


def test_zero_intensity_channel_is_gaussian():
    m = build_heat_model(2, n_controls=2)
    T, N = 1.0, 10_000
    p = simulate_randomized_pair(m, np.zeros(2), np.array([1.0, -1.0]), None, TimeGrid.from_step(T, 0.05), N,
                                 seed=3, keep_noise=False, workers=4)
    d = p.control_channel[:, -1] - np.array([1.0, -1.0])
    target = m.r ** 2 * T
    se = target * np.sqrt(2.0 / (N - 1))
    assert np.all(np.abs(d.var(axis=0, ddof=1) - target) <= 3 * se)


def test_constant_intensity_shifts_channel_exactly():
    m = build_heat_model(2, n_controls=2)
    g = TimeGrid(0.0, 2.0, 40)
    c = np.array([0.7, -2.0])
    a0 = np.array([0.1, 0.2])
    p0 = simulate_randomized_pair(m, np.zeros(2), a0, None, g, 50, seed=5)
    p1 = simulate_randomized_pair(m, np.zeros(2), a0, ControlPolicy.constant(c), g, 50, seed=5)
    shift = p1.control_channel - p0.control_channel
    np.testing.assert_allclose(shift, np.broadcast_to(g.nodes[:, None] * m.r * c, shift.shape), rtol=1e-12,
                               atol=1e-12)


def test_channel_matches_affine_formula():
    m = build_heat_model(3, n_controls=2)
    alpha = ControlPolicy.feedback(lambda t, x: np.stack([np.sin(x[:, 0]), np.cos(t) + 0 * x[:, 1]], 1), bound=2.0)
    p = simulate_randomized_pair(m, np.ones(3), np.array([0.5, 0.0]), alpha, TimeGrid(0, 1, 50), 30, seed=7)
    np.testing.assert_allclose(p.channel_formula(m), p.control_channel, rtol=0, atol=1e-13)


def test_state_is_driven_by_channel():
    # the pair state equals the ordinary state run with the channel as open-loop control
    from artifact.state_sim import simulate_state
    m = build_heat_model(2)
    g = TimeGrid(0, 1, 20)
    p = simulate_randomized_pair(m, np.ones(2), np.array([1.0]), ControlPolicy.constant([1.0]), g, 10, seed=2)
    e = simulate_state(m, np.ones(2), ControlPolicy.open_loop(p.ensemble.controls), g, 10, seed=2)
    np.testing.assert_array_equal(e.states, p.states)


def test_unbounded_alpha_rejected():
    m = build_heat_model(1)
    with pytest.raises(ValueError):
        simulate_randomized_pair(m, np.zeros(1), np.zeros(1), ControlPolicy.feedback(lambda t, x: x[:, :1]),
                                 TimeGrid(0, 1, 2), 2, seed=0)


def test_compactness_diagnostic_bounded_over_draws():
    m = build_heat_model(8)
    g = TimeGrid.from_step(1.0, 0.005)
    small = compactness_sweep(m, g, 200, seed=1)
    large = compactness_sweep(m, g, 200, seed=1, a_scale=30.0, alpha_scale=50.0)
    assert np.all(np.isfinite(small)) and len(small) == 10
    assert max(small.max(), large.max()) <= 1.25 * min(small.min(), large.min())


def _ramp_error(eta2, n, t0, T):
    # independent closed form: int_{t0}^{t0+1/n} (1 - n (t - t0))^2 dt |eta|^2
    return eta2 / (3 * n)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 400), t0=st.floats(0, 0.5), e=st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_ramp_error_matches_quadrature(n, t0, e):
    T = 1.0
    if t0 + 1.0 / n > T:
        return
    ap = approximating_alpha(np.array(e), n, [0.5, 0.25], t0=t0, T=T)
    eta2 = float(np.sum(np.square(e)))
    assert ap.measured_error()[0] == pytest.approx(_ramp_error(eta2, n, t0, T), rel=1e-9, abs=1e-15)
    assert ap.formula_value == pytest.approx(eta2 / n, rel=1e-12, abs=1e-15)


def test_ramp_error_halves_when_n_doubles():
    errs = [approximating_alpha([1.0], n, [0.5], t0=0.2).measured_error()[0] for n in (10, 20, 40, 80)]
    np.testing.assert_allclose(np.array(errs[:-1]) / errs[1:], 2.0, rtol=1e-10)


def test_ramp_policy_reproduces_integrated_channel():
    ap = approximating_alpha(np.array([[1.0, 2.0]]), 10, [0.5, 0.25], t0=0.3, T=1.0)
    g = TimeGrid(0.0, 1.0, 200)
    pol = ap.policy(g)
    cum = np.concatenate([[0.0], np.cumsum(pol.value[0, :, 0] * g.h)]) * 0.5
    np.testing.assert_allclose(cum, np.clip(10 * (g.nodes - 0.3), 0, 1) * 1.0, atol=1e-12)


def test_ramp_projection_and_horizon_errors():
    ap = approximating_alpha(np.array([[1.0, 2.0, 3.0]]), 5, [0.5, 0.25], T=1.0)
    assert ap.projection_residual[0] == pytest.approx(3.0)
    assert ap.eta.shape == (1, 2)
    with pytest.raises(ValueError):
        approximating_alpha([1.0], 2, [0.5], t0=0.8, T=1.0)


def test_constant_cost_value():
    m = const_cost_model(1.0)
    beta, tol = 0.5, 1e-3
    T = required_horizon(m.M_ell, beta, tol)
    assert T == 16.0
    v = randomized_value_mc(m, np.zeros(1), np.zeros(1), None, beta, TimeGrid.from_step(T, 0.01), 50, seed=1,
                            tail_tol=tol)
    assert abs(v.value - 2.0) <= v.tail_bound + 1e-4
    assert v.se < 1e-12


def test_tail_tolerance_error_names_horizon():
    m = const_cost_model(1.0)
    with pytest.raises(ValueError, match="t_end >= 16"):
        randomized_value_mc(m, np.zeros(1), np.zeros(1), None, 0.5, TimeGrid(0, 5, 10), 10, seed=0, tail_tol=1e-3)


def test_value_indifferent_to_initial_channel_for_state_cost():
    m = xonly_model()
    gain, h, beta = 100.0, 0.005, 1.0
    alpha = tracking_alpha(lambda t, x: -np.tanh(x[:, :1]), gain, m.r, bound=1e4)
    g = TimeGrid.from_step(required_horizon(m.M_ell, beta, 1e-3), h)
    v1 = randomized_value_mc(m, np.zeros(1), np.array([3.0]), alpha, beta, g, 2000, seed=4, workers=4)
    v2 = randomized_value_mc(m, np.zeros(1), np.array([-3.0]), alpha, beta, g, 2000, seed=4, workers=4)
    # channel gap decays like 6 (1 - gain h)^k; its effect on the state is damped at rate mu
    correction = m.L_ell * 6.0 * h / (1 - (1 - gain * h)) / m.mu
    assert abs(v1.value - v2.value) <= 3 * np.hypot(v1.se, v2.se) + correction


def test_heat_one_mode_value_matches_oracle():
    # one mode, control inactive: the randomized value is an ordinary discounted cost
    cost = {"name": "state_tanh2", "params": [1.0], "M_ell": 1.0, "L_ell": 0.77}
    drift = {"name": "dirichlet_pointwise", "params": [2.0, 0.0, 0.0, 0.0, 0.0], "mu": 2.0, "L_F": 2.0, "C_F": 2.0}
    m = build_heat_model(1, drift_params=drift, cost_params=cost)
    beta = 0.5
    x0 = np.array([0.3])
    ref = hjb_discounted(Oracle1DModel.from_model(m, controls=[0.0], half_width=4.0, n_x=801), beta)(x0)[0]
    g = TimeGrid.from_step(required_horizon(m.M_ell, beta, 1e-3), 0.01)
    v = randomized_value_mc(m, x0, np.zeros(1), None, beta, g, 4000, seed=6, workers=4)
    assert abs(v.value - ref) <= 0.03 * abs(ref)
