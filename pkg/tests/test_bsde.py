import json
import math

import numpy as np
import pytest

from artifact.bsde import (BsdeConfig, BsdeError, constrained_limit, maximality_probe, solve_constrained,
                           solve_finite_horizon, solve_penalized)
from artifact.model import build_desk_model, build_heat_model
from artifact.oracle import Oracle1DModel, brute_force_value, hjb_discounted, hjb_parabolic
from artifact.state_sim import ControlPolicy, TimeGrid, simulate_state
from conftest import const_cost_model

X0, A0 = np.zeros(1), np.zeros(1)
XCOST = {"name": "state_tanh2", "params": [1.0], "M_ell": 1.0, "L_ell": 0.77}
FAST = BsdeConfig(grid_dx=0.05)


def test_constant_cost_penalized_grid():
    m = const_cost_model(1.0)
    beta = 0.5
    s = solve_penalized(m, X0, A0, beta, 4, n_paths=500)
    assert abs(s.y0 - (1 / beta) * (1 - math.exp(-beta * s.horizon))) < 1e-3
    assert s.diagnostics["E_int_abs_gamma"] < 1e-10
    assert s.diagnostics["clip_rate"] == 0.0


def test_constant_cost_regression_basis():
    m = build_heat_model(2, cost_params={"name": "constant", "params": [1.0], "M_ell": 1.0 + 1e-12, "L_ell": 0.0})
    beta = 0.5
    s = solve_penalized(m, np.zeros(2), A0, beta, 4, n_paths=500)
    assert abs(s.y0 - (1 / beta) * (1 - math.exp(-beta * s.horizon))) < 1e-3


def test_constant_cost_finite_horizon():
    s = solve_finite_horizon(const_cost_model(0.7), X0, A0, 0.0, 3.0, n_paths=300)
    assert s.y0 == pytest.approx(2.1, abs=1e-9)


def test_a_priori_bounds_desk(desk):
    beta = 0.5
    s = solve_constrained(desk, X0, A0, beta, n_paths=1000, config=FAST)
    d = s.diagnostics
    assert d["max_abs_Y"] <= desk.M_ell / beta
    assert d["clip_rate"] < 0.01
    assert d["sup_Z_all"] <= d["z_bound_weak"] + 3 * np.max(d["z_se"])
    assert d["k_nondecreasing"]


def test_singleton_control_matches_forward_mc():
    m = build_desk_model(XCOST, gain=0.0).with_terminal("softabs", [1.0], 1.0)
    x0 = np.array([0.5])
    s = solve_finite_horizon(m, x0, A0, 0.0, 2.0, n_paths=2000, config=BsdeConfig(h=0.025))
    g = TimeGrid.from_step(2.0, 0.0025)
    e = simulate_state(m, x0, ControlPolicy.constant([0.0]), g, 20000, seed=1, keep_noise=False, workers=4)
    c = m.ell(e.states, np.zeros(e.states.shape[:2] + (1,)))
    tot = np.trapezoid(c, g.nodes, axis=1) + m.phi(e.states[:, -1])
    assert abs(s.y0 - tot.mean()) <= 3 * tot.std(ddof=1) / math.sqrt(len(tot))


def test_finite_horizon_vs_parabolic_oracle(desk, desk_oracle):
    s = solve_finite_horizon(desk, X0, A0, 0.0, 2.0, n_paths=2000, config=BsdeConfig(h=0.025))
    ref = hjb_parabolic(desk_oracle, 2.0, dt=0.005)(0.0)
    assert abs(s.y0 - ref) <= 0.03 * ref


def test_ladder_flat_when_control_is_inert():
    m = build_desk_model(XCOST, gain=0.0)
    lim, rep = constrained_limit(m, X0, A0, 0.5, [1, 4, 16], n_paths=500, config=FAST)
    assert max(rep.y0) - min(rep.y0) < 1e-10
    assert abs(rep.K_T_largest_n) < 1e-10
    assert rep.monotone


def test_ladder_saturates_at_oracle_value():
    cost = {"name": "tanh2_minsq", "params": [1.0, 1.0], "M_ell": 2.0, "L_ell": 0.77}
    m = build_desk_model(cost)
    beta = 0.5
    lim, rep = constrained_limit(m, X0, A0, beta, [1, 2, 4, 8, 16, 32, 64], n_paths=1000, config=FAST)
    y = rep.y0
    assert rep.monotone and rep.k_nondecreasing
    assert y[0] > y[1] > y[2]
    assert rep.saturated_at is not None
    ref = hjb_discounted(Oracle1DModel.from_model(m), beta)(0.0)
    assert abs(rep.limit_value - ref) <= 0.03 * ref
    for s in lim.ladder_solutions:
        assert np.all(np.diff(s.k_path, axis=1) >= 0) and np.all(s.k_path[:, 0] == 0)


def test_maximality_identity_and_extra_push(desk):
    ref = solve_constrained(desk, X0, A0, 0.5, n_paths=1000, config=FAST)
    same = maximality_probe(desk, ref, ref)
    assert same.passed and abs(same.min_margin) <= same.tol
    pushed = solve_constrained(desk, X0, A0, 0.5, n_paths=1000, config=FAST.replace(extra_k_rate=0.05))
    rep = maximality_probe(desk, pushed, ref)
    assert pushed.y0 < ref.y0 and rep.passed


def test_finite_horizon_restriction(desk):
    ref = solve_constrained(desk, X0, A0, 0.5, n_paths=1000, config=FAST)
    fh = solve_finite_horizon(desk, X0, A0, 0.5, 2.0, phi=lambda x: ref.value_at(x), n_paths=1000, config=FAST)
    assert abs(fh.y0 - ref.y0) <= 2e-3 * desk.M_ell / 0.5


def test_brute_force_upper_bounds_bsde(desk):
    for x0 in (0.0, 0.5):
        bf = brute_force_value(desk, np.array([x0]), 0.6, np.linspace(-3, 3, 5), 3, n_paths=4000, seed=1)
        s = solve_finite_horizon(desk, np.array([x0]), A0, 0.0, 0.6, n_paths=2000, config=BsdeConfig(h=0.2))
        assert s.y0 <= bf.value + 3 * bf.se


def test_regression_basis_refinement_stable():
    m = build_heat_model(2)
    y = [solve_constrained(m, np.zeros(2), A0, 0.5, n_paths=1000, config=BsdeConfig(x_degree=d, h=0.1)).y0
         for d in (2, 3)]
    assert abs(y[1] - y[0]) <= 1e-3 * m.M_ell / 0.5


def test_errors(desk):
    with pytest.raises(ValueError):
        solve_penalized(desk, X0, A0, 0.0, 1)
    with pytest.raises(ValueError):
        BsdeConfig.from_dict({"h": 0.1, "colour": 1})
    with pytest.raises(BsdeError, match="horizon"):
        solve_penalized(desk, X0, A0, 0.5, 1, grid=TimeGrid(0, 2, 20))
    with pytest.raises(ValueError):
        constrained_limit(desk, X0, A0, 0.5, [4, 2])
    with pytest.raises(ValueError):
        solve_finite_horizon(desk, X0, A0, 0.0, 1.0, grid=TimeGrid(0, 2, 20))


def test_json_and_csv(tmp_path):
    s = solve_finite_horizon(const_cost_model(1.0), X0, A0, 0.0, 1.0, n_paths=200, config=BsdeConfig(h=0.1))
    s.write_json(tmp_path / "s.json")
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["penalization_n"] == "inf" and doc["y0"] == pytest.approx(1.0)
    s.write_csv(tmp_path / "s.csv", header="seed=0")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[1] == "t,mean_Y,sup_abs_Z,mean_abs_Gamma,mean_K" and len(lines) == 2 + 11
