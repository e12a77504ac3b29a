"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -s tests/test_acceptance.py`` to see the report lines.
"""
import filecmp
import math
from pathlib import Path

import numpy as np
import pytest

from artifact import cli
from artifact.bsde import BsdeConfig, constrained_limit, solve_constrained, solve_finite_horizon, solve_penalized
from artifact.ergodic import ergodic_cost, martingale_residual, vanishing_discount_sweep
from artifact.model import build_desk_model
from artifact.oracle import Oracle1DModel, brute_force_value, hjb_discounted, hjb_ergodic, hjb_parabolic
from artifact.randomization import (approximating_alpha, randomized_value_mc, required_horizon,
                                    simulate_randomized_pair, tracking_alpha)
from artifact.state_sim import ControlPolicy, TimeGrid, contraction_gap, moment_report, simulate_state
from conftest import DESK_X_GRID, const_cost_model, free_model

ROOT = Path(__file__).resolve().parents[1]


def report(k, ok, msg):
    print(f"\ncriterion {k}: {'PASS' if ok else 'FAIL'}: {msg}")
    return ok


# 1 ---------------------------------------------------------------- ramp rate

def test_criterion_1_randomization_rate():
    N = 10_000
    rng = np.random.default_rng(1)
    eta = rng.normal(size=(N, 2)) * np.sqrt(2.0)          # E|eta|^2 = 4
    rows, ok = [], True
    for n in (10, 100, 1000):
        ap = approximating_alpha(eta, n, [0.5, 0.25], t0=0.0, T=1.0)
        err = ap.measured_error()
        mean, se = err.mean(), err.std(ddof=1) / math.sqrt(N)
        target = ap.formula_value
        good = abs(mean - target) <= 3 * se
        ok &= good
        rows.append(f"n={n}: measured {mean:.5g} +- {se:.2g} vs E|eta|^2/n = {target:.5g}")
    report(1, ok, "; ".join(rows))
    assert ok


# 2 ---------------------------------------------------------------- a priori bounds

SHIPPED = ("desk1d", "desk1d_xonly", "heat4", "colored2")


def test_criterion_2_a_priori_bounds():
    ok, rows = True, []
    for name in SHIPPED:
        m = cli.resolve_model(f"models/{name}.json", ROOT)
        cfg = BsdeConfig(h=0.05, grid_dx=0.05) if m.n_modes == 1 else BsdeConfig(h=0.2, workers=4)
        for beta in (0.5, 0.125):
            s = solve_constrained(m, np.zeros(m.n_modes), np.zeros(m.m), beta, n_paths=1000, config=cfg)
            d = s.diagnostics
            zb = d["z_bound_weak"] + 3 * float(np.max(d["z_se"]))
            good = d["max_abs_Y"] <= m.M_ell / beta and d["clip_rate"] < 0.01 and d["sup_Z_all"] <= zb
            ok &= good
            rows.append(f"{name} beta={beta}: |Y|max {d['max_abs_Y']:.3g}/{m.M_ell / beta:.3g}, "
                        f"clip {d['clip_rate']:.2%}, sup Z {d['sup_Z_all']:.3g}/{zb:.3g}")
    report(2, ok, "; ".join(rows))
    assert ok


# 3 ---------------------------------------------------------------- monotone ladder

def test_criterion_3_penalization_monotone(desk):
    beta = 0.5
    tol = 1e-3 * desk.M_ell / beta
    lim, rep = constrained_limit(desk, np.zeros(1), np.zeros(1), beta, [1, 2, 4, 8, 16, 32, 64], n_paths=1000,
                                 config=BsdeConfig(grid_dx=0.05), seed=3, tol=tol)
    k_ok = all(np.all(np.diff(s.k_path, axis=1) >= 0) and np.all(s.k_path[:, 0] == 0)
               for s in lim.ladder_solutions)
    ok = rep.monotone and k_ok
    report(3, ok, f"Y0(n) = {np.round(rep.y0, 4).tolist()}, worst increase {rep.worst_increase:.2g} "
                  f"(tol {tol:.2g}), K nondecreasing on every path: {k_ok}")
    assert ok


# 4 ---------------------------------------------------------------- discounted oracle

def test_criterion_4_discounted_oracle(desk, desk_discounted_025):
    beta = 0.25
    xg = np.linspace(-2.0, 2.0, 9)
    s = solve_constrained(desk, np.zeros(1), np.zeros(1), beta, n_paths=1000, seed=1,
                          config=BsdeConfig(h=0.025, design_spread_x=2.5))
    v = s.value_at(xg[:, None])
    ref = desk_discounted_025(xg)
    rel = float(np.max(np.abs(v - ref) / np.abs(ref)))
    ok = rel <= 0.03
    report(4, ok, f"max relative error {rel:.3%} over 9 points (tol 3%)")
    assert ok


# 5 ---------------------------------------------------------------- ergodic consistency

def test_criterion_5_ergodic_consistency(desk_sweep, desk_long_zero, desk_ergodic):
    lam_vd, lam_lt, lam_or = desk_sweep.lam, desk_long_zero.lam, desk_ergodic.lam
    lams = [lam_vd, lam_lt, lam_or]
    pair = max(abs(a - b) / abs(b) for a in lams for b in lams)
    ref = desk_ergodic(DESK_X_GRID)
    vrel = float(np.max(np.abs(desk_sweep.v_hat - ref)) / np.max(np.abs(ref)))
    ok = pair <= 0.05 and vrel <= 0.05
    report(5, ok, f"lambda vd {lam_vd:.5f}, long-time {lam_lt:.5f}, oracle {lam_or:.5f}, worst pair gap "
                  f"{pair:.2%}; v_hat sup error {vrel:.2%} (tol 5%)")
    assert ok


# 6 ---------------------------------------------------------------- terminal washout

def test_criterion_6_terminal_washout(desk_long_zero, desk_long_softabs):
    a, b = desk_long_zero.lam, desk_long_softabs.lam
    rel = abs(a - b) / abs(a)
    ok = rel < 0.01
    report(6, ok, f"long-time lambda with phi=0 {a:.5f}, with soft |x| {b:.5f}, gap {rel:.3%} (tol 1%)")
    assert ok


# 7 ---------------------------------------------------------------- lower bound and optimality

def test_criterion_7_lower_bound_and_optimality(desk, desk_ergodic):
    lam = desk_ergodic.lam
    T, N = 50.0, 2000
    heuristics = {
        "zero": ControlPolicy.constant([0.0]),
        "plus_one": ControlPolicy.constant([1.0]),
        "minus_one": ControlPolicy.constant([-1.0]),
        "lean_back": ControlPolicy.feedback(lambda t, x: -2.0 * x[:, :1], bound=3.0),
        "bang_bang": ControlPolicy.feedback(lambda t, x: -3.0 * np.sign(x[:, :1])),
    }
    ok, rows = True, []
    for name, pol in heuristics.items():
        est = ergodic_cost(desk, pol, T, N, seed=7)
        good = est.value >= lam - est.budget
        ok &= good
        rows.append(f"{name} {est.value:.4f}")
    opt = ControlPolicy.feedback(desk_ergodic.feedback())
    est = ergodic_cost(desk, opt, T, N, seed=7)
    opt_ok = abs(est.value - lam) <= est.budget
    mr = martingale_residual(desk, opt, lambda x: desk_ergodic(x[:, 0]), lam, TimeGrid.from_step(20.0, 0.01), 1000,
                             seed=8, burn_in=2.0)
    m_ok = mr.max_abs_drift <= 0.05 * desk.M_ell
    ok = ok and opt_ok and m_ok
    report(7, ok, f"lambda {lam:.4f}; heuristics " + ", ".join(rows) +
           f"; oracle feedback {est.value:.4f} (budget {est.budget:.2g}); martingale drift sup "
           f"{mr.max_abs_drift:.3g} (tol {0.05 * desk.M_ell:.3g})")
    assert ok


# 8 ---------------------------------------------------------------- independence of a0

def test_criterion_8_value_independent_of_a0():
    m = cli.resolve_model("models/desk1d_xonly.json", ROOT)
    beta, h, gain = 0.5, 0.005, 100.0
    target = hjb_discounted(Oracle1DModel.from_model(m), beta).feedback()
    alpha = tracking_alpha(target, gain, m.r, bound=1e4)
    g = TimeGrid.from_step(16.0, h)
    v = [randomized_value_mc(m, np.zeros(1), np.array([a]), alpha, beta, g, 4000, seed=4, tail_tol=1e-2,
                             workers=4) for a in (3.0, -3.0)]
    gap, se = abs(v[0].value - v[1].value), math.hypot(v[0].se, v[1].se)
    ok = gap <= 3 * se
    report(8, ok, f"a0=+3: {v[0].value:.4f}, a0=-3: {v[1].value:.4f}, gap {gap:.2g} vs 3 SE {3 * se:.2g}")
    assert ok


# 9 ---------------------------------------------------------------- determinism

def _payload_equal(a, b):
    files = sorted(p.name for p in a.iterdir() if p.name != "run_record.json")
    same = [filecmp.cmp(a / f, b / f, shallow=False) for f in files]
    return files, all(same)


def test_criterion_9_determinism(tmp_path):
    ok, rows = True, []
    for name in ("validate_heat4", "simulate_heat4", "bsde_desk1d"):
        man = ROOT / "manifests" / f"{name}.yaml"
        outs = []
        for w in (1, 3):
            d = tmp_path / f"{name}_w{w}"
            assert cli.main(["run", "--manifest", str(man), "--out", str(d), "--workers", str(w)]) == 0
            outs.append(d)
        files, same = _payload_equal(*outs)
        ok &= same and len(files) > 0
        rows.append(f"{name}: {len(files)} files identical={same}")
    report(9, ok, "; ".join(rows))
    assert ok


# 10 --------------------------------------------------------------- trivial battery

def _battery():
    checks = {}
    m0 = free_model([-1.0, -4.0], [0.0, 0.0])
    g = TimeGrid(0.0, 1.0, 20)
    x0 = np.array([1.0, -0.5])
    e = simulate_state(m0, x0, ControlPolicy.constant([0.0]), g, 2, seed=0)
    checks["zero noise semigroup"] = (np.max(np.abs(e.states[0] - np.exp(np.outer(g.nodes, m0.lam)) * x0)), 1e-12)
    mz = free_model([-1.0], [0.0])
    r = moment_report(simulate_state(mz, np.zeros(1), None, g, 4, seed=0))
    checks["zero model moments"] = (max(r.sup_moments[2][0], np.max(r.mean_abs)), 0.0)
    gap = contraction_gap(m0, x0, x0, None, g, 3, seed=0)
    checks["identical starts gap"] = (np.max(gap), 0.0)

    d = build_desk_model()
    c = np.array([0.4])
    p0 = simulate_randomized_pair(d, np.zeros(1), np.zeros(1), None, g, 10, seed=1)
    p1 = simulate_randomized_pair(d, np.zeros(1), np.zeros(1), ControlPolicy.constant(c), g, 10, seed=1)
    shift = p1.control_channel[:, :, 0] - p0.control_channel[:, :, 0]
    checks["constant intensity channel mean"] = (np.max(np.abs(shift - g.nodes * d.r[0] * c[0])), 1e-12)
    e10, e20 = (approximating_alpha([1.0], n, [0.5]).measured_error()[0] for n in (10, 20))
    checks["ramp error ratio"] = (abs(e10 / e20 - 2.0), 1e-10)

    mc = const_cost_model(1.0)
    beta = 0.5
    v = randomized_value_mc(mc, np.zeros(1), np.zeros(1), None, beta,
                            TimeGrid.from_step(required_horizon(1.0, beta, 1e-3), 0.01), 10, seed=0)
    checks["constant cost randomized value"] = (abs(v.value - 2.0), 1e-3)
    s = solve_penalized(mc, np.zeros(1), np.zeros(1), beta, 4, n_paths=200, config=BsdeConfig(grid_dx=0.1))
    checks["constant cost penalized Y0"] = (abs(s.y0 - (1 - math.exp(-beta * s.horizon)) / beta), 1e-3)
    s = solve_finite_horizon(mc, np.zeros(1), np.zeros(1), 0.0, 2.0, n_paths=200, config=BsdeConfig(h=0.1))
    checks["constant cost finite horizon Y0"] = (abs(s.y0 - 2.0), 1e-3)
    est = vanishing_discount_sweep(mc, [-1.0, 0.0, 1.0], [0.5, 0.25],
                                   BsdeConfig(h=0.1, grid_dx=0.1, tail_tol=1e-7), n_paths=100)
    checks["constant cost sweep lambda"] = (abs(est.lam - 1.0), 1e-3)
    checks["constant cost sweep v_hat"] = (np.max(np.abs(est.v_hat)), 1e-3)
    ec = ergodic_cost(mc, ControlPolicy.constant([0.0]), 20.0, 10, seed=0)
    checks["constant cost ergodic cost"] = (abs(ec.value - 1.0), 1e-12)
    zero = lambda x: np.zeros(len(x))
    mr = martingale_residual(mc, None or ControlPolicy.constant([0.0]), zero, 1.0, TimeGrid(0, 2, 40), 10, seed=0)
    checks["constant cost martingale drift"] = (mr.max_abs_drift, 1e-12)
    mr = martingale_residual(mc, ControlPolicy.constant([0.0]), zero, 2.0, TimeGrid(0, 2, 40), 10, seed=0)
    checks["shifted lambda drift is -1"] = (abs(mr.min_drift + 1.0), 1e-9)

    o = Oracle1DModel(lambda x, a: -2 * x + np.tanh(a), 1.0, lambda x, a: 1.0 + 0 * x * a, [-1.0, 0.0, 1.0],
                      -5, 5, 201)
    checks["oracle constant discounted"] = (np.max(np.abs(hjb_discounted(o, 0.5).v - 2.0)), 1e-8)
    checks["oracle constant ergodic"] = (abs(hjb_ergodic(o).lam - 1.0), 1e-8)
    og = o.with_cost(lambda x, a: np.tanh(a) ** 2 + 0 * x)
    r = hjb_ergodic(og)
    checks["oracle control-only cost"] = (max(abs(r.lam), np.max(np.abs(r.v))), 1e-8)
    checks["oracle constant parabolic"] = (np.max(np.abs(hjb_parabolic(o, 1.5, dt=0.1).v - 1.5)), 1e-8)
    phi = lambda x: np.tanh(x) ** 2
    checks["oracle zero horizon"] = (np.max(np.abs(hjb_parabolic(o, 0.0, phi).v - phi(o.x))), 0.0)
    b1 = brute_force_value(d, np.zeros(1), 0.6, [-1.0, 0.0, 1.0], 3, n_paths=200, seed=2)
    b2 = brute_force_value(d, np.zeros(1), 0.6, [-1.0, -0.5, 0.0, 0.5, 1.0], 3, n_paths=200, seed=2)
    checks["brute force larger grid not worse"] = (max(0.0, b2.value - b1.value), 0.0)
    return checks


def test_criterion_10_trivial_battery():
    checks = _battery()
    bad = [k for k, (err, tol) in checks.items() if not err <= tol]
    ok = not bad
    worst = max(err for err, _ in checks.values())
    report(10, ok, f"{len(checks)} closed-form checks, worst error {worst:.2g}" +
           (f"; failing: {', '.join(bad)}" if bad else ""))
    assert ok
