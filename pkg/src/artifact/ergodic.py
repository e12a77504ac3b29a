"""Average-cost quantities: the constant lam and the bias v_hat.

Two estimators share the constrained BSDE solver:

* vanishing discount: beta v^beta(0) -> lam and v^beta(x) - v^beta(0) -> v_hat
  along a decreasing beta ladder (affine extrapolation in beta for lam);
* long horizon: v^T(x0) / T -> lam for beta = 0 and any admissible terminal cost.

Forward checks (time-averaged cost of a policy, drift of the process
v_hat(X_t) + int l - lam t) use the state simulator only.
"""
import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import bsde
from .state_sim import TimeGrid, _simulate


class ErgodicError(RuntimeError):
    pass


def _as_grid(model, x_grid):
    x = np.asarray(x_grid, float)
    if x.ndim == 1 and model.n_modes == 1:
        x = x[:, None]
    x = np.atleast_2d(x)
    if x.shape[1] != model.n_modes:
        raise ValueError(f"x_grid has {x.shape[1]} columns, model has {model.n_modes} modes")
    zero = np.nonzero(np.all(x == 0.0, axis=1))[0]
    if not len(zero):
        raise ValueError("x_grid must contain the origin")
    return x, int(zero[0])


def _run_jobs(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))


def _lipschitz_on_grid(x, v, i0):
    d = np.linalg.norm(x - x[i0], axis=1)
    mask = d > 0
    return float(np.max(np.abs(v[mask] - v[i0]) / d[mask])) if mask.any() else 0.0


@dataclass
class ErgodicEstimate:
    lam: float
    x_grid: np.ndarray
    v_hat: np.ndarray
    beta_ladder: list = field(default_factory=list)    # (beta, v^beta(0), beta v^beta(0))
    t_ladder: list = field(default_factory=list)       # (T, v^T(x0), v^T(x0)/T, r(T))
    extrapolation_diagnostics: dict = field(default_factory=dict)

    def v_hat_fn(self):
        """Interpolating evaluator of v_hat (one-mode grids: piecewise linear, flat outside)."""
        x = self.x_grid
        if x.shape[1] != 1:
            raise ValueError("interpolation is only provided for one-mode grids")
        order = np.argsort(x[:, 0])
        xs, vs = x[order, 0], self.v_hat[order]
        return lambda z: np.interp(np.asarray(z, float).reshape(len(z), -1)[:, 0], xs, vs)

    def check_invariants(self, model, tol=0.05):
        i0 = int(np.nonzero(np.all(self.x_grid == 0.0, axis=1))[0][0])
        lip = _lipschitz_on_grid(self.x_grid, self.v_hat, i0)
        bound = model.L_ell / model.mu
        return {
            "v_hat_origin_zero": bool(self.v_hat[i0] == 0.0),
            "lipschitz_constant": lip,
            "lipschitz_bound": bound,
            "lipschitz_ok": bool(lip <= bound * (1 + tol)),
            "lam_finite": bool(np.isfinite(self.lam)),
            "lam_bounded": bool(abs(self.lam) <= model.M_ell),
        }

    def to_json(self):
        return bsde._jsonable({
            "lambda": self.lam, "x_grid": self.x_grid, "v_hat": self.v_hat,
            "beta_ladder": [list(r) for r in self.beta_ladder],
            "t_ladder": [list(r) for r in self.t_ladder],
            "extrapolation_diagnostics": self.extrapolation_diagnostics,
        })

    def write_csv(self, prefix, header=None):
        """Three tables: <prefix>_beta.csv, <prefix>_T.csv, <prefix>_vhat.csv."""
        tables = {
            "beta": (["beta", "v_beta_0", "beta_v_beta_0"], self.beta_ladder),
            "T": (["T", "v_T_x0", "v_T_over_T", "residual"], self.t_ladder),
            "vhat": ([f"x{j}" for j in range(self.x_grid.shape[1])] + ["v_hat"],
                     [list(x) + [v] for x, v in zip(self.x_grid, self.v_hat)]),
        }
        paths = []
        for key, (cols, rows) in tables.items():
            p = f"{prefix}_{key}.csv"
            with open(p, "w", newline="") as fh:
                if header:
                    fh.write(f"# {header}\n")
                w = csv.writer(fh)
                w.writerow(cols)
                for r in rows:
                    w.writerow([repr(float(v)) for v in r])
            paths.append(p)
        return paths


def affine_extrapolation(betas, values):
    """Fit y = lam + c1 beta through the two smallest betas; residuals on the rest."""
    b, y = np.asarray(betas, float), np.asarray(values, float)
    order = np.argsort(b)
    b1, b2 = b[order[0]], b[order[1]]
    y1, y2 = y[order[0]], y[order[1]]
    c1 = (y2 - y1) / (b2 - b1)
    lam = y1 - c1 * b1
    resid = y - (lam + c1 * b)
    return float(lam), float(c1), resid


def vanishing_discount_sweep(model, x_grid, beta_ladder, bsde_config=None, *, a0=None, seed=0, n_paths=None,
                             cauchy_tol=None, workers=1):
    """lam and v_hat from constrained solves along a decreasing beta ladder.

    Each rung is one solve of the constrained (n = inf) equation whose time-0
    value function is read at every grid point. The design cloud is widened
    to cover the grid."""
    betas = [float(b) for b in beta_ladder]
    if len(betas) < 2:
        raise ValueError("beta ladder needs at least two entries")
    if any(b <= 0 for b in betas) or any(b2 >= b1 for b1, b2 in zip(betas, betas[1:])):
        raise ValueError("beta ladder must be strictly decreasing positives")
    x, i0 = _as_grid(model, x_grid)
    cfg = bsde._cfg(bsde_config, n_paths)
    reach = float(np.abs(x).max())
    if np.max(cfg.design_spread_x) < reach:
        cfg = cfg.replace(design_spread_x=reach + 0.5)
    a0 = np.zeros(model.m) if a0 is None else np.asarray(a0, float)
    x0 = np.zeros(model.n_modes)

    def job(beta):
        sol = bsde.solve_constrained(model, x0, a0, beta, config=cfg, seed=seed)
        return sol.value_at(x), sol.diagnostics

    out = _run_jobs(job, betas, workers)
    V = np.array([v for v, _ in out])                     # (B, G)
    v0 = V[:, i0]
    bv0 = np.array(betas) * v0
    lam, c1, resid = affine_extrapolation(betas, bv0)
    vh = V - v0[:, None]
    v_hat = vh[-1].copy()
    v_hat[i0] = 0.0
    gaps = [float(np.max(np.abs(vh[j + 1] - vh[j]))) for j in range(len(betas) - 1)]
    scale = max(float(np.max(np.abs(v_hat))), 1e-12)
    ctol = 0.01 * scale if cauchy_tol is None else cauchy_tol
    cauchy_ok = all(g2 <= g1 + ctol for g1, g2 in zip(gaps, gaps[1:]))
    diag = {
        "slope_c1": c1,
        "residuals": resid.tolist(),
        "max_residual_other": float(np.max(np.abs(resid))) if len(resid) else 0.0,
        "cauchy_gaps": gaps,
        "cauchy_tol": ctol,
        "cauchy_ok": bool(cauchy_ok),
        "clip_rates": [d["clip_rate"] for _, d in out],
        "tail_bounds": [d.get("tail_bound") for _, d in out],
        "v_hat_by_beta": vh.tolist(),
        "lam_smallest_beta": float(bv0[-1]),
    }
    est = ErgodicEstimate(lam, x, v_hat, [(b, float(v), float(y)) for b, v, y in zip(betas, v0, bv0)], [], diag)
    if not cauchy_ok:
        est.extrapolation_diagnostics["failure"] = "v_hat differences grow along the beta ladder"
    return est


@dataclass
class LongTimeResult:
    lam: float
    t_ladder: list          # (T, v^T(x0), v^T(x0)/T, r(T))
    intercept: float
    residual_constant: float
    residual_bounded: bool
    fit_points: int
    diagnostics: dict = field(default_factory=dict)

    def to_json(self):
        return bsde._jsonable(self.__dict__)


def long_time_sweep(model, x0, t_ladder, phi=None, bsde_config=None, *, a0=None, seed=0, n_paths=None,
                    v_hat_x0=0.0, lam_ref=None, rtol=None, workers=1):
    """Slope of T -> v^T(x0) from beta = 0 constrained solves.

    lam is the least-squares slope over the upper half of the ladder (at least
    two horizons); r(T) = v^T(x0) - v_hat(x0) - lam T with lam_ref when given."""
    Ts = [float(t) for t in t_ladder]
    if len(Ts) < 2 or any(t2 <= t1 for t1, t2 in zip(Ts, Ts[1:])) or Ts[0] <= 0:
        raise ValueError("T ladder must be strictly increasing positives with >= 2 entries")
    cfg = bsde._cfg(bsde_config, n_paths)
    x0 = np.atleast_1d(np.asarray(x0, float))
    a0 = np.zeros(model.m) if a0 is None else np.asarray(a0, float)

    def job(T):
        sol = bsde.solve_finite_horizon(model, x0, a0, 0.0, T, phi, bsde.INF, config=cfg, seed=seed)
        return float(sol.value_at(x0[None, :])[0]), sol.diagnostics

    out = _run_jobs(job, Ts, workers)
    v = np.array([o[0] for o in out])
    T = np.array(Ts)
    k = max(2, len(Ts) // 2)
    slope, intercept = np.polyfit(T[-k:], v[-k:], 1)
    lam = float(slope) if lam_ref is None else float(lam_ref)
    r = v - v_hat_x0 - lam * T
    tol = 0.01 * model.M_ell if rtol is None else rtol
    bounded = bool(abs(r[-1]) <= np.max(np.abs(r[:-1])) + tol)
    C = float(np.max(np.abs(r)) / (1 + np.linalg.norm(x0)))
    rows = [(t, float(vt), float(vt / t), float(rt)) for t, vt, rt in zip(Ts, v, r)]
    diag = {"slope_fit": float(slope), "doubling_slopes": [float((v[j + 1] - v[j]) / (T[j + 1] - T[j]))
                                                         for j in range(len(T) - 1)],
            "clip_rates": [d["clip_rate"] for _, d in out], "rtol": tol}
    res = LongTimeResult(float(slope), rows, float(intercept), C, bounded, k, diag)
    if not bounded:
        res.diagnostics["failure"] = "residual grows with the horizon"
    return res


# ---------------------------------------------------------------- forward checks

@dataclass
class CostEstimate:
    value: float
    se: float
    discretization: float       # |J_h - J_2h| on coupled noise
    transient: float            # (L_l / mu) E|X_T - x0| / T
    T: float
    h: float

    @property
    def budget(self):
        return 3 * self.se + self.discretization + self.transient

    def __float__(self):
        return self.value


def _path_average(model, policy, x0, grid, n_paths, seed, noise1=None):
    ens = _simulate(model, x0, grid, n_paths, seed, policy=policy, keep_noise=True, noise1=noise1)
    X, U = ens.states, ens.controls
    l0 = model.ell(X[:, :-1], U)
    l1 = model.ell(X[:, 1:], U)
    J = 0.5 * grid.h * (l0 + l1).sum(axis=1) / (grid.t_end - grid.t0)
    return J, ens


def ergodic_cost(model, policy, T, n_paths, seed, *, x0=None, h=0.02, coarse_check=True):
    """(1/T) E int_0^T l(X_t, u_t) dt with standard error and error budget.

    The running cost on each step uses the trapezoid of l(X_k, u_k) and
    l(X_{k+1}, u_k). The discretization term re-runs the same Brownian paths
    on a step 2h."""
    if T * model.mu < 10:
        import warnings
        warnings.warn(f"T = {T} is short against the mixing scale 1/mu = {1 / model.mu:g}")
    x0 = np.zeros(model.n_modes) if x0 is None else np.asarray(x0, float)
    grid = TimeGrid.from_step(T, h)
    if coarse_check and grid.n_steps % 2:
        grid = TimeGrid(0.0, grid.t_end + grid.h, grid.n_steps + 1)
    J, ens = _path_average(model, policy, x0, grid, n_paths, seed)
    disc = 0.0
    if coarse_check:
        z = ens.noise1
        zc = (z[:, 0::2] + z[:, 1::2]) / math.sqrt(2.0)
        Jc, _ = _path_average(model, policy, x0, TimeGrid(grid.t0, grid.t_end, grid.n_steps // 2),
                              n_paths, seed, noise1=zc)
        disc = float(abs(J.mean() - Jc.mean()))
    XT = ens.states[:, -1]
    drift = float(np.mean(np.linalg.norm(XT - x0, axis=1)))
    transient = model.L_ell / model.mu * drift / (grid.t_end - grid.t0)
    return CostEstimate(float(J.mean()), float(J.std(ddof=1) / math.sqrt(len(J))), disc, transient,
                        grid.t_end - grid.t0, grid.h)


@dataclass
class MartingaleReport:
    mean_drift: float
    se: float
    coef: np.ndarray           # drift ~ c0 + c1 x + c2 x^2 (first mode)
    fitted_range: tuple        # state quantiles used for the sup
    max_abs_drift: float
    min_drift: float
    per_step_mean: np.ndarray  # (K,) mean increment / h
    tol: Optional[float] = None

    def to_json(self):
        return bsde._jsonable(self.__dict__)


def martingale_residual(model, policy, v_hat_evaluator, lam, grid, n_paths, seed, *, x0=None, burn_in=0.0,
                        q=0.01):
    """Drift of M_t = v_hat(X_t) + int_0^t l ds - lam t under a policy.

    Increments dM_k / h are regressed on (1, x, x^2) of the first state mode;
    the sup of the fitted drift is taken over the [q, 1-q] state quantiles."""
    x0 = np.zeros(model.n_modes) if x0 is None else np.asarray(x0, float)
    ens = _simulate(model, x0, grid, n_paths, seed, policy=policy, keep_noise=True)
    X, U, h = ens.states, ens.controls, grid.h
    N, K = U.shape[0], U.shape[1]
    vh = np.asarray(v_hat_evaluator(X.reshape(-1, model.n_modes)), float).reshape(N, K + 1)
    cost = 0.5 * h * (model.ell(X[:, :-1], U) + model.ell(X[:, 1:], U))
    dM = (vh[:, 1:] - vh[:, :-1] + cost - lam * h) / h                  # (N, K)
    k0 = int(round(burn_in / h))
    D = dM[:, k0:].ravel()
    xs = X[:, k0:-1, 0].ravel()
    A = np.stack([np.ones_like(xs), xs, xs * xs], axis=1)
    coef, *_ = np.linalg.lstsq(A, D, rcond=None)
    lo, hi = np.quantile(xs, [q, 1 - q])
    xe = np.linspace(lo, hi, 101)
    fit = coef[0] + coef[1] * xe + coef[2] * xe ** 2
    # per-path means are independent: SE of the overall mean drift
    pm = dM[:, k0:].mean(axis=1)
    return MartingaleReport(float(D.mean()), float(pm.std(ddof=1) / math.sqrt(N)), coef, (float(lo), float(hi)),
                            float(np.max(np.abs(fit))), float(np.min(fit)), dM.mean(axis=0))

