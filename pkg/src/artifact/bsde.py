"""Backward regression solvers for the penalized and constrained BSDEs driven
by the uncontrolled randomized pair (X, I).

Scheme (regress-later): at every step the representation y_{k+1} is a
least-squares fit on basis functions of (X, I); conditional expectations of
y_{k+1} given (X_k, I_k) = (x, a) are then exact Gaussian integrals over a
one-step transition kernel, computed by Gauss-Hermite quadrature. Z and Gamma
come from the same integrals (Stein form for Z, increment form for Gamma).

Penalized driver ("shift" form): the penalty -n|Gamma| is the first-order
expansion of min over |alpha| <= n of the conditional mean after shifting
the channel by R alpha h; the minimum is taken over a nested set of shifts,
so the value is nonincreasing in n for a fixed design. The increment
K_{k+1} - K_k is the gap between the unshifted and minimizing mean and is
nonnegative by construction. The literal linearized driver is available as
driver="linear" (explicit, needs n r sqrt(h) small against the knot spacing).

Constrained limit (n = inf): y depends on x only and
Y_k(x) = min_a [cost + E y_{k+1}(X'(x, a))], with K increments equal to the
one-step regret of the channel value I_k.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import rng
from .basis import (ChebBasis, active_mask, gauss_hermite, hat_features, hat_interp,
                    pl_gauss_weights, pl_interp, quantile_knots)
from .randomization import required_horizon, simulate_randomized_pair
from .state_sim import TimeGrid, conv_std, phi1

INF = math.inf


class BsdeError(RuntimeError):
    pass


@dataclass
class BsdeConfig:
    h: float = 0.05
    n_paths: int = 2000
    x_degree: Optional[int] = None      # auto: 8 (one mode), 4 (two), 3 (more)
    x_modes: int = 4
    a_knots: int = 12
    a_x_degree: int = 2                 # state degree interacting with the control hats
    gh_x: int = 9
    gh_a: int = 7
    kernel: str = "local_linear"        # or "exp_euler"
    cost_rule: str = "trapezoid"        # or "left"
    discount: str = "exponential"       # or "implicit"
    driver: str = "shift"               # or "linear"
    n_candidates: int = 13
    refine_rounds: int = 5
    control_range: Optional[list] = None
    design_spread_x: object = 0.0
    design_spread_a: float = 0.0
    tail_tol: Optional[float] = None    # default 1e-3 * M_ell / beta
    clip: bool = True
    cond_max: float = 1e10
    extra_k_rate: float = 0.0
    workers: int = 1
    representation: str = "auto"        # "grid" (one mode), "regression", or "auto"
    grid_dx: float = 0.025
    grid_da: float = 0.25
    grid_dc: float = 0.05               # candidate spacing for the pointwise minimum

    def resolve(self, model):
        rep = self.representation
        if rep == "auto":
            return "grid" if model.n_modes == 1 and model.m == 1 else "regression"
        if rep == "grid" and (model.n_modes != 1 or model.m != 1):
            raise ValueError("grid representation needs one state mode and one control mode")
        if rep not in ("grid", "regression"):
            raise ValueError(f"unknown representation {rep!r}")
        return rep

    def degree(self, n_modes):
        if self.x_degree is not None:
            return int(self.x_degree)
        return {1: 8, 2: 4}.get(min(self.x_modes, n_modes), 3)

    def to_json(self):
        # worker count is scheduling, not numerics: results must not depend on it
        d = asdict(self)
        d.pop("workers")
        if isinstance(d["design_spread_x"], np.ndarray):
            d["design_spread_x"] = d["design_spread_x"].tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown bsde config keys: {sorted(bad)}")
        return cls(**d)

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return BsdeConfig(**d)


@dataclass
class StepRep:
    lo: np.ndarray
    hi: np.ndarray
    coef: np.ndarray                 # y: (Fx,) or (Fx, Ka)
    knots: Optional[np.ndarray] = None
    active: Optional[np.ndarray] = None
    z_coef: Optional[np.ndarray] = None
    g_coef: Optional[np.ndarray] = None
    resid_rms: float = 0.0
    xknots: Optional[np.ndarray] = None   # grid representation: node values on xknots x knots

    def to_json(self):
        f = lambda v: None if v is None else np.asarray(v).tolist()
        return {"lo": f(self.lo), "hi": f(self.hi), "knots": f(self.knots), "xknots": f(self.xknots),
                "y": f(self.coef),
                "z": f(self.z_coef), "gamma": f(self.g_coef), "resid_rms": float(self.resid_rms)}


class RegressionBasis:
    """Chebyshev state features, optionally tensorized with control hats."""

    def __init__(self, model, config, with_control):
        self.x = ChebBasis(model.n_modes, config.x_modes, config.degree(model.n_modes))
        self.with_control = with_control
        self.n_knots = config.a_knots if with_control else 0
        # high-degree state features enter only additively (constant in a)
        self.low = self.x.idx.sum(axis=1) <= config.a_x_degree
        self.cond_max = config.cond_max

    def fit(self, x, a, targets, step):
        p = self.x.p
        lo, hi = x[:, :p].min(axis=0), x[:, :p].max(axis=0)
        active = active_mask(self.x, lo, hi)
        knots = quantile_knots(a[:, 0], self.n_knots) if self.with_control else None
        fx = self.x.features(x, lo, hi, active)
        keep = np.ones(fx.shape[1], bool) if active is None else active > 0
        if self.with_control:
            fa = hat_features(a[:, 0], knots)
            lo_cols = np.flatnonzero(self.low & keep)
            hi_cols = np.flatnonzero(~self.low & keep)
            A = np.hstack([fx[:, hi_cols], (fx[:, lo_cols, None] * fa[:, None, :]).reshape(len(x), -1)])
        else:
            A = fx[:, keep]
        coef_k, _, rank, sv = np.linalg.lstsq(A, targets, rcond=None)
        cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
        if cond > self.cond_max or rank < A.shape[1]:
            raise BsdeError(f"ill-conditioned regression at step {step}: cond={cond:.3g}, "
                            f"rank {rank}/{A.shape[1]}")
        resid = targets[:, 0] - A @ coef_k[:, 0]
        rms = float(np.sqrt(np.mean(resid ** 2)))
        if self.with_control:
            Ka = len(knots)
            coef = np.zeros((fx.shape[1], Ka, targets.shape[1]))
            coef[hi_cols] = coef_k[:len(hi_cols), None, :]
            coef[lo_cols] = coef_k[len(hi_cols):].reshape(len(lo_cols), Ka, -1)
            y, z, g = coef[..., 0], coef[..., 1:1 + p], coef[..., -1]
        else:
            coef = np.zeros((fx.shape[1], targets.shape[1]))
            coef[keep] = coef_k
            y, z, g = coef[:, 0], coef[:, 1:1 + p], None
        return StepRep(lo, hi, y, knots, active, z, g, rms)

    def evaluate(self, rep, x, a=None):
        x = np.atleast_2d(np.asarray(x, float))
        fx = self.x.features(x, rep.lo, rep.hi, rep.active)
        if rep.knots is None:
            return fx @ rep.coef
        a = np.atleast_2d(np.asarray(a, float))
        return np.einsum("nf,fk,nk->n", fx, rep.coef, hat_features(a[:, 0], rep.knots))


class _Engine:
    """One-step operators shared by the penalized and constrained schemes."""

    def __init__(self, model, cfg, beta, with_control):
        self.model, self.cfg, self.beta = model, cfg, float(beta)
        self.h = cfg.h
        self.basis = RegressionBasis(model, cfg, with_control)
        self.tx, self.wx = gauss_hermite(cfg.gh_x)
        self.ta, self.wa = gauss_hermite(cfg.gh_a)
        self.disc = math.exp(-self.beta * self.h)
        d = model.n_modes
        self.sigma_pts = math.sqrt(d) * np.vstack([np.eye(d), -np.eye(d)])   # (2d, d)

    def kernel(self, x, a):
        m, h = self.model, self.h
        shape = np.broadcast_shapes(x.shape[:-1], a.shape[:-1])
        x = np.broadcast_to(x, shape + x.shape[-1:])
        a = np.broadcast_to(a, shape + a.shape[-1:])
        lam, g = m.lam, m.g
        if self.cfg.kernel == "local_linear":
            kap = lam + m.jac_diag(x, a)
            mean = x + h * phi1(kap * h) * (lam * x + m.F(x, a))
        elif self.cfg.kernel == "exp_euler":
            kap = np.broadcast_to(lam, x.shape)
            mean = np.exp(lam * h) * x + h * phi1(lam * h) * m.F(x, a)
        else:
            raise ValueError(f"unknown kernel {self.cfg.kernel!r}")
        std = np.abs(g) * conv_std(kap, h)
        covh = g * phi1(kap * h)          # Cov(X'_k, dW_k) / h
        return mean, std, covh

    def exp_cost(self, mean, std, a):
        """E l(X', a) for X' ~ N(mean, diag std^2); GH in 1-D, sigma points otherwise."""
        shape = np.broadcast_shapes(mean.shape[:-1], a.shape[:-1])
        mean = np.broadcast_to(mean, shape + mean.shape[-1:])
        a = np.broadcast_to(a, shape + a.shape[-1:])
        if mean.shape[-1] == 1:
            xq = mean[..., None, :] + std[..., None, :] * self.tx[:, None]
            return self.model.ell(xq, a[..., None, :]) @ self.wx
        xq = mean[..., None, :] + std[..., None, :] * self.sigma_pts
        return self.model.ell(xq, a[..., None, :]).mean(axis=-1)

    def combine(self, c0, c1, ey):
        h = self.h
        if self.cfg.cost_rule == "left":
            run0, run1 = h * c0, 0.0
        else:
            run0, run1 = 0.5 * h * c0, 0.5 * h * c1
        if self.cfg.discount == "exponential":
            return run0 + self.disc * (run1 + ey)
        return (run0 + run1 + ey) / (1 + h * self.beta)

    def evaluate(self, rep, x, a=None):
        return self.basis.evaluate(rep, x, a)

    def point(self, rep, x, a):
        """Step operator applied to y_{k+1} = rep at arbitrary points."""
        if math.isinf(self.n):
            y, _ = self.hard_min(x, rep, *self.ctrl)
        else:
            shifts = shift_set(self.n) if self.driver == "shift" else np.zeros(1)
            c0, c1, ey, gam, _ = self.pen_parts(x, a, rep, shifts)
            if self.driver == "shift":
                y = self.combine(c0, c1, ey).min(axis=1)
            else:
                y = self.combine(c0, c1, ey - self.n * self.h * _pen(gam, self.smoothing_k)[:, None])[:, 0]
        return y - self.cfg.extra_k_rate * self.h

    # --- constrained (x-only) ---------------------------------------

    def hard_Q(self, x, acand, rep):
        mean, std, _ = self.kernel(x[:, None, :], acand)
        ey = self.basis.x.expected(mean, std, rep.lo, rep.hi, self.tx, self.wx, rep.active) @ rep.coef
        c0 = self.model.ell(np.broadcast_to(x[:, None, :], acand.shape[:-1] + x.shape[-1:]), acand)
        c1 = self.exp_cost(mean, std, acand) if self.cfg.cost_rule == "trapezoid" else 0.0
        return self.combine(c0, c1, ey)

    def hard_min(self, x, rep, ctrl_grid, spacing):
        N, m = len(x), self.model.m
        Q = self.hard_Q(x, np.broadcast_to(ctrl_grid, (N,) + ctrl_grid.shape), rep)
        j = Q.argmin(axis=1)
        best_q = Q[np.arange(N), j]
        best_a = ctrl_grid[j].copy()
        step = np.array(spacing, float)
        for _ in range(self.cfg.refine_rounds):
            step = step / 2
            for jm in range(m):
                e = np.zeros(m)
                e[jm] = step[jm]
                cand = np.stack([best_a - e, best_a + e], axis=1)
                Qc = self.hard_Q(x, cand, rep)
                i = Qc.argmin(axis=1)
                qc = Qc[np.arange(N), i]
                better = qc < best_q
                best_q = np.where(better, qc, best_q)
                best_a[better] = cand[np.arange(N), i][better]
        return best_q, best_a

    def hard_z(self, x, a, rep):
        mean, std, covh = self.kernel(x, a)
        G = self.basis.x.expected_grad(mean, std, rep.lo, rep.hi, self.tx, self.wx, rep.active)
        dy = G @ rep.coef                                   # (N, p)
        return covh[:, :self.basis.x.p] * dy

    # --- penalized (x, a) --------------------------------------------

    def pen_parts(self, x, a, rep, shifts):
        h, r = self.h, self.model.r[0]
        sq = math.sqrt(h)
        mean, std, covh = self.kernel(x, a)
        Ex = self.basis.x.expected(mean, std, rep.lo, rep.hi, self.tx, self.wx, rep.active)
        P = Ex @ rep.coef                                               # (N, Ka)
        an = a[:, 0, None, None] + r * h * shifts[None, :, None] + r * sq * self.ta[None, None, :]
        ey = hat_interp(P, an, rep.knots) @ self.wa                     # (N, S)
        c0 = self.model.ell(x, a)[:, None]
        if self.cfg.cost_rule == "trapezoid":
            ash = a[:, None, :] + r * h * shifts[None, :, None]
            c1 = self.exp_cost(mean[:, None, :], std[:, None, :], ash)
        else:
            c1 = 0.0
        a_nodes = a[:, 0, None] + r * sq * self.ta[None, :]
        gam = (hat_interp(P, a_nodes, rep.knots) @ (self.wa * self.ta)) / sq
        G = self.basis.x.expected_grad(mean, std, rep.lo, rep.hi, self.tx, self.wx, rep.active)
        Pd = np.einsum("npf,fk->npk", G, rep.coef)
        dy = np.stack([hat_interp(Pd[:, j], a_nodes, rep.knots) @ self.wa for j in range(Pd.shape[1])], axis=1)
        z = covh[:, :self.basis.x.p] * dy
        return c0, c1, ey, gam, z


def shift_set(n):
    """Nested shift magnitudes: 0, +-2^j (2^j < n, j >= -2), +-n."""
    if n == 0:
        return np.zeros(1)
    mags = [2.0 ** j for j in range(-2, 64) if 2.0 ** j < n] + [float(n)]
    return np.concatenate([[0.0], -np.array(mags[::-1]), np.array(mags)])


@dataclass
class BsdeSolution:
    y0: float
    reps: list
    k_path: np.ndarray
    penalization_n: float
    discount: float
    horizon: float
    grid: TimeGrid
    x0: np.ndarray
    a0: np.ndarray
    diagnostics: dict
    config: BsdeConfig
    seed: int
    engine: object = field(default=None, repr=False)
    design_X: Optional[np.ndarray] = field(default=None, repr=False)
    design_I: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def y_coeffs(self):
        return [r.coef for r in self.reps]

    @property
    def z_coeffs(self):
        return [r.z_coef for r in self.reps]

    @property
    def gamma_coeffs(self):
        return [r.g_coef for r in self.reps]

    @property
    def constrained(self):
        return math.isinf(self.penalization_n)

    def y_at(self, k, x, a=None):
        """Fitted Y_{t_k} at states (and channel values for penalized runs)."""
        return self.engine.evaluate(self.reps[k], x, a)

    def value_at(self, x, a=None):
        """Y_0 at arbitrary (x, a): the t=0 step operator applied to y_1."""
        x = np.atleast_2d(np.asarray(x, float))
        if a is None:
            a = np.broadcast_to(self.a0, (len(x), self.engine.model.m))
        a = np.atleast_2d(np.asarray(a, float))
        a = np.broadcast_to(a, (len(x), a.shape[1])).copy()
        y = self.engine.point(self.reps[1], x, a)
        return np.clip(y, -self.diagnostics["bound_Y"], self.diagnostics["bound_Y"])

    def terminal_fn(self, k):
        """Callable x -> fitted Y_{t_k}(x) (constrained runs)."""
        rep, eng = self.reps[k], self.engine
        return lambda x: eng.evaluate(rep, np.reshape(x, (-1, np.shape(x)[-1]))).reshape(np.shape(x)[:-1])

    def to_json(self, include_coeffs=True):
        out = {"y0": self.y0, "penalization_n": "inf" if self.constrained else self.penalization_n,
               "discount": self.discount, "horizon": self.horizon,
               "grid": {"t0": self.grid.t0, "t_end": self.grid.t_end, "n_steps": self.grid.n_steps},
               "x0": np.asarray(self.x0).tolist(), "a0": np.asarray(self.a0).tolist(), "seed": self.seed,
               "config": self.config.to_json(), "diagnostics": _jsonable(self.diagnostics)}
        if include_coeffs:
            out["steps"] = [r.to_json() for r in self.reps]
        return out

    def write_json(self, path, include_coeffs=True, extra=None):
        doc = self.to_json(include_coeffs)
        if extra:
            doc.update(extra)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)

    def write_csv(self, path, header=None):
        d = self.diagnostics
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["t", "mean_Y", "sup_abs_Z", "mean_abs_Gamma", "mean_K"])
            t = self.grid.nodes
            for k in range(len(t)):
                w.writerow([repr(float(t[k])), repr(float(d["mean_Y"][k])), repr(float(d["sup_Z"][k])),
                            repr(float(d["mean_abs_gamma"][k])), repr(float(d["mean_K"][k]))])


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def _pen(gam, smoothing_k):
    return np.abs(gam) if smoothing_k is None else np.sqrt(gam ** 2 + 1.0 / smoothing_k)


def _design(model, x0, a0, grid, cfg, seed):
    N, d, m = cfg.n_paths, model.n_modes, model.m
    u = rng.uniforms(seed, rng.DESIGN, 0, N, d + m)
    sx = np.broadcast_to(np.asarray(cfg.design_spread_x, float), (d,))
    X0 = np.asarray(x0, float) + sx * (2 * u[:, :d] - 1)
    A0 = np.asarray(a0, float) + cfg.design_spread_a * (2 * u[:, d:] - 1)
    pair = simulate_randomized_pair(model, X0, A0, None, grid, N, seed, keep_noise=False, workers=cfg.workers)
    X, I = pair.ensemble.states, pair.ensemble.channel
    if pair.ensemble.failed:
        raise BsdeError(f"design simulation diverged on {len(pair.ensemble.failed)} paths")
    return X, I


def _control_grid(model, I, a0, cfg):
    m = model.m
    if cfg.control_range is not None:
        rg = np.asarray(cfg.control_range, float).reshape(-1, 2) if np.ndim(cfg.control_range) > 1 \
            else np.tile(np.asarray(cfg.control_range, float), (m, 1))
        lo, hi = rg[:, 0], rg[:, 1]
    else:
        flat = I.reshape(-1, m)
        lo = np.minimum(np.quantile(flat, 0.001, axis=0), np.asarray(a0) - 1.0)
        hi = np.maximum(np.quantile(flat, 0.999, axis=0), np.asarray(a0) + 1.0)
    per = max(3, int(round(cfg.n_candidates ** (1.0 / m)))) if m <= 2 else 5
    axes = [np.linspace(lo[j], hi[j], per) for j in range(m)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, m)
    spacing = (hi - lo) / (per - 1)
    return mesh, spacing


def _diag_common(model, beta, n, k_path, stats, y0, bound, resid_rms_max, z_se):
    mean_Y, max_Y, sup_Z, mean_G, gamma_int, clip_rate, growth = stats
    constrained = math.isinf(n)
    return {
        "clip_rate": clip_rate,
        "sup_Z": sup_Z, "sup_Z_all": float(sup_Z[:-1].max()), "z_se": z_se,
        "mean_abs_gamma": mean_G, "mean_Y": mean_Y, "mean_K": k_path.mean(axis=0),
        "E_int_abs_gamma": float(gamma_int.mean()),
        "n_int_abs_gamma": None if constrained else float(n * gamma_int.mean()),
        "K_T_mean": float(k_path[:, -1].mean()),
        "k_nondecreasing": bool(np.all(np.diff(k_path, axis=1) >= 0)),
        "max_abs_Y": float(max(max_Y, abs(y0))),
        "growth_constant": growth,
        "bound_Y": bound,
        "z_bound_weak": model.L_ell * model.G_norm() / model.mu,
        "z_bound_sharp": model.L_ell / (model.mu + beta),
        "resid_rms_max": resid_rms_max,
    }


def _backward(model, cfg, beta, grid, x0, a0, seed, n, terminal, infinite, smoothing_k=None):
    constrained = math.isinf(n)
    if not constrained and model.m != 1:
        raise ValueError("penalized representation supports a single control mode")
    X, I = _design(model, x0, a0, grid, cfg, seed)
    ctrl = _control_grid(model, I, a0, cfg) if constrained else None
    if cfg.resolve(model) == "grid":
        eng = _GridEngine(model, cfg, beta, n, X, I, x0, a0, smoothing_k, ctrl)
    else:
        eng = _Engine(model, cfg, beta, with_control=not constrained)
        eng.n, eng.smoothing_k, eng.ctrl = n, smoothing_k, ctrl
        eng.driver = cfg.driver if smoothing_k is None else "linear"
    bound = model.M_ell / beta if (infinite and beta > 0) else np.inf
    run = eng.backward_grid if isinstance(eng, _GridEngine) else (lambda *args: _backward_regression(eng, *args))
    reps, dK, stats, resid, z_se = run(X, I, grid, terminal, bound)
    N = X.shape[0]
    k_path = np.concatenate([np.zeros((N, 1)), np.cumsum(dK, axis=1)], axis=1)
    xs = np.atleast_2d(np.asarray(x0, float))
    as_ = np.atleast_2d(np.asarray(a0, float))
    y0 = float(eng.point(reps[1], xs, as_)[0])
    if cfg.clip and np.isfinite(bound):
        y0 = float(np.clip(y0, -bound, bound))
    diag = _diag_common(model, beta, n, k_path, stats, y0, bound, resid, z_se)
    diag["representation"] = "grid" if isinstance(eng, _GridEngine) else "regression"
    return BsdeSolution(y0, reps, k_path, n, float(beta), grid.t_end - grid.t0, grid, np.asarray(x0, float),
                        np.asarray(a0, float), diag, cfg, int(seed), eng, X, I)


def _backward_regression(eng, X, I, grid, terminal, bound):
    model, cfg, n = eng.model, eng.cfg, eng.n
    constrained = math.isinf(n)
    N, K = X.shape[0], grid.n_steps
    p = eng.basis.x.p
    shifts = shift_set(n) if (not constrained and eng.driver == "shift") else np.zeros(1)
    i0 = int(np.argmin(np.abs(shifts)))
    reps = [None] * (K + 1)
    YT = np.zeros(N) if terminal is None else np.asarray(terminal(X[:, K]), float)
    reps[K] = eng.basis.fit(X[:, K], I[:, K], np.column_stack([YT] + [np.zeros(N)] * (p + 1)), K)
    dK = np.zeros((N, K))
    mean_Y, sup_Z, mean_G = np.zeros(K + 1), np.zeros(K + 1), np.zeros(K + 1)
    mean_Y[K] = YT.mean()
    max_Y = float(np.abs(YT).max())
    clip_count, z_se = 0, 0.0
    growth = float(np.max(np.abs(YT) / (1 + np.linalg.norm(X[:, K], axis=1))))
    gamma_int = np.zeros(N)
    g_p = np.abs(model.g[:p])
    s_min = np.min(np.where(g_p > 0, g_p * conv_std(model.lam[:p], eng.h), np.inf))
    for k in range(K - 1, -1, -1):
        x, a, rep = X[:, k], I[:, k], reps[k + 1]
        if constrained:
            q, _ = eng.hard_min(x, rep, *eng.ctrl)
            q_chan = eng.hard_Q(x, a[:, None, :], rep)[:, 0]
            Y = np.minimum(q, q_chan)
            inc = q_chan - Y
            Z = eng.hard_z(x, a, rep)
            G = np.zeros(N)
        else:
            c0, c1, ey, G, Z = eng.pen_parts(x, a, rep, shifts)
            if eng.driver == "shift":
                Q = eng.combine(c0, c1, ey)
                Y = Q.min(axis=1)
                inc = Q[:, i0] - Y
            else:
                pen = n * eng.h * _pen(G, eng.smoothing_k)
                Y = eng.combine(c0, c1, ey - pen[:, None])[:, 0]
                inc = pen / (1 + eng.h * eng.beta) if cfg.discount == "implicit" else eng.disc * pen
        if cfg.extra_k_rate:
            Y = Y - cfg.extra_k_rate * eng.h
            inc = inc + cfg.extra_k_rate * eng.h
        if cfg.clip and np.isfinite(bound):
            clip_count += int((np.abs(Y) > bound).sum())
            Y = np.clip(Y, -bound, bound)
        dK[:, k] = inc
        gamma_int += np.abs(G) * eng.h
        mean_Y[k], mean_G[k] = Y.mean(), np.abs(G).mean()
        max_Y = max(max_Y, float(np.abs(Y).max()))
        sup_Z[k] = np.linalg.norm(Z, axis=1).max()
        if np.isfinite(s_min):
            z_se = max(z_se, float(g_p.max()) * rep.resid_rms / s_min)
        growth = max(growth, float(np.max(np.abs(Y) / (1 + np.linalg.norm(x, axis=1)))))
        reps[k] = eng.basis.fit(x, a, np.column_stack([Y, Z, G]), k)
    stats = (mean_Y, max_Y, sup_Z, mean_G, gamma_int, clip_count / float(N * K), growth)
    return reps, dK, stats, float(max(r.resid_rms for r in reps[1:])), z_se


def _uniform_knots(lo, hi, dx):
    k = max(2, int(math.ceil((hi - lo) / dx)) + 1)
    return np.linspace(lo, hi, k)


def _slopes(v, knots, axis):
    d = np.diff(v, axis=axis)
    shape = [1] * v.ndim
    shape[axis] = len(knots) - 1
    return d / np.diff(knots).reshape(shape)


class _GridEngine(_Engine):
    """Node representation for one state mode and one control mode.

    y_k is the piecewise-linear interpolant of its values on a fixed node
    grid (x nodes, and a nodes for penalized runs) laid over the range
    explored by the design paths. Conditional expectations of the
    interpolant are exact Gaussian integrals with nonnegative weights, so
    the step operator is monotone: with the nested shift sets this orders
    the n-ladder node by node."""

    def __init__(self, model, cfg, beta, n, X, I, x0, a0, smoothing_k, ctrl):
        super().__init__(model, cfg, beta, with_control=False)
        self.n, self.smoothing_k, self.ctrl = n, smoothing_k, ctrl
        self.driver = cfg.driver if smoothing_k is None else "linear"
        xs = X[..., 0].ravel()
        lo = min(np.quantile(xs, 5e-4), float(np.ravel(x0)[0])) - 0.5
        hi = max(np.quantile(xs, 1 - 5e-4), float(np.ravel(x0)[0])) + 0.5
        self.xk = _uniform_knots(lo, hi, cfg.grid_dx)
        self.r = float(model.r[0])
        self.sq = math.sqrt(self.h)
        if math.isinf(n):
            (clo, chi) = ctrl[0].min(), ctrl[0].max()
            self.ac = _uniform_knots(clo, chi, cfg.grid_dc)
            xa, ca = self.xk[:, None, None], self.ac[None, :, None]
            mean, std, _ = self.kernel(xa, ca)
            self.Wc = pl_gauss_weights(mean[..., 0], std[..., 0], self.xk)          # (Kx, C, Kx)
            self.c0c = model.ell(np.broadcast_to(xa, mean.shape), np.broadcast_to(ca, mean.shape))
            self.c1c = self.exp_cost(mean, std, np.broadcast_to(ca, mean.shape)) \
                if cfg.cost_rule == "trapezoid" else 0.0
            self.ak = None
        else:
            ai = I[..., 0].ravel()
            a_0 = float(np.ravel(a0)[0])
            alo = min(np.quantile(ai, 1e-3), a_0 - 1.0)
            ahi = max(np.quantile(ai, 1 - 1e-3), a_0 + 1.0)
            self.ak = _uniform_knots(alo, ahi, cfg.grid_da)
            self.shifts = shift_set(n) if self.driver == "shift" else np.zeros(1)
            self.i0 = int(np.argmin(np.abs(self.shifts)))
            xa, aa = self.xk[:, None, None], self.ak[None, :, None]
            mean, std, covh = self.kernel(xa, aa)
            self.covh = covh[..., 0]
            self.Wx, self.Px = pl_gauss_weights(mean[..., 0], std[..., 0], self.xk, segments=True)
            am = self.ak[:, None] + self.r * self.h * self.shifts[None, :]
            self.Wa = pl_gauss_weights(am, self.r * self.sq, self.ak)                 # (Ka, S, Ka)
            _, self.Pa = pl_gauss_weights(self.ak, self.r * self.sq, self.ak, segments=True)
            self.c0 = model.ell(np.broadcast_to(xa, mean.shape), np.broadcast_to(aa, mean.shape))
            if cfg.cost_rule == "trapezoid":
                ash = am[None, :, :, None]                                           # (1, Ka, S, 1)
                self.c1 = self.exp_cost(mean[:, :, None, :], std[:, :, None, :], ash)
            else:
                self.c1 = 0.0

    # representation helpers
    def _rep(self, y, z=None, g=None):
        return StepRep(lo=self.xk[:1], hi=self.xk[-1:], coef=y, knots=self.ak, z_coef=z, g_coef=g,
                       xknots=self.xk)

    def _interp(self, vals, x, a=None):
        v = pl_interp(vals, self.xk, x)
        return v if self.ak is None else hat_interp(v, a, self.ak)

    def evaluate(self, rep, x, a=None):
        x = np.atleast_2d(np.asarray(x, float))
        if rep.knots is None:
            return pl_interp(rep.coef, rep.xknots, x[:, 0])
        a = np.atleast_2d(np.asarray(a, float))
        return hat_interp(pl_interp(rep.coef, rep.xknots, x[:, 0]), a[:, 0], rep.knots)

    # one-step operators at nodes
    def _pen_nodes(self, y):
        Kx, Ka = len(self.xk), len(self.ak)
        E1 = (self.Wx.reshape(Kx * Ka, Kx) @ y).reshape(Kx, Ka, Ka)     # E_x y(X', a'_b)
        EY = np.matmul(E1.transpose(1, 0, 2), self.Wa.transpose(0, 2, 1)).transpose(1, 0, 2)   # (Kx, Ka, S)
        G = self.r * np.einsum("ijs,js->ij", _slopes(E1, self.ak, 2), self.Pa)
        Ea = y @ self.Wa[:, self.i0, :].T                                # (Kx', Ka)
        Z = self.covh * np.einsum("ijs,sj->ij", self.Px, _slopes(Ea, self.xk, 0))
        if self.driver == "shift":
            Q = self.combine(self.c0[..., None], self.c1, EY)
            Y = Q.min(axis=2)
            inc = Q[..., self.i0] - Y
        else:
            pen = self.n * self.h * _pen(G, self.smoothing_k)
            c1 = self.c1[..., 0] if np.ndim(self.c1) else 0.0
            Y = self.combine(self.c0, c1, EY[..., 0] - pen)
            inc = pen / (1 + self.h * self.beta) if self.cfg.discount == "implicit" else self.disc * pen
        return Y, inc, Z, G

    def _hard_nodes(self, y):
        Kx, C = self.Wc.shape[:2]
        Q = self.combine(self.c0c, self.c1c, (self.Wc.reshape(Kx * C, Kx) @ y).reshape(Kx, C))
        j = Q.argmin(axis=1)
        return Q, Q[np.arange(Kx), j], self.ac[j]

    def _z_at(self, y, x, a):
        mean, std, covh = self.kernel(x, a)
        _, P = pl_gauss_weights(mean[:, 0], std[:, 0], self.xk, segments=True)
        return covh[:, 0] * (P @ _slopes(y, self.xk, 0))

    def point(self, rep, x, a):
        x = np.atleast_2d(np.asarray(x, float))
        y = rep.coef
        if math.isinf(self.n):
            G = len(x)
            ca = np.broadcast_to(self.ac[None, :, None], (G, len(self.ac), 1))
            xa = np.broadcast_to(x[:, None, :], ca.shape)
            mean, std, _ = self.kernel(xa, ca)
            w = pl_gauss_weights(mean[..., 0], std[..., 0], self.xk)
            c1 = self.exp_cost(mean, std, ca) if self.cfg.cost_rule == "trapezoid" else 0.0
            out = self.combine(self.model.ell(xa, ca), c1, w @ y).min(axis=1)
        else:
            a = np.atleast_2d(np.asarray(a, float))
            mean, std, _ = self.kernel(x, a)
            E1 = pl_gauss_weights(mean[:, 0], std[:, 0], self.xk) @ y                 # (G, Ka)
            am = a[:, :1] + self.r * self.h * self.shifts[None, :]                      # (G, S)
            EY = np.einsum("gb,gsb->gs", E1, pl_gauss_weights(am, self.r * self.sq, self.ak))
            c0 = self.model.ell(x, a)[:, None]
            c1 = self.exp_cost(mean[:, None, :], std[:, None, :], am[..., None]) \
                if self.cfg.cost_rule == "trapezoid" else 0.0
            if self.driver == "shift":
                out = self.combine(c0, c1, EY).min(axis=1)
            else:
                _, P = pl_gauss_weights(a[:, 0], self.r * self.sq, self.ak, segments=True)
                G = self.r * np.einsum("gs,gs->g", _slopes(E1, self.ak, 1), P)
                pen = self.n * self.h * _pen(G, self.smoothing_k)
                out = self.combine(c0, c1, EY - pen[:, None])[:, 0]
        return out - self.cfg.extra_k_rate * self.h

    def backward_grid(self, X, I, grid, terminal, bound):
        cfg = self.cfg
        hard = math.isinf(self.n)
        N, K = X.shape[0], grid.n_steps
        xk = self.xk
        yT = np.zeros(len(xk)) if terminal is None else np.asarray(terminal(xk[:, None]), float).reshape(-1)
        y = yT if hard else np.repeat(yT[:, None], len(self.ak), axis=1)
        reps = [None] * (K + 1)
        reps[K] = self._rep(y)
        dK = np.zeros((N, K))
        mean_Y, sup_Z, mean_G = np.zeros(K + 1), np.zeros(K + 1), np.zeros(K + 1)
        YT = self.evaluate(reps[K], X[:, K], I[:, K])
        mean_Y[K] = YT.mean()
        max_Y = float(np.abs(y).max())
        growth = float(np.max(np.abs(y) / (1 + np.abs(xk)[:, None] if y.ndim > 1 else 1 + np.abs(xk))))
        clip_count, n_nodes = 0, 0
        gamma_int = np.zeros(N)
        for k in range(K - 1, -1, -1):
            x, a = X[:, k], I[:, k]
            if hard:
                Qn, Yn, astar = self._hard_nodes(y)
                Zn = self._z_at(y, xk[:, None], astar[:, None])
                Gn, Gp = None, np.zeros(N)
            else:
                Yn, incn, Zn, Gn = self._pen_nodes(y)
            if cfg.extra_k_rate:
                Yn = Yn - cfg.extra_k_rate * self.h
                if not hard:
                    incn = incn + cfg.extra_k_rate * self.h
            if cfg.clip and np.isfinite(bound):
                clip_count += int((np.abs(Yn) > bound).sum())
                Yn = np.clip(Yn, -bound, bound)
            n_nodes += Yn.size
            if hard:
                # value of keeping the channel I_k against the pointwise minimum
                q_chan = hat_interp(pl_interp(Qn, xk, x[:, 0]), a[:, 0], self.ac)
                Yp = np.minimum(self._interp(Yn, x[:, 0]), q_chan)
                inc = q_chan - Yp
                Zp = Zn
            else:
                Yp = self._interp(Yn, x[:, 0], a[:, 0])
                inc = self._interp(incn, x[:, 0], a[:, 0])
                Zp = self._interp(Zn, x[:, 0], a[:, 0])
                Gp = self._interp(Gn, x[:, 0], a[:, 0])
            dK[:, k] = inc
            gamma_int += np.abs(Gp) * self.h
            mean_Y[k], mean_G[k] = Yp.mean(), np.abs(Gp).mean()
            sup_Z[k] = float(np.abs(Zp).max())
            max_Y = max(max_Y, float(np.abs(Yn).max()))
            xn = np.abs(xk)[:, None] if Yn.ndim > 1 else np.abs(xk)
            growth = max(growth, float(np.max(np.abs(Yn) / (1 + xn))))
            y = Yn
            reps[k] = self._rep(Yn, Zn, Gn)
        stats = (mean_Y, max_Y, sup_Z, mean_G, gamma_int, clip_count / float(max(n_nodes, 1)), growth)
        return reps, dK, stats, 0.0, 0.0


def _infinite_grid(model, beta, cfg, grid):
    tol = cfg.tail_tol if cfg.tail_tol is not None else 1e-3 * model.M_ell / beta
    if grid is None:
        grid = TimeGrid.from_step(max(required_horizon(model.M_ell, beta, tol), cfg.h), cfg.h)
    tail = model.M_ell * math.exp(-beta * (grid.t_end - grid.t0)) / beta
    if tail > tol * (1 + 1e-12):
        raise BsdeError(f"tail bound {tail:.3g} exceeds tolerance {tol:.3g}: need horizon >= "
                        f"{required_horizon(model.M_ell, beta, tol):g}")
    return grid, tail


def _cfg(config, n_paths):
    cfg = config if config is not None else BsdeConfig()
    if isinstance(cfg, dict):
        cfg = BsdeConfig.from_dict(cfg)
    if n_paths is not None:
        cfg = cfg.replace(n_paths=int(n_paths))
    return cfg


def solve_penalized(model, x0, a0, beta, n, *, grid=None, n_paths=None, config=None, seed=0, smoothing_k=None):
    """Infinite-horizon penalized BSDE truncated at T with terminal value 0."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    cfg = _cfg(config, n_paths)
    grid, tail = _infinite_grid(model, beta, cfg, grid)
    sol = _backward(model, cfg, beta, grid, x0, a0, seed, float(n), None, True, smoothing_k)
    sol.diagnostics["tail_bound"] = tail
    return sol


def solve_constrained(model, x0, a0, beta, *, grid=None, n_paths=None, config=None, seed=0):
    """n = inf rung: x-only representation with pointwise minimization."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    cfg = _cfg(config, n_paths)
    grid, tail = _infinite_grid(model, beta, cfg, grid)
    sol = _backward(model, cfg, beta, grid, x0, a0, seed, INF, None, True)
    sol.diagnostics["tail_bound"] = tail
    return sol


def solve_finite_horizon(model, x0, a0, beta, T, phi=None, n=INF, *, grid=None, n_paths=None, config=None,
                         seed=0, smoothing_k=None):
    """Finite horizon T with terminal Y_T = phi(X_T); beta >= 0."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    cfg = _cfg(config, n_paths)
    if grid is None:
        grid = TimeGrid.from_step(T, cfg.h)
    if abs(grid.t_end - grid.t0 - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"grid horizon {grid.t_end - grid.t0} differs from T = {T}")
    phi = model.phi if phi is None else phi
    return _backward(model, cfg, beta, grid, x0, a0, seed, float(n), phi, False, smoothing_k)


# ---------------------------------------------------------------- ladders

@dataclass
class MonotonicityReport:
    n_values: list
    y0: list
    tol: float
    monotone: bool
    worst_increase: float
    saturated_at: Optional[float]
    gamma_trend: list          # E int |Gamma| per ladder entry
    gamma_decreasing: bool
    k_nondecreasing: bool
    K_T_largest_n: Optional[float]
    n_int_gamma_largest_n: Optional[float]
    limit_value: float
    values_at: Optional[dict] = None

    def to_json(self):
        return _jsonable(asdict(self))


def constrained_limit(model, x0, a0, beta, n_ladder, *, config=None, n_paths=None, seed=0, T=None, phi=None,
                      tol=None, sat_tol=None, x_eval=None, ladder_config=None):
    """Penalized ladder with common random numbers plus the n = inf rung.

    Returns (solution at n = inf, MonotonicityReport)."""
    cfg = _cfg(config, n_paths)
    lcfg = _cfg(ladder_config, n_paths) if ladder_config is not None else cfg
    ladder = [int(v) for v in (n_ladder or [])]
    if any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("n_ladder must be strictly increasing")
    if T is None:
        scale = model.M_ell / beta
        ref_grid, _ = _infinite_grid(model, beta, cfg, None)
    else:
        scale = model.M_ell * max(T, 1.0)
    tol = 1e-3 * scale if tol is None else tol
    sat_tol = tol if sat_tol is None else sat_tol
    sols = []
    for n in ladder:
        if T is None:
            s = solve_penalized(model, x0, a0, beta, n, config=lcfg, seed=seed, grid=None)
        else:
            s = solve_finite_horizon(model, x0, a0, beta, T, phi, n, config=lcfg, seed=seed)
        sols.append(s)
    if T is None:
        lim = solve_constrained(model, x0, a0, beta, config=cfg, seed=seed)
    else:
        lim = solve_finite_horizon(model, x0, a0, beta, T, phi, INF, config=cfg, seed=seed)
    y = [s.y0 for s in sols] + [lim.y0]
    inc = [y[i + 1] - y[i] for i in range(len(y) - 1)]
    worst = max(inc) if inc else 0.0
    sat = None
    for i in range(len(ladder) - 1):
        if abs(y[i] - y[i + 1]) < sat_tol:
            sat = ladder[i]
            break
    gam = [s.diagnostics["E_int_abs_gamma"] for s in sols]
    gdec = all(b <= a * (1 + 1e-6) + 1e-12 for a, b in zip(gam, gam[1:]))
    rep = MonotonicityReport(
        n_values=ladder + [INF], y0=y, tol=tol, monotone=bool(worst <= tol), worst_increase=float(worst),
        saturated_at=sat, gamma_trend=gam, gamma_decreasing=bool(gdec),
        k_nondecreasing=bool(all(s.diagnostics["k_nondecreasing"] for s in sols + [lim])),
        K_T_largest_n=sols[-1].diagnostics["K_T_mean"] if sols else None,
        n_int_gamma_largest_n=sols[-1].diagnostics["n_int_abs_gamma"] if sols else None,
        limit_value=lim.y0)
    if x_eval is not None:
        xe = np.atleast_2d(np.asarray(x_eval, float))
        rep.values_at = {"x": xe.tolist(), "v": lim.value_at(xe).tolist()}
    lim.diagnostics["ladder"] = rep.to_json()
    lim.ladder_solutions = sols
    return lim, rep


@dataclass
class MaximalityReport:
    min_margin: float
    frac_below_tol: float
    y0_margin: float
    tol: float
    passed: bool

    def to_json(self):
        return asdict(self)


def maximality_probe(model, candidate, reference, tol=None, stride=10):
    """Check Y(reference) >= Y(candidate) - tol on the reference design states."""
    if candidate.grid != reference.grid:
        raise ValueError("solutions live on different grids")
    tol = 1e-3 * model.M_ell * max(1.0, reference.horizon) if tol is None else tol
    margins = []
    K = reference.grid.n_steps
    for k in list(range(0, K + 1, stride)) + [K]:
        x, a = reference.design_X[:, k], reference.design_I[:, k]
        yr = reference.y_at(k, x, a if not reference.constrained else None)
        yc = candidate.y_at(k, x, a if not candidate.constrained else None)
        margins.append(yr - yc)
    m = np.concatenate(margins)
    y0m = reference.y0 - candidate.y0
    return MaximalityReport(float(m.min()), float(np.mean(m < -tol)), float(y0m), float(tol),
                            bool(m.min() >= -tol and y0m >= -tol))
