"""Randomized control channel I_t = a + int_0^t R alpha ds + R W2_t, the
coupled state driven by I, and the ramp approximation of step controls by
bounded intensities."""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng
from .state_sim import ControlPolicy, PathEnsemble, TimeGrid, _simulate, write_binary


@dataclass
class RandomizedPair:
    ensemble: PathEnsemble
    alpha: Optional[ControlPolicy]
    a0: np.ndarray

    @property
    def control_channel(self):
        return self.ensemble.channel

    @property
    def states(self):
        return self.ensemble.states

    def channel_formula(self, model):
        """I rebuilt from a + cumulative R alpha h + R W2 (needs stored noise)."""
        e = self.ensemble
        if e.noise2 is None or e.record_every != 1:
            raise ValueError("channel reconstruction needs keep_noise=True and record_every=1")
        h, K = e.grid.h, e.grid.n_steps
        N, m = e.noise2.shape[0], e.noise2.shape[2]
        if self.alpha is None:
            drift = np.zeros((N, K, m))
        else:
            drift = np.stack([self.alpha.evaluate(k, e.grid.t0 + k * h, e.states[:, k], np.arange(N), m,
                                                  e.channel[:, k])
                              for k in range(K)], axis=1)
        incr = model.r * (drift * h + np.sqrt(h) * e.noise2)
        a0 = np.broadcast_to(self.a0, (N, m))
        return np.concatenate([a0[:, None], a0[:, None] + np.cumsum(incr, axis=1)], axis=1)

    def write_binary(self, path):
        write_binary(self.ensemble, path)


def _alpha_bound(alpha):
    if alpha is None:
        return 0.0
    if alpha.bound is not None:
        return float(alpha.bound)
    if alpha.kind == "constant":
        return float(np.linalg.norm(alpha.value))
    if alpha.kind == "open_loop" and not callable(alpha.value):
        return float(np.linalg.norm(alpha.value, axis=-1).max())
    raise ValueError("alpha must be bounded: set ControlPolicy.bound")


def simulate_randomized_pair(model, x0, a0, alpha, grid, n_paths, seed, *, scheme="exp_euler",
                             record_every=1, keep_noise=True, workers=1, step_offset=0):
    _alpha_bound(alpha)
    a0 = np.asarray(a0, float)
    ens = _simulate(model, x0, grid, n_paths, seed, a0=a0, alpha=alpha, scheme=scheme,
                    record_every=record_every, keep_noise=keep_noise, step_offset=step_offset,
                    workers=workers)
    return RandomizedPair(ens, alpha, a0)


# ---------------------------------------------------------------- ramp approximation

@dataclass
class AlphaApproximation:
    eta: np.ndarray        # (N, m) target jump sizes, already projected
    n: int
    t0: float
    T: float
    r: np.ndarray
    projection_residual: np.ndarray   # |eta - P eta| per draw
    formula_value: float              # E|eta|^2 / n

    def intensity(self, t):
        on = self.t0 <= t < self.t0 + 1.0 / self.n
        return (self.n / self.r) * self.eta * on

    def integrated(self, t):
        """R int_0^t alpha ds: the ramp n (t - t0) eta, capped at eta."""
        s = np.clip(self.n * (np.asarray(t, float) - self.t0), 0.0, 1.0)
        return s[..., None, None] * self.eta if np.ndim(s) else s * self.eta

    def policy(self, grid):
        """Piecewise-constant intensity on grid cells (cell averages), so the
        integrated channel is exact at the nodes."""
        t = grid.nodes
        lo = np.clip(self.n * (t[:-1] - self.t0), 0, 1)
        hi = np.clip(self.n * (t[1:] - self.t0), 0, 1)
        frac = (hi - lo) / grid.h                       # (K,)
        arr = frac[None, :, None] * (self.eta / self.r)[:, None, :]
        return ControlPolicy.open_loop(arr, bound=float(self.n * np.max(np.linalg.norm(self.eta / self.r, axis=1))))

    def measured_error(self, grid=None):
        """Per-draw int_0^T |eta 1_[t0,T) - I_hat_t|^2 dt with I_hat the
        channel produced by policy(grid); Simpson per cell (exact, since the
        error is piecewise linear in t on the grid)."""
        if grid is None:
            # the error vanishes off [t0, t0 + 1/n]; both ends are nodes here
            grid = TimeGrid(self.t0, self.t0 + 1.0 / self.n, 64)
        t = grid.nodes
        lo = np.clip(self.n * (t[:-1] - self.t0), 0, 1)
        hi = np.clip(self.n * (t[1:] - self.t0), 0, 1)
        s_nodes = np.concatenate([[0.0], np.cumsum(hi - lo)])      # ramp fraction at nodes
        step = (t >= self.t0).astype(float)
        # pointwise error e(t) = (1_[t0,T)(t) - s(t)) eta; the indicator jumps at t0
        e_left = step[:-1] - s_nodes[:-1]
        e_right = np.where(t[1:] > self.t0, 1.0, 0.0) - s_nodes[1:]
        e_mid = np.where(0.5 * (t[:-1] + t[1:]) >= self.t0, 1.0, 0.0) - 0.5 * (s_nodes[:-1] + s_nodes[1:])
        w = (grid.h / 6.0) * (e_left ** 2 + 4 * e_mid ** 2 + e_right ** 2)
        return w.sum() * np.sum(self.eta ** 2, axis=1)


def approximating_alpha(eta, n, r, t0=0.0, T=1.0, m=None):
    """alpha^n_s = n 1_[t0, t0+1/n](s) R^{-1} eta for a step target eta 1_[t0,T)."""
    n = int(n)
    if n < 1:
        raise ValueError("n must be a positive integer")
    if t0 + 1.0 / n > T + 1e-15:
        raise ValueError(f"t0 + 1/n = {t0 + 1.0 / n} exceeds T = {T}")
    r = np.asarray(r, float)
    m = len(r) if m is None else int(m)
    eta = np.atleast_2d(np.asarray(eta, float))
    proj = np.zeros((eta.shape[0], m))
    k = min(m, eta.shape[1])
    proj[:, :k] = eta[:, :k]
    resid = np.linalg.norm(eta[:, k:], axis=1) if eta.shape[1] > k else np.zeros(eta.shape[0])
    formula = float(np.mean(np.sum(proj ** 2, axis=1)) / n)
    return AlphaApproximation(proj, n, float(t0), float(T), r[:m], resid, formula)


def tracking_alpha(target, gain, r, bound):
    """alpha = gain R^{-1} (target(t, x) - I): pulls the channel onto a feedback
    control at rate gain, clipped at |alpha| <= bound. Stable for gain h < 1."""
    r = np.asarray(r, float)

    def fn(t, x, a):
        return gain * (np.asarray(target(t, x), float) - a) / r[:a.shape[1]]
    return ControlPolicy("channel_feedback", fn, float(bound))


# ---------------------------------------------------------------- values

def required_horizon(M_ell, beta, tol):
    """Smallest integer t_end with M_ell e^{-beta t_end} / beta <= tol."""
    return float(math.ceil(math.log(M_ell / (beta * tol)) / beta)) if M_ell / (beta * tol) > 1 else 0.0


@dataclass
class ValueEstimate:
    value: float
    se: float
    tail_bound: float

    @property
    def budget(self):
        return 3 * self.se + self.tail_bound


def discounted_cost(model, X, U, times, beta):
    """Per-path trapezoid of e^{-beta t} l(X_t, U_t) over recorded nodes."""
    c = model.ell(X, U) * np.exp(-beta * (times - times[0]))[None, :]
    return np.trapezoid(c, times, axis=1) if hasattr(np, "trapezoid") else np.trapz(c, times, axis=1)


def randomized_value_mc(model, x0, a0, alpha, beta, grid, n_paths, seed, *, tail_tol=1e-3,
                        scheme="exp_euler", workers=1):
    """MC estimate of E int_0^inf e^{-beta s} l(X_s, I_s) ds truncated at t_end."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    tail = model.M_ell * math.exp(-beta * (grid.t_end - grid.t0)) / beta
    if tail > tail_tol:
        raise ValueError(f"tail bound {tail:.3g} exceeds tolerance {tail_tol:.3g}: "
                         f"need t_end >= {required_horizon(model.M_ell, beta, tail_tol):g}")
    pair = simulate_randomized_pair(model, x0, a0, alpha, grid, n_paths, seed, scheme=scheme,
                                    keep_noise=False, workers=workers)
    X, I = pair.ensemble.states, pair.ensemble.channel
    v = discounted_cost(model, X, I, grid.nodes, beta)
    v = v[np.isfinite(v)]
    return ValueEstimate(float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v))), float(tail))


def compactness_diagnostic(model, x0, a0, alpha, grid, n_paths, seed, *, workers=1):
    """sup_t t^rho E|(delta I - A)^rho X_t| along a randomized pair."""
    pair = simulate_randomized_pair(model, x0, a0, alpha, grid, n_paths, seed, keep_noise=False, workers=workers)
    w = (model.delta - model.lam) ** model.rho_eff
    nrm = np.linalg.norm(pair.ensemble.states * w, axis=2).mean(axis=0)
    t = pair.ensemble.times - grid.t0
    return float(np.max(t[1:] ** model.rho_eff * nrm[1:]))


def compactness_sweep(model, grid, n_paths, seed, n_draws=10, a_scale=3.0, alpha_scale=5.0, x0=None):
    """Diagnostic values over random (a0, alpha) draws; should stay bounded."""
    u = rng.uniforms(seed, rng.AUX, 0, n_draws, 2 * model.m)
    x0 = np.zeros(model.n_modes) if x0 is None else x0
    out = []
    for i in range(n_draws):
        a0 = a_scale * (2 * u[i, :model.m] - 1)
        c = alpha_scale * (2 * u[i, model.m:] - 1)
        out.append(compactness_diagnostic(model, x0, a0, ControlPolicy.constant(c), grid, n_paths, seed + i))
    return np.array(out)
