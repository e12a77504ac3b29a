"""Dynamic-programming oracle for one-mode reductions.

Finite differences on a uniform grid with reflecting edges, solved by
policy iteration over a finite control set. The generator uses central
differences where they keep all off-diagonal rates nonnegative and
upwinding elsewhere, so the scheme stays monotone (sigma = 0 gives pure
upwinding). Also: brute-force enumeration of open-loop control sequences.
"""
import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve
from scipy.special import ndtr

from . import rng


class OracleError(RuntimeError):
    pass


@dataclass
class Oracle1DModel:
    drift: Callable            # b(x, a), vectorized
    sigma: float
    cost: Callable             # l(x, a), vectorized
    controls: np.ndarray
    x_min: float = -6.0
    x_max: float = 6.0
    n_x: int = 1201
    terminal: Optional[Callable] = None
    M_ell: Optional[float] = None
    scheme: str = "hybrid"     # or "upwind"

    def __post_init__(self):
        self.controls = np.sort(np.unique(np.atleast_1d(np.asarray(self.controls, float))))
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not self.x_max > self.x_min or self.n_x < 3:
            raise ValueError("bad space grid")

    @property
    def x(self):
        return np.linspace(self.x_min, self.x_max, self.n_x)

    @property
    def dx(self):
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @classmethod
    def from_model(cls, model, controls=None, half_width=6.0, n_x=1201, **kw):
        if model.n_modes != 1 or model.m != 1:
            raise ValueError("oracle needs a model with one state mode and one control mode")
        lam, g = float(model.lam[0]), float(model.g[0])

        def _pair(x, a):
            x, a = np.broadcast_arrays(np.asarray(x, float), np.asarray(a, float))
            return x[..., None], a[..., None]

        def b(x, a):
            xx, aa = _pair(x, a)
            return lam * xx[..., 0] + model.F(xx, aa)[..., 0]

        def ell(x, a):
            return model.ell(*_pair(x, a))

        def phi(x):
            return model.phi(np.asarray(x)[..., None])

        controls = np.linspace(-6, 6, 201) if controls is None else controls
        return cls(b, abs(g), ell, controls, -half_width, half_width, n_x, phi, model.M_ell, **kw)

    def with_controls(self, controls):
        return Oracle1DModel(self.drift, self.sigma, self.cost, controls, self.x_min, self.x_max, self.n_x,
                             self.terminal, self.M_ell, self.scheme)

    def with_grid(self, n_x):
        return Oracle1DModel(self.drift, self.sigma, self.cost, self.controls, self.x_min, self.x_max, n_x,
                             self.terminal, self.M_ell, self.scheme)

    def with_cost(self, cost, M_ell=None):
        return Oracle1DModel(self.drift, self.sigma, cost, self.controls, self.x_min, self.x_max, self.n_x,
                             self.terminal, M_ell, self.scheme)

    def check(self, n_samples=2000, seed=0):
        """Sampled dissipativity, cost bound and stationary mass outside the grid."""
        u = rng.uniforms(seed, rng.AUX, 0, n_samples, 3)
        x = self.x_min + (self.x_max - self.x_min) * u[:, 0]
        y = self.x_min + (self.x_max - self.x_min) * u[:, 1]
        a = self.controls[(u[:, 2] * len(self.controls)).astype(int).clip(0, len(self.controls) - 1)]
        dxy = x - y
        ok = np.abs(dxy) > 1e-9
        mu = float(np.min(-(self.drift(x, a) - self.drift(y, a))[ok] / dxy[ok]))
        ell = self.cost(self.x[:, None], self.controls[None, :])
        M = float(np.max(np.abs(ell)))
        sd = self.sigma / math.sqrt(2 * mu) if mu > 0 else np.inf
        centre = 0.5 * (self.x_min + self.x_max)
        half = 0.5 * (self.x_max - self.x_min)
        mass = float(2 * ndtr(-half / sd)) if sd > 0 else 0.0
        return {"mu": mu, "M_ell": M, "stationary_sd": sd, "mass_outside": mass,
                "dissipative": mu > 0, "grid_ok": mass <= 1e-6, "centre": centre}

    # ---------------------------------------------------------------- generator

    def _tables(self):
        x = self.x
        B = self.drift(x[:, None], self.controls[None, :])
        L = self.cost(x[:, None], self.controls[None, :])
        B = np.broadcast_to(B, (len(x), len(self.controls))).astype(float)
        L = np.broadcast_to(L, B.shape).astype(float)
        return B, L

    def _rates(self, b):
        dx, s2 = self.dx, self.sigma ** 2
        diff = 0.5 * s2 / dx ** 2
        up = np.maximum(b, 0) / dx + diff
        dn = np.maximum(-b, 0) / dx + diff
        if self.scheme == "hybrid" and s2 > 0:
            cu, cd = diff + 0.5 * b / dx, diff - 0.5 * b / dx
            central = (cu >= 0) & (cd >= 0)
            up, dn = np.where(central, cu, up), np.where(central, cd, dn)
        up = up.copy()
        dn = dn.copy()
        up[-1, ...] = 0.0
        dn[0, ...] = 0.0
        return up, dn

    def generator(self, b):
        up, dn = self._rates(b)
        n = len(b)
        return sparse.diags([dn[1:], -(up + dn), up[:-1]], [-1, 0, 1], shape=(n, n), format="csc")

    def hamiltonian(self, v, B, L):
        """H[i, c] = (A^c v)_i + l(x_i, c)."""
        up, dn = self._rates(B)
        dvp = np.append(np.diff(v), 0.0)[:, None]
        dvm = np.insert(-np.diff(v), 0, 0.0)[:, None]
        return up * dvp + dn * dvm + L


def _improve(H, pol, tol):
    best = H.argmin(axis=1)
    rows = np.arange(len(pol))
    keep = H[rows, pol] <= H[rows, best] + tol
    return np.where(keep, pol, best)


@dataclass
class OracleResult:
    x: np.ndarray
    v: np.ndarray
    policy: np.ndarray           # control values per node
    iterations: int
    residual: float
    lam: Optional[float] = None
    extras: dict = field(default_factory=dict)

    def feedback(self):
        """Feedback x -> nearest-node optimal control."""
        x, pol = self.x, self.policy

        def u(t, X):
            X = np.asarray(X, float)
            i = np.clip(np.rint((X[..., 0] - x[0]) / (x[1] - x[0])).astype(int), 0, len(x) - 1)
            return pol[i][..., None]
        return u

    def __call__(self, xq):
        return np.interp(np.asarray(xq, float), self.x, self.v)


def hjb_discounted(m1d, beta, *, tol=1e-8, max_iter=500):
    """beta v = min_a [b v' + sigma^2/2 v'' + l] on the grid."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    B, L = m1d._tables()
    n = m1d.n_x
    rows = np.arange(n)
    pol = L.argmin(axis=1)
    I = sparse.identity(n, format="csc")
    scale = tol * max(1.0, float(np.abs(L).max()) / beta)
    for it in range(1, max_iter + 1):
        A = m1d.generator(B[rows, pol])
        v = spsolve(beta * I - A, L[rows, pol])
        H = m1d.hamiltonian(v, B, L)
        new = _improve(H, pol, 1e-13 * scale)
        res = float(np.max(np.abs(beta * v - H.min(axis=1))))
        # the residual certifies the fixed point; exact ties may keep the policy flipping
        if res < tol * max(1.0, float(np.abs(v).max()) * beta):
            return OracleResult(m1d.x, v, m1d.controls[new], it, res)
        pol = new
    raise OracleError(f"policy iteration did not converge in {max_iter} sweeps (residual {res:.3g})")


def hjb_ergodic(m1d, *, tol=1e-8, max_iter=500, x_ref=0.0):
    """lambda = min_a [b v' + sigma^2/2 v'' + l] with v(x_ref) = 0."""
    B, L = m1d._tables()
    n = m1d.n_x
    rows = np.arange(n)
    x = m1d.x
    i0 = int(np.argmin(np.abs(x - x_ref)))
    pol = L.argmin(axis=1)
    hist = []
    for it in range(1, max_iter + 1):
        A = m1d.generator(B[rows, pol]).tolil()
        A[:, i0] = -1.0
        u = spsolve(A.tocsc(), -L[rows, pol])
        lam = float(u[i0])
        v = u.copy()
        v[i0] = 0.0
        H = m1d.hamiltonian(v, B, L)
        new = _improve(H, pol, 1e-13 * max(1.0, abs(lam)))
        res = float(np.max(np.abs(H.min(axis=1) - lam)))
        hist.append(lam)
        if res < tol * max(1.0, abs(lam)):
            if abs(x[i0] - x_ref) > 1e-12:
                v = v - np.interp(x_ref, x, v)
            return OracleResult(x, v, m1d.controls[new], it, res, lam=lam)
        pol = new
    raise OracleError(f"ergodic policy iteration did not settle in {max_iter} sweeps; "
                      f"last lambdas {hist[-5:]}, residual {res:.3g}")


def hjb_parabolic(m1d, T, phi=None, *, beta=0.0, dt=0.02, save_every=None, tol=1e-10, max_inner=50):
    """Backward implicit steps of -v_t + beta v = min_a [A^a v + l], v(T) = phi.

    Returns the OracleResult at time 0 (value v^{0,T}); with save_every the
    extras carry intermediate horizons: extras["horizons"], extras["values"]."""
    phi = m1d.terminal if phi is None else phi
    x = m1d.x
    v = np.zeros_like(x) if phi is None else np.asarray(phi(x), float) * np.ones_like(x)
    if T <= 0:
        return OracleResult(x, v, np.full(len(x), np.nan), 0, 0.0)
    K = max(1, int(math.ceil(T / dt - 1e-9)))
    dt = T / K
    B, L = m1d._tables()
    n = len(x)
    rows = np.arange(n)
    I = sparse.identity(n, format="csc")
    pol = L.argmin(axis=1)
    horizons, values = [], []
    total = 0
    for k in range(K):
        rhs0 = v / dt
        for inner in range(max_inner):
            A = m1d.generator(B[rows, pol])
            w = spsolve((1.0 / dt + beta) * I - A, rhs0 + L[rows, pol])
            H = m1d.hamiltonian(w, B, L)
            new = _improve(H, pol, 1e-13 * max(1.0, float(np.abs(w).max())))
            total += 1
            if np.array_equal(new, pol):
                break
            pol = new
        else:
            raise OracleError(f"inner policy iteration did not settle at step {k}")
        v = w
        if save_every and (k + 1) % save_every == 0:
            horizons.append((k + 1) * dt)
            values.append(v.copy())
    res = float(np.max(np.abs((1.0 / dt + beta) * v - rhs0 - H.min(axis=1))))
    out = OracleResult(x, v, m1d.controls[pol], total, res)
    if save_every:
        out.extras = {"horizons": np.array(horizons), "values": np.array(values)}
    return out


@dataclass
class BruteForceResult:
    value: float
    se: float
    best_sequence: np.ndarray
    n_sequences: int
    control_class: str = "open-loop, piecewise constant on the time steps, values in the control grid"

    @property
    def upper_bound(self):
        return self.value


def brute_force_value(model, x0, T, controls, n_steps, *, n_paths=2000, seed=0, beta=0.0, phi=None,
                      budget=10 ** 6, cost_rule="trapezoid"):
    """Minimum over all open-loop control sequences of the Monte Carlo cost,
    with common random numbers across sequences.

    model: a ModelInstance (exact one-step kernel) or an Oracle1DModel (Euler)."""
    from .state_sim import _step_factory
    controls = np.atleast_1d(np.asarray(controls, float))
    if controls.ndim == 1:
        controls = controls[:, None]
    n_steps = int(n_steps)
    if not 1 <= n_steps <= 6:
        raise ValueError("brute force supports 1..6 time steps")
    n_seq = len(controls) ** n_steps
    if n_seq > budget:
        raise ValueError(f"{n_seq} sequences exceed the enumeration budget {budget}")
    h = T / n_steps
    N = int(n_paths)
    if isinstance(model, Oracle1DModel):
        z = rng.normals(seed, rng.W1, 0, N, 0, n_steps, 1)[..., 0]
        x = np.full(N, float(np.ravel(x0)[0]))[:, None]

        def step(xc, u, k):
            return xc + model.drift(xc, u) * h + model.sigma * math.sqrt(h) * z[k][:, None]

        def ell(xc, u):
            return model.cost(xc, u)
        phi = model.terminal if phi is None else phi
        term = (lambda xc: np.zeros_like(xc)) if phi is None else phi
    else:
        z = rng.normals(seed, rng.W1, 0, N, 0, n_steps, model.n_modes)
        stepper = _step_factory(model, h, "exp_euler")
        x = np.broadcast_to(np.asarray(x0, float), (N, model.n_modes))[:, None, :]

        def step(xc, u, k):
            return stepper(xc, np.broadcast_to(u, xc.shape[:-1] + (u.shape[-1],)), z[k][:, None, :])

        def ell(xc, u):
            return model.ell(xc, np.broadcast_to(u, xc.shape[:-1] + (u.shape[-1],)))
        term = model.phi if phi is None else phi
    # scenario tree: axis 1 enumerates control prefixes
    cost = np.zeros((N, 1))
    C = len(controls)
    disc = math.exp(-beta * h)
    for k in range(n_steps):
        P = x.shape[1]
        if isinstance(model, Oracle1DModel):
            xr = np.repeat(x, C, axis=1)
            u = np.tile(controls[:, 0], P)[None, :]
        else:
            xr = np.repeat(x, C, axis=1)
            u = np.tile(controls, (P, 1))[None, :, :]
        cr = np.repeat(cost, C, axis=1)
        xn = step(xr, u, k)
        w = math.exp(-beta * k * h)
        if cost_rule == "trapezoid":
            cr = cr + w * 0.5 * h * (ell(xr, u) + disc * ell(xn, u))
        else:
            cr = cr + w * h * ell(xr, u)
        x, cost = xn, cr
    total = cost + math.exp(-beta * T) * term(x)
    means = total.mean(axis=0)
    j = int(np.argmin(means))
    seq_idx = np.unravel_index(j, (C,) * n_steps)
    return BruteForceResult(float(means[j]), float(total[:, j].std(ddof=1) / math.sqrt(N)),
                            controls[list(seq_idx)], n_seq)


def write_csv(path, result, header=None):
    """(x, v[, policy]) table; header is written as a leading comment line."""
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["x", "v", "policy"])
        for xi, vi, pi in zip(result.x, result.v, result.policy):
            w.writerow([repr(float(xi)), repr(float(vi)), repr(float(pi))])
