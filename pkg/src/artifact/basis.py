"""Regression features and their exact Gaussian expectations.

State features are tensor Chebyshev polynomials (total degree <= D) in the
leading p modes, each mode rescaled to [-1, 1] over the design range and
clamped outside it. Control features are piecewise-linear hats on quantile
knots (one control mode).
"""
import itertools

import numpy as np
from numpy.polynomial.hermite_e import hermegauss


def gauss_hermite(q):
    """Nodes/weights for E f(xi), xi ~ N(0,1)."""
    t, w = hermegauss(q)
    return t, w / w.sum()


def cheb_table(z, D):
    """T_0..T_D at z: shape z.shape + (D+1,)."""
    out = np.empty(z.shape + (D + 1,))
    out[..., 0] = 1.0
    if D >= 1:
        out[..., 1] = z
    for i in range(2, D + 1):
        out[..., i] = 2 * z * out[..., i - 1] - out[..., i - 2]
    return out


def cheb_dtable(z, D):
    """T_i'(z) = i U_{i-1}(z): shape z.shape + (D+1,)."""
    out = np.zeros(z.shape + (D + 1,))
    if D >= 1:
        U = np.empty(z.shape + (D,))
        U[..., 0] = 1.0
        if D >= 2:
            U[..., 1] = 2 * z
        for i in range(2, D):
            U[..., i] = 2 * z * U[..., i - 1] - U[..., i - 2]
        out[..., 1:] = U * np.arange(1, D + 1)
    return out


class ChebBasis:
    def __init__(self, n_modes, p=4, degree=2):
        self.p = max(1, min(int(p), n_modes))
        self.D = int(degree)
        idx = [i for i in itertools.product(range(self.D + 1), repeat=self.p) if sum(i) <= self.D]
        idx.sort(key=lambda i: (sum(i), tuple(-v for v in i)))
        self.idx = np.array(idx, dtype=int)       # (F, p)

    @property
    def n_features(self):
        return len(self.idx)

    def _z(self, x, lo, hi):
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        z = (2 * x[..., :self.p] - lo - hi) / span
        inside = np.abs(z) <= 1
        return np.clip(z, -1, 1), inside, 2.0 / span

    def _combine(self, tab):
        # tab (..., p, D+1) -> product features (..., F)
        out = np.ones(tab.shape[:-2] + (self.n_features,))
        for k in range(self.p):
            out = out * tab[..., k, :][..., self.idx[:, k]]
        return out

    def features(self, x, lo, hi, active=None):
        z, _, _ = self._z(np.asarray(x, float), lo, hi)
        f = self._combine(cheb_table(z, self.D))
        return f if active is None else f * active

    def mode_tables(self, mean, std, lo, hi, nodes, weights, grad=False):
        """Per-mode E[T_i(z(X_k))] for X_k ~ N(mean_k, std_k^2): (..., p, D+1)."""
        xq = mean[..., :self.p, None] + std[..., :self.p, None] * nodes
        z, inside, scale = self._z(np.moveaxis(xq, -1, -2), lo, hi)   # (..., q, p)
        z = np.moveaxis(z, -2, -1)                                      # (..., p, q)
        E = np.einsum("...qi,q->...i", cheb_table(z, self.D), weights)
        if not grad:
            return E
        inside = np.moveaxis(inside, -2, -1)
        dT = cheb_dtable(z, self.D) * inside[..., None] * scale[:, None, None]
        dE = np.einsum("...qi,q->...i", dT, weights)
        return E, dE

    def expected(self, mean, std, lo, hi, nodes, weights, active=None):
        f = self._combine(self.mode_tables(mean, std, lo, hi, nodes, weights))
        return f if active is None else f * active

    def expected_grad(self, mean, std, lo, hi, nodes, weights, active=None):
        """E[d feature / d x_j] for j < p: (..., p, F)."""
        E, dE = self.mode_tables(mean, std, lo, hi, nodes, weights, grad=True)
        out = []
        for j in range(self.p):
            tab = E.copy()
            tab[..., j, :] = dE[..., j, :]
            out.append(self._combine(tab))
        g = np.stack(out, axis=-2)
        return g if active is None else g * active


def active_mask(basis, lo, hi, tiny=1e-10):
    """Zero out features that vary along modes where the design collapsed."""
    dead = (hi - lo) <= tiny * np.maximum(1.0, np.abs(hi) + np.abs(lo))
    if not dead.any():
        return None
    return (basis.idx[:, dead] == 0).all(axis=1).astype(float)


def quantile_knots(a, K):
    knots = np.unique(np.quantile(a, np.linspace(0, 1, K)))
    if len(knots) >= 2 and knots[-1] - knots[0] <= 1e-12 * max(1.0, abs(knots[0])):
        knots = knots[:1]
    return knots


def hat_index(a, knots):
    """Left knot index and linear weight for piecewise-linear hats (clamped)."""
    if len(knots) == 1:
        return np.zeros(np.shape(a), int), np.zeros(np.shape(a))
    a = np.clip(a, knots[0], knots[-1])
    j = np.clip(np.searchsorted(knots, a) - 1, 0, len(knots) - 2)
    w = (a - knots[j]) / (knots[j + 1] - knots[j])
    return j, w


def hat_features(a, knots):
    a = np.asarray(a, float)
    K = len(knots)
    out = np.zeros(a.shape + (K,))
    j, w = hat_index(a, knots)
    np.put_along_axis(out, j[..., None], (1 - w)[..., None], axis=-1)
    if K > 1:
        prev = np.take_along_axis(out, (j + 1)[..., None], axis=-1)
        np.put_along_axis(out, (j + 1)[..., None], prev + w[..., None], axis=-1)
    return out


def hat_interp(P, a, knots):
    """Evaluate sum_j P[..., j] hat_j(a) where P is (N, K) and a is (N, ...)."""
    j, w = hat_index(a, knots)
    N = P.shape[0]
    flat_j = j.reshape(N, -1)
    p0 = np.take_along_axis(P, flat_j, axis=1).reshape(j.shape)
    if len(knots) == 1:
        return p0
    p1 = np.take_along_axis(P, flat_j + 1, axis=1).reshape(j.shape)
    return (1 - w) * p0 + w * p1


def _npdf(z):
    return np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)


def pl_gauss_weights(m, s, knots, segments=False):
    """Weights w with E[f(X)] = w @ f(knots) for X ~ N(m, s^2) and f the
    piecewise-linear interpolant of its knot values (flat outside). All
    weights are >= 0 and sum to 1. With segments=True also return the
    probability mass of every knot interval (for E f'(X))."""
    from scipy.special import ndtr
    m = np.asarray(m, float)[..., None]
    s = np.maximum(np.asarray(s, float), 1e-14)[..., None]
    t0, t1 = knots[:-1], knots[1:]
    dt = t1 - t0
    lo, hi = (t0 - m) / s, (t1 - m) / s
    Flo, Fhi = ndtr(lo), ndtr(hi)
    P = np.maximum(Fhi - Flo, 0.0)
    M = np.clip((m - t0) * P + s * (_npdf(lo) - _npdf(hi)), 0.0, P * dt)
    w = np.zeros(np.broadcast_shapes(m.shape[:-1], s.shape[:-1]) + (len(knots),))
    w[..., :-1] += P - M / dt
    w[..., 1:] += M / dt
    w[..., 0] += Flo[..., 0]
    w[..., -1] += 1.0 - Fhi[..., -1]
    return (w, P) if segments else w


def pl_interp(values, knots, x):
    """Clamped piecewise-linear interpolation along the first axis of values."""
    j, w = hat_index(np.asarray(x, float), knots)
    if len(knots) == 1:
        return values[j]
    return (1 - w)[(...,) + (None,) * (values.ndim - 1)] * values[j] + \
        w[(...,) + (None,) * (values.ndim - 1)] * values[j + 1]
