"""Named catalog of drift, running-cost and terminal-cost forms.

Each factory takes (params, n_modes, n_controls) and returns vectorized
callables over leading batch axes: x[..., d], a[..., m].
"""
import numpy as np
from numpy.polynomial.legendre import leggauss


class CatalogEntry:
    def __init__(self, name, params, fn, jac_diag=None):
        self.name, self.params = name, list(params)
        self.fn, self.jac_diag = fn, jac_diag

    def __call__(self, *args):
        return self.fn(*args)

    def to_json(self):
        return {"name": self.name, "params": [float(p) for p in self.params]}

    def __reduce__(self):
        # rebuild from the registry so entries pickle cleanly
        return (_rebuild, (self._kind, self.name, self.params, self._dims))


def _modal_tanh(p, d, m):
    mu, b = p
    k = min(d, m)

    def F(x, a):
        out = -mu * x
        out[..., :k] = out[..., :k] + b * np.tanh(a[..., :k])
        return out
    return F, lambda x, a: np.full(x.shape, -mu, dtype=float)


def _modal_linear(p, d, m):
    mu, = p
    return (lambda x, a: -mu * x), (lambda x, a: np.full(x.shape, -mu, dtype=float))


def _zero_drift(p, d, m):
    return (lambda x, a: np.zeros_like(x, dtype=float)), (lambda x, a: np.zeros(x.shape))


def _expansive(p, d, m):
    c, = p
    return (lambda x, a: c * x), (lambda x, a: np.full(x.shape, c, dtype=float))


def _modal_tanh_state(p, d, m):
    # -c_lin x + c_tanh tanh(x) + c_u a on the leading modes
    c_lin, c_tanh, c_u = p
    k = min(d, m)

    def F(x, a):
        out = -c_lin * x + c_tanh * np.tanh(x)
        out[..., :k] = out[..., :k] + c_u * a[..., :k]
        return out

    def J(x, a):
        return -c_lin + c_tanh / np.cosh(x) ** 2
    return F, J


def _dirichlet_pointwise(p, d, m):
    """Galerkin projection of a pointwise nonlinearity on (0,1) with the
    Dirichlet sine basis e_k = sqrt(2) sin(k pi xi)."""
    c_lin, c_tanh, c_sin, c_u, c_tanh_u = p
    nq = 4 * max(d, m) + 8
    z, w = leggauss(nq)
    xi, w = 0.5 * (z + 1), 0.5 * w
    Ex = np.sqrt(2) * np.sin(np.pi * np.outer(np.arange(1, d + 1), xi))   # (d, nq)
    Eu = np.sqrt(2) * np.sin(np.pi * np.outer(np.arange(1, m + 1), xi))   # (m, nq)
    Ew = Ex * w

    def F(x, a):
        X = x @ Ex
        U = a @ Eu
        f = -c_lin * X + c_tanh * np.tanh(X) + c_sin * np.sin(U) + c_u * U + c_tanh_u * np.tanh(U)
        return f @ Ew.T

    def J(x, a):
        X = x @ Ex
        fx = -c_lin + c_tanh / np.cosh(X) ** 2
        return fx @ (Ex * Ew).T
    return F, J


def _const_cost(p, d, m):
    c, = p
    return lambda x, a: np.full(np.broadcast_shapes(x.shape[:-1], a.shape[:-1]), float(c))


def _tanh2(p, d, m):
    wx, wa = p
    return lambda x, a: wx * np.tanh(x[..., 0]) ** 2 + wa * np.tanh(a[..., 0]) ** 2


def _tanh2_minsq(p, d, m):
    wx, wa = p
    return lambda x, a: wx * np.tanh(x[..., 0]) ** 2 + wa * np.minimum(a[..., 0] ** 2, 1.0)


def _tanh2_norm(p, d, m):
    wx, wa = p
    return lambda x, a: (wx * np.tanh(np.linalg.norm(x, axis=-1)) ** 2
                         + wa * np.tanh(np.linalg.norm(a, axis=-1)) ** 2)


def _control_tanh2(p, d, m):
    w, = p
    return lambda x, a: w * np.tanh(a[..., 0]) ** 2 + 0.0 * x[..., 0]


def _state_tanh2(p, d, m):
    w, = p
    return lambda x, a: w * np.tanh(x[..., 0]) ** 2 + 0.0 * a[..., 0]


def _phi_zero(p, d, m):
    return lambda x: np.zeros(x.shape[:-1])


def _phi_const(p, d, m):
    c, = p
    return lambda x: np.full(x.shape[:-1], float(c))


def _phi_abs1(p, d, m):
    c, = p
    return lambda x: c * np.abs(x[..., 0])


def _phi_norm(p, d, m):
    c, = p
    return lambda x: c * np.linalg.norm(x, axis=-1)


def _phi_softabs(p, d, m):
    c, = p
    return lambda x: c * (np.sqrt(1.0 + x[..., 0] ** 2) - 1.0)


def _phi_tanh2(p, d, m):
    c, = p
    return lambda x: c * np.tanh(x[..., 0]) ** 2


DRIFTS = {
    "modal_tanh": (_modal_tanh, 2),
    "modal_linear": (_modal_linear, 1),
    "modal_tanh_state": (_modal_tanh_state, 3),
    "zero": (_zero_drift, 0),
    "expansive": (_expansive, 1),
    "dirichlet_pointwise": (_dirichlet_pointwise, 5),
}
COSTS = {
    "constant": (_const_cost, 1),
    "tanh2": (_tanh2, 2),
    "tanh2_minsq": (_tanh2_minsq, 2),
    "tanh2_norm": (_tanh2_norm, 2),
    "control_tanh2": (_control_tanh2, 1),
    "state_tanh2": (_state_tanh2, 1),
}
TERMINALS = {
    "zero": (_phi_zero, 0),
    "constant": (_phi_const, 1),
    "abs1": (_phi_abs1, 1),
    "norm": (_phi_norm, 1),
    "softabs": (_phi_softabs, 1),
    "tanh2": (_phi_tanh2, 1),
}


def _factory(kind, table):
    def make(name, params, n_modes, n_controls):
        if name not in table:
            raise KeyError(f"unknown {kind} form {name!r}; known: {sorted(table)}")
        fac, n_par = table[name]
        params = [float(v) for v in params]
        if len(params) != n_par:
            raise ValueError(f"{kind} form {name!r} takes {n_par} parameters, got {len(params)}")
        built = fac(params, n_modes, n_controls)
        fn, jac = built if isinstance(built, tuple) else (built, None)
        e = CatalogEntry(name, params, fn, jac)
        e._kind, e._dims = kind, (n_modes, n_controls)
        return e
    return make


make_drift = _factory("drift", DRIFTS)
make_cost = _factory("cost", COSTS)
make_terminal = _factory("terminal", TERMINALS)


def _rebuild(kind, name, params, dims):
    return {"drift": make_drift, "cost": make_cost, "terminal": make_terminal}[kind](name, params, *dims)
