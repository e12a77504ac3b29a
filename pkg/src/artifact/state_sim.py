"""Forward simulation of the truncated mild state equation.

Per mode k and step h (exponential Euler, exact stochastic convolution):

    X_k <- e^{lam_k h} X_k + h phi1(lam_k h) F_k(X, u) + g_k zeta_k,
    zeta_k ~ N(0, (e^{2 lam_k h} - 1) / (2 lam_k)).

The optional ``local_linear`` scheme folds the diagonal of dF/dx into the
exponential so that linear drifts are integrated exactly.
"""
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng

GUARD = 1e12
MAGIC = b"ESCL1"


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1 or not self.t_end > self.t0:
            raise ValueError(f"bad time grid {self}")

    @property
    def h(self):
        return (self.t_end - self.t0) / self.n_steps

    @property
    def nodes(self):
        return self.t0 + self.h * np.arange(self.n_steps + 1)

    @classmethod
    def from_step(cls, t_end, h, t0=0.0):
        n = int(np.ceil((t_end - t0) / h - 1e-9))
        return cls(t0, t0 + n * h, n)


@dataclass
class ControlPolicy:
    """kind: 'constant' (vector), 'open_loop' (array (K,m) / (N,K,m) or a
    callable of t), 'feedback' (callable (t, x[N,d]) -> u[N,m]),
    'channel_feedback' (callable (t, x, a[N,m]) -> u[N,m]; intensities only)."""
    kind: str
    value: object
    bound: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("constant", "open_loop", "feedback", "channel_feedback"):
            raise ValueError(f"unknown policy kind {self.kind!r}")

    @classmethod
    def constant(cls, u, bound=None):
        return cls("constant", np.atleast_1d(np.asarray(u, float)), bound)

    @classmethod
    def feedback(cls, fn, bound=None):
        return cls("feedback", fn, bound)

    @classmethod
    def open_loop(cls, path, bound=None):
        return cls("open_loop", path if callable(path) else np.asarray(path, float), bound)

    def evaluate(self, k, t, x, paths, m, a=None):
        n = x.shape[0]
        if self.kind == "channel_feedback":
            if a is None:
                raise ValueError("channel_feedback needs the channel value")
            u = np.asarray(self.value(t, x, a), float).reshape(n, m)
        elif self.kind == "constant":
            u = np.broadcast_to(self.value, (n, m))
        elif self.kind == "feedback":
            u = np.asarray(self.value(t, x), float).reshape(n, m)
        elif callable(self.value):
            u = np.broadcast_to(np.asarray(self.value(t), float), (n, m))
        elif self.value.ndim == 2:
            u = np.broadcast_to(self.value[k], (n, m))
        else:
            u = self.value[paths, k]
        if self.bound is not None:
            nrm = np.linalg.norm(u, axis=1, keepdims=True)
            u = u * np.minimum(1.0, self.bound / np.maximum(nrm, 1e-300))
        return u


@dataclass
class PathEnsemble:
    grid: TimeGrid
    states: np.ndarray                 # (N, K/record_every + 1, d)
    controls: Optional[np.ndarray]     # (N, K, m) control actually applied
    noise1: Optional[np.ndarray]       # (N, K, d) unit normals driving W1
    noise2: Optional[np.ndarray]       # (N, K, m) unit normals driving W2
    master_seed: int
    record_every: int = 1
    path_offset: int = 0
    step_offset: int = 0
    failed: dict = field(default_factory=dict)   # path index -> step index
    channel: Optional[np.ndarray] = None          # (N, K/record_every + 1, m), randomized pairs

    @property
    def n_paths(self):
        return self.states.shape[0]

    @property
    def times(self):
        return self.grid.nodes[::self.record_every]


def phi1(z):
    z = np.asarray(z, float)
    out = np.ones_like(z)
    nz = np.abs(z) > 1e-8
    out[nz] = np.expm1(z[nz]) / z[nz]
    out[~nz] = 1 + z[~nz] / 2
    return out


def conv_std(lam, h):
    """Std of int_0^h e^{lam (h-s)} dW_s, -> sqrt(h) as lam -> 0."""
    lam = np.asarray(lam, float)
    return np.sqrt(h * phi1(2 * lam * h))


def _step_factory(model, h, scheme):
    lam, g = model.lam, model.g
    if scheme == "exp_euler":
        e, p1, sd = np.exp(lam * h), h * phi1(lam * h), g * conv_std(lam, h)

        def step(x, u, z):
            return e * x + p1 * model.F(x, u) + sd * z
    elif scheme == "local_linear":
        def step(x, u, z):
            kap = lam + model.jac_diag(x, u)
            b = lam * x + model.F(x, u)
            return x + h * phi1(kap * h) * b + g * conv_std(kap, h) * z
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return step


def _run_block(model, x0, grid, seed, lo, hi, policy, a0, alpha, scheme, record_every,
               keep_noise, step_offset, noise1, noise2):
    d, m, K, h = model.n_modes, model.m, grid.n_steps, grid.h
    n = hi - lo
    step = _step_factory(model, h, scheme)
    paths = np.arange(lo, hi)
    x = np.array(np.broadcast_to(x0[lo:hi] if x0.ndim == 2 else x0, (n, d)), float)
    randomized = a0 is not None
    if randomized:
        a = np.array(np.broadcast_to(a0[lo:hi] if a0.ndim == 2 else a0, (n, m)), float)
        r, sq = model.r, np.sqrt(h)
    n_rec = K // record_every + 1
    X = np.empty((n, n_rec, d))
    X[:, 0] = x
    I = None
    if randomized:
        I = np.empty((n, n_rec, m))
        I[:, 0] = a
    U = np.empty((n, K, m)) if keep_noise else None
    Z1 = np.empty((n, K, d)) if keep_noise else None
    Z2 = np.empty((n, K, m)) if keep_noise and randomized else None
    dead = np.zeros(n, bool)
    failed = {}
    for c0 in range(0, K, rng.CHUNK):
        c1 = min(K, c0 + rng.CHUNK)
        if noise1 is None:
            z1 = rng.normals(seed, rng.W1, lo, hi, step_offset + c0, step_offset + c1, d)
        else:
            z1 = np.swapaxes(noise1[lo:hi, c0:c1], 0, 1)
        if randomized:
            if noise2 is None:
                z2 = rng.normals(seed, rng.W2, lo, hi, step_offset + c0, step_offset + c1, m)
            else:
                z2 = np.swapaxes(noise2[lo:hi, c0:c1], 0, 1)
        for k in range(c0, c1):
            t = grid.t0 + k * h
            if randomized:
                u = a
            else:
                u = policy.evaluate(k, t, x, paths, m)
            xn = step(x, u, z1[k - c0])
            bad = ~dead & ~(np.all(np.isfinite(xn), axis=1) & (np.abs(xn).max(axis=1) <= GUARD))
            if bad.any():
                for i in np.nonzero(bad)[0]:
                    failed[int(lo + i)] = k + 1
                dead |= bad
            xn[dead] = np.nan
            if keep_noise:
                U[:, k] = u
                Z1[:, k] = z1[k - c0]
            if randomized:
                da = alpha.evaluate(k, t, x, paths, m, a) if alpha is not None else 0.0
                a = a + r * da * h + r * sq * z2[k - c0]
                if keep_noise:
                    Z2[:, k] = z2[k - c0]
            x = xn
            if (k + 1) % record_every == 0:
                X[:, (k + 1) // record_every] = x
                if randomized:
                    I[:, (k + 1) // record_every] = a
    return X, U, Z1, Z2, I, failed


def _simulate(model, x0, grid, n_paths, seed, policy=None, a0=None, alpha=None, scheme="exp_euler",
              record_every=1, keep_noise=True, step_offset=0, workers=1, noise1=None, noise2=None):
    x0 = np.asarray(x0, float)
    if x0.shape[-1] != model.n_modes or (x0.ndim == 2 and x0.shape[0] != n_paths) or x0.ndim > 2:
        raise ValueError(f"x0 shape {x0.shape} does not match n_modes={model.n_modes}, n_paths={n_paths}")
    if a0 is not None:
        a0 = np.asarray(a0, float)
        if a0.shape[-1] != model.m:
            raise ValueError(f"a0 shape {a0.shape} does not match m={model.m}")
    if grid.n_steps % record_every:
        raise ValueError("record_every must divide n_steps")
    if model.drift.lipschitz_x * grid.h >= 1:
        import warnings
        warnings.warn(f"h*L_F = {model.drift.lipschitz_x * grid.h:.3g} >= 1: explicit drift may be unstable")
    jobs = rng.block_ranges(n_paths, workers)
    args = (model, x0, grid, seed)
    kw = dict(policy=policy, a0=a0, alpha=alpha, scheme=scheme, record_every=record_every,
              keep_noise=keep_noise, step_offset=step_offset, noise1=noise1, noise2=noise2)
    if len(jobs) == 1:
        parts = [_run_block(*args, lo, hi, **kw) for lo, hi in jobs]
    else:
        with ThreadPoolExecutor(max_workers=len(jobs)) as ex:
            parts = list(ex.map(lambda j: _run_block(*args, j[0], j[1], **kw), jobs))

    def cat(i):
        return None if parts[0][i] is None else np.concatenate([p[i] for p in parts])
    failed = {}
    for p in parts:
        failed.update(p[5])
    return PathEnsemble(grid, cat(0), cat(1), cat(2), cat(3), int(seed), record_every, 0,
                        step_offset, failed, cat(4))


def simulate_state(model, x0, policy, grid, n_paths, seed, *, scheme="exp_euler", record_every=1,
                   keep_noise=True, step_offset=0, workers=1, noise1=None):
    """Controlled state paths; path i depends only on (seed, i)."""
    if policy is None:
        policy = ControlPolicy.constant(np.zeros(model.m))
    return _simulate(model, x0, grid, n_paths, seed, policy=policy, scheme=scheme, record_every=record_every,
                     keep_noise=keep_noise, step_offset=step_offset, workers=workers, noise1=noise1)


def contraction_gap(model, x0, x0p, policy, grid, n_paths, seed, *, scheme="exp_euler", workers=1):
    """max over paths of |X^x0_t - X^x0'_t| / (e^{-mu t}|x0 - x0'|) per step.

    The second run replays the first run's noise and controls."""
    x0, x0p = np.asarray(x0, float), np.asarray(x0p, float)
    dist0 = np.linalg.norm(x0 - x0p, axis=-1)
    e1 = simulate_state(model, x0, policy, grid, n_paths, seed, scheme=scheme, workers=workers)
    if np.all(dist0 == 0):
        return np.zeros(grid.n_steps + 1)
    replay = ControlPolicy.open_loop(e1.controls)
    e2 = simulate_state(model, x0p, replay, grid, n_paths, seed, scheme=scheme, workers=workers)
    gap = np.linalg.norm(e1.states - e2.states, axis=2)
    ref = np.exp(-model.mu * (grid.nodes - grid.t0))[None, :] * np.reshape(dist0, (-1, 1))
    return np.nanmax(gap / ref, axis=0)


@dataclass
class MomentReport:
    p_list: list
    sup_moments: dict      # p -> (estimate, standard error)
    mean_abs: np.ndarray   # E|X_t| per recorded time
    mean_abs_se: np.ndarray
    kappa: float           # max_t E|X_t| / (1 + |x0|)
    growth_flag: bool      # late-time trend in E|X_t| beyond 3 SE

    def to_json(self):
        return {"p_list": list(self.p_list),
                "sup_moments": {str(p): list(v) for p, v in self.sup_moments.items()},
                "mean_abs_last": float(self.mean_abs[-1]), "kappa": float(self.kappa),
                "growth_flag": bool(self.growth_flag)}


def moment_report(ensemble, p_list=(2,)):
    X = ensemble.states
    ok = np.all(np.isfinite(X), axis=(1, 2))
    X = X[ok]
    if X.shape[0] == 0:
        raise ValueError("empty ensemble")
    nrm = np.linalg.norm(X, axis=2)
    n = X.shape[0]
    sup = {}
    for p in p_list:
        s = nrm.max(axis=1) ** p
        sup[p] = (float(s.mean()), float(s.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0)
    ma = nrm.mean(axis=0)
    se = nrm.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(ma)
    x0n = nrm[:, 0].mean()
    kappa = float(ma.max() / (1 + x0n))
    # compare the last quarter against the second quarter of the horizon
    K = len(ma)
    if K >= 8:
        q2 = ma[K // 4:K // 2].mean()
        q4 = ma[3 * K // 4:].mean()
        s = np.sqrt(se[K // 4:K // 2].mean() ** 2 + se[3 * K // 4:].mean() ** 2)
        flag = bool(q4 - q2 > 3 * s + 1e-12)
    else:
        flag = False
    return MomentReport(list(p_list), sup, ma, se, kappa, flag)


# ---------------------------------------------------------------- export

def write_binary(ensemble, path):
    """ESCL1 columnar dump: header then path-major little-endian float64."""
    X = np.ascontiguousarray(ensemble.states, dtype="<f8")
    n, k1, d = X.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQQQ", n, k1 - 1, d, ensemble.master_seed & (2**64 - 1)))
        fh.write(struct.pack("<dd", ensemble.grid.t0, ensemble.grid.t_end))
        fh.write(X.tobytes())
        if ensemble.channel is not None:
            Ic = np.ascontiguousarray(ensemble.channel, dtype="<f8")
            fh.write(b"I")
            fh.write(struct.pack("<Q", Ic.shape[2]))
            fh.write(Ic.tobytes())


def read_binary(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:5] != MAGIC:
        raise ValueError(f"{path}: not an ESCL1 file")
    n, k, d, seed = struct.unpack_from("<QQQQ", buf, 5)
    t0, t1 = struct.unpack_from("<dd", buf, 37)
    off = 53
    cnt = n * (k + 1) * d
    X = np.frombuffer(buf, "<f8", cnt, off).reshape(n, k + 1, d)
    off += 8 * cnt
    out = {"n_paths": n, "n_steps": k, "n_modes": d, "seed": seed, "t0": t0, "t_end": t1, "X": X.copy()}
    if off < len(buf) and buf[off:off + 1] == b"I":
        m, = struct.unpack_from("<Q", buf, off + 1)
        out["I"] = np.frombuffer(buf, "<f8", n * (k + 1) * m, off + 9).reshape(n, k + 1, m).copy()
    return out


def write_csv(ensemble, path, header=""):
    X = ensemble.states
    n, k1, d = X.shape
    t = ensemble.times
    cols = ["path", "step", "t"] + [f"x{j + 1}" for j in range(d)]
    blocks = [np.repeat(np.arange(n), k1)[:, None], np.tile(np.arange(k1), n)[:, None],
              np.tile(t, n)[:, None], X.reshape(-1, d)]
    if ensemble.channel is not None:
        m = ensemble.channel.shape[2]
        cols += [f"I{j + 1}" for j in range(m)]
        blocks.append(ensemble.channel.reshape(-1, m))
    data = np.hstack(blocks)
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write(",".join(cols) + "\n")
        for row in data:
            fh.write(f"{int(row[0])},{int(row[1])}," + ",".join(repr(float(v)) for v in row[2:]) + "\n")
