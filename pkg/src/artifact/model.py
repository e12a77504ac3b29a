"""Problem instances on a truncated spectral basis, and sampled audits of the
structural assumptions (dissipativity, noise profile, growth, Lipschitz and
boundedness constants, randomization operator)."""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from . import catalog

SCHEMA_VERSION = 1
LIP_LEEWAY = 1e-9


@dataclass(frozen=True)
class SpectralOperator:
    eigenvalues: tuple

    @property
    def n_modes(self):
        return len(self.eigenvalues)

    @property
    def lam(self):
        return np.asarray(self.eigenvalues, dtype=float)


@dataclass(frozen=True)
class NoiseMap:
    per_mode_gain: tuple
    hs_constant: float      # M_A
    hs_exponent: float      # gamma

    @property
    def g(self):
        return np.asarray(self.per_mode_gain, dtype=float)


@dataclass(frozen=True)
class RandomizationMap:
    per_mode_weight: tuple
    declared_trace: Optional[float] = None

    @property
    def m_control_modes(self):
        return len(self.per_mode_weight)

    @property
    def r(self):
        return np.asarray(self.per_mode_weight, dtype=float)


@dataclass(frozen=True)
class DriftSpec:
    evaluator: Callable
    lipschitz_x: float      # L_F
    growth: float           # C_F
    dissipativity: float    # mu


@dataclass(frozen=True)
class CostSpec:
    running: Callable
    M_ell: float
    L_ell: float
    terminal: Optional[Callable] = None
    C_phi: Optional[float] = None


@dataclass(frozen=True)
class ModelInstance:
    operator: SpectralOperator
    noise: NoiseMap
    drift: DriftSpec
    cost: CostSpec
    randomization: RandomizationMap
    delta: float = 1.0
    rho: Optional[float] = None
    eta: Optional[float] = None
    name: str = ""

    # shorthands used throughout the numerics
    @property
    def n_modes(self):
        return self.operator.n_modes

    @property
    def m(self):
        return self.randomization.m_control_modes

    @property
    def lam(self):
        return self.operator.lam

    @property
    def g(self):
        return self.noise.g

    @property
    def r(self):
        return self.randomization.r

    @property
    def mu(self):
        return self.drift.dissipativity

    @property
    def M_ell(self):
        return self.cost.M_ell

    @property
    def L_ell(self):
        return self.cost.L_ell

    @property
    def rho_eff(self):
        return (0.5 - self.noise.hs_exponent) / 2 if self.rho is None else self.rho

    def F(self, x, a):
        return self.drift.evaluator(np.asarray(x, float), np.asarray(a, float))

    def ell(self, x, a):
        return self.cost.running(np.asarray(x, float), np.asarray(a, float))

    def phi(self, x):
        if self.cost.terminal is None:
            return np.zeros(np.shape(x)[:-1])
        return self.cost.terminal(np.asarray(x, float))

    def jac_diag(self, x, a, eps=1e-6):
        """Diagonal of dF/dx, analytic when the catalog provides it."""
        jd = getattr(self.drift.evaluator, "jac_diag", None)
        x = np.asarray(x, float)
        a = np.asarray(a, float)
        shape = np.broadcast_shapes(x.shape[:-1], a.shape[:-1])
        if jd is not None:
            return np.broadcast_to(jd(x, a), shape + x.shape[-1:])
        x = np.broadcast_to(x, shape + x.shape[-1:])
        a = np.broadcast_to(a, shape + a.shape[-1:])
        out = np.empty(x.shape)
        for k in range(x.shape[-1]):
            xp, xm = x.copy(), x.copy()
            xp[..., k] += eps
            xm[..., k] -= eps
            out[..., k] = (self.F(xp, a)[..., k] - self.F(xm, a)[..., k]) / (2 * eps)
        return out

    def G_norm(self):
        return float(np.max(np.abs(self.g))) if self.n_modes else 0.0

    def with_cost(self, running=None, M_ell=None, L_ell=None, terminal=None, C_phi=None):
        c = self.cost
        new = CostSpec(running if running is not None else c.running,
                       c.M_ell if M_ell is None else M_ell,
                       c.L_ell if L_ell is None else L_ell,
                       terminal if terminal is not None else c.terminal,
                       c.C_phi if C_phi is None else C_phi)
        return dataclasses.replace(self, cost=new)

    def with_terminal(self, name, params, C_phi):
        phi = catalog.make_terminal(name, params, self.n_modes, self.m)
        return self.with_cost(terminal=phi, C_phi=C_phi)

    def to_json(self):
        for part, fn in (("drift", self.drift.evaluator), ("cost", self.cost.running)):
            if not isinstance(fn, catalog.CatalogEntry):
                raise TypeError(f"{part} is not a catalog form and cannot be serialized")
        doc = {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "eigenvalues": [float(v) for v in self.lam],
            "noise_gains": [float(v) for v in self.g],
            "randomization_weights": [float(v) for v in self.r],
            "mu": float(self.mu),
            "M_ell": float(self.M_ell),
            "L_ell": float(self.L_ell),
            "C_F": float(self.drift.growth),
            "L_F": float(self.drift.lipschitz_x),
            "M_A": float(self.noise.hs_constant),
            "gamma": float(self.noise.hs_exponent),
            "rho": float(self.rho_eff),
            "delta": float(self.delta),
            "eta": None if self.eta is None else float(self.eta),
            "drift": self.drift.evaluator.to_json(),
            "cost": self.cost.running.to_json(),
        }
        if isinstance(self.cost.terminal, catalog.CatalogEntry):
            doc["terminal"] = self.cost.terminal.to_json()
            doc["C_phi"] = float(self.cost.C_phi)
        return doc

    def hash(self):
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


MODEL_KEYS = {"schema_version", "name", "eigenvalues", "noise_gains", "randomization_weights",
              "mu", "M_ell", "L_ell", "C_F", "L_F", "M_A", "gamma", "rho", "delta", "eta",
              "drift", "cost", "terminal", "C_phi"}


def model_from_json(doc):
    if isinstance(doc, (str, bytes)) and not str(doc).lstrip().startswith("{"):
        with open(doc) as fh:
            doc = json.load(fh)
    elif isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    extra = set(doc) - MODEL_KEYS
    if extra:
        raise ValueError(f"unknown model fields: {sorted(extra)}")
    if doc.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema_version {doc.get('schema_version')}")
    lam = [float(v) for v in doc["eigenvalues"]]
    g = [float(v) for v in doc["noise_gains"]]
    r = [float(v) for v in doc["randomization_weights"]]
    if len(g) != len(lam):
        raise ValueError("noise_gains and eigenvalues differ in length")
    d, m = len(lam), len(r)
    F = catalog.make_drift(doc["drift"]["name"], doc["drift"].get("params", []), d, m)
    ell = catalog.make_cost(doc["cost"]["name"], doc["cost"].get("params", []), d, m)
    phi, C_phi = None, None
    if doc.get("terminal") is not None:
        phi = catalog.make_terminal(doc["terminal"]["name"], doc["terminal"].get("params", []), d, m)
        C_phi = float(doc["C_phi"])
    return ModelInstance(
        operator=SpectralOperator(tuple(lam)),
        noise=NoiseMap(tuple(g), float(doc["M_A"]), float(doc["gamma"])),
        drift=DriftSpec(F, float(doc["L_F"]), float(doc["C_F"]), float(doc["mu"])),
        cost=CostSpec(ell, float(doc["M_ell"]), float(doc["L_ell"]), phi, C_phi),
        randomization=RandomizationMap(tuple(r)),
        delta=float(doc.get("delta", 1.0)),
        rho=None if doc.get("rho") is None else float(doc["rho"]),
        eta=None if doc.get("eta") is None else float(doc["eta"]),
        name=doc.get("name", ""),
    )


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------- validation

@dataclass
class AssumptionCheck:
    name: str
    passed: bool
    margin: float           # >0 means violated by that much
    witness: dict = field(default_factory=dict)
    detail: str = ""

    def to_json(self):
        return {"name": self.name, "passed": bool(self.passed), "margin": float(self.margin),
                "witness": {k: np.asarray(v).tolist() for k, v in self.witness.items()},
                "detail": self.detail}


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def to_json(self):
        return {"passed": self.passed, "checks": [c.to_json() for c in self.checks]}


def hs_profile(lam, g, gamma, s):
    """s^gamma * (sum_k g_k^2 e^{2 lam_k s})^(1/2) on an array of s."""
    lam, g, s = np.asarray(lam, float), np.asarray(g, float), np.asarray(s, float)
    tot = (g[None, :] ** 2 * np.exp(2 * np.outer(s, lam))).sum(axis=1)
    return s ** gamma * np.sqrt(tot)


S_GRID = np.logspace(-8, 0, 801)


def _samples(n, d, m, seed, radius_x, radius_a):
    """Deterministic scrambled Halton points: (x, x', a) in boxes."""
    dim = 2 * d + m
    pts = qmc.Halton(d=dim, scramble=True, seed=seed).random(n)
    pts = 2 * pts - 1
    x = radius_x * pts[:, :d]
    x2 = radius_x * pts[:, d:2 * d]
    a = radius_a * pts[:, 2 * d:]
    # half of the pairs are close pairs, probing local slopes
    half = n // 2
    x2[:half] = x[:half] + 1e-3 * radius_x * pts[:half, d:2 * d]
    return x, x2, a


def validate_assumptions(model, n_samples=1000, seed=0, radius_x=4.0, radius_a=6.0, tol=1e-9):
    d, m = model.n_modes, model.m
    x, x2, a = _samples(n_samples, d, m, seed, radius_x, radius_a)
    checks = []

    lam = model.lam
    bad_sign = np.max(lam) if d else 0.0
    bad_mono = np.max(np.diff(lam)) if d > 1 else -np.inf
    marg = max(bad_sign, bad_mono if np.isfinite(bad_mono) else -np.inf)
    checks.append(AssumptionCheck("A.1", bool(bad_sign <= 0 and (d < 2 or bad_mono <= 0)), float(marg),
                                  {"eigenvalues": lam}, "eigenvalues nonpositive and nonincreasing"))

    gam, MA = model.noise.hs_exponent, model.noise.hs_constant
    prof = hs_profile(lam, model.g, gam, S_GRID)
    j = int(np.argmax(prof))
    ok = 0 <= gam < 0.5 and prof[j] <= MA * (1 + tol)
    checks.append(AssumptionCheck("A.2", bool(ok), float(prof[j] - MA), {"s": S_GRID[j], "profile": prof[j]},
                                  f"sup_s s^gamma |e^(sA)G|_HS = {prof[j]:.6g} vs M_A = {MA:.6g}, gamma = {gam}"))

    rho, delta = model.rho_eff, model.delta
    ok = delta > 0 and 0 < rho and rho + gam < 0.5
    checks.append(AssumptionCheck("A.3", bool(ok), float(rho + gam - 0.5), {"rho": rho, "delta": delta},
                                  "delta > 0 and 0 < rho < 1/2 - gamma"))

    Fx = model.F(x, a)
    Fx2 = model.F(x2, a)
    nx = np.linalg.norm(x, axis=1)
    grow = np.linalg.norm(Fx, axis=1) - model.drift.growth * (1 + nx)
    j = int(np.argmax(grow))
    dx = np.linalg.norm(x - x2, axis=1)
    dF = np.linalg.norm(Fx - Fx2, axis=1)
    lip = dF - model.drift.lipschitz_x * dx * (1 + LIP_LEEWAY) - tol
    k = int(np.argmax(lip))
    ok = grow[j] <= tol and lip[k] <= 0
    checks.append(AssumptionCheck("A.4", bool(ok), float(max(grow[j], lip[k])),
                                  {"x": x[j], "a": a[j], "x_lip": x[k], "x2_lip": x2[k]},
                                  "|F| <= C_F(1+|x|) and |F(x,a)-F(x',a)| <= L_F|x-x'|"))

    mu = model.mu
    inner = np.einsum("ij,ij->i", Fx - Fx2, x - x2)
    marg = inner + mu * dx ** 2 * (1 - LIP_LEEWAY)
    k = int(np.argmax(marg))
    ok = mu > 0 and marg[k] <= tol * (1 + dx[k] ** 2)
    checks.append(AssumptionCheck("A.5", bool(ok), float(marg[k]), {"x": x[k], "x2": x2[k], "a": a[k]},
                                  "<F(x,a)-F(x',a), x-x'> <= -mu|x-x'|^2"))

    l1, l2 = model.ell(x, a), model.ell(x2, a)
    bnd = np.abs(l1) - model.M_ell
    j = int(np.argmax(bnd))
    lip = np.abs(l1 - l2) - model.L_ell * dx * (1 + LIP_LEEWAY) - tol
    k = int(np.argmax(lip))
    ok = np.isfinite(model.M_ell) and bnd[j] <= tol and lip[k] <= 0
    checks.append(AssumptionCheck("A.6", bool(ok), float(max(bnd[j], lip[k])),
                                  {"x": x[j], "a": a[j], "x_lip": x[k], "x2_lip": x2[k]},
                                  "|l| <= M_ell and |l(x,a)-l(x',a)| <= L_ell|x-x'|"))

    if model.cost.terminal is not None:
        ph = np.abs(model.phi(x)) - model.cost.C_phi * (1 + nx)
        j = int(np.argmax(ph))
        checks.append(AssumptionCheck("A.7", bool(ph[j] <= tol), float(ph[j]), {"x": x[j]},
                                      "|phi(x)| <= C_phi(1+|x|)"))
    else:
        checks.append(AssumptionCheck("A.7", True, 0.0, {}, "no terminal cost declared (phi = 0)"))

    r = model.r
    partial = np.cumsum(r)
    limit = model.randomization.declared_trace
    limit = float(partial[-1]) if limit is None else float(limit)
    ok = m >= 1 and np.all(r > 0) and partial[-1] <= limit * (1 + 1e-12)
    checks.append(AssumptionCheck("A.8", bool(ok), float(max(-r.min(), partial[-1] - limit)),
                                  {"weights": r, "partial_sums": partial, "declared_trace": limit},
                                  "R injective (r_j > 0) with partial sums below the declared trace"))
    return ValidationReport(checks)


# ---------------------------------------------------------------- builders

def default_randomization(m):
    return RandomizationMap(tuple(2.0 ** -np.arange(1, m + 1)), declared_trace=1.0)


def _hs_constant(lam_fn, g_fn, gamma, n_ext=4096, margin=1.02):
    """M_A from an extended mode profile, so that every truncation passes."""
    k = np.arange(1, n_ext + 1)
    return float(hs_profile(lam_fn(k), g_fn(k), gamma, S_GRID).max() * margin)


def _noise_fn(profile):
    if profile in (None, "identity"):
        return lambda k: np.ones_like(k, dtype=float)
    if profile == "degenerate":
        return lambda k: (np.asarray(k) == 1).astype(float)
    if isinstance(profile, str) and profile.startswith("power:"):
        p = float(profile.split(":", 1)[1])
        return lambda k: np.asarray(k, float) ** -p
    gains = np.asarray(profile, float)
    return lambda k: np.where(np.asarray(k) <= len(gains), gains[np.minimum(np.asarray(k), len(gains)) - 1], 0.0)


def _assemble(name, lam_fn, g_fn, n_modes, drift_params, cost_params, n_controls, gamma, M_A,
              weights, eta, audit, n_samples, seed):
    dp, cp = dict(drift_params), dict(cost_params)
    mu = float(dp["mu"])
    if not mu > 0:
        raise ValueError(f"dissipativity constant mu must be > 0, got {mu}")
    M_ell = cp.get("M_ell")
    if M_ell is None or not np.isfinite(float(M_ell)):
        raise ValueError("running cost must be bounded: declare a finite M_ell")
    k = np.arange(1, n_modes + 1)
    lam = lam_fn(k)
    g = g_fn(k)
    if M_A is None:
        M_A = _hs_constant(lam_fn, g_fn, gamma)
    F = catalog.make_drift(dp["name"], dp.get("params", []), n_modes, n_controls)
    ell = catalog.make_cost(cp["name"], cp.get("params", []), n_modes, n_controls)
    phi, C_phi = None, None
    if cp.get("terminal"):
        phi = catalog.make_terminal(cp["terminal"]["name"], cp["terminal"].get("params", []), n_modes, n_controls)
        C_phi = float(cp["terminal"]["C_phi"])
    R = default_randomization(n_controls) if weights is None else RandomizationMap(tuple(float(w) for w in weights))
    model = ModelInstance(
        operator=SpectralOperator(tuple(float(v) for v in lam)),
        noise=NoiseMap(tuple(float(v) for v in g), float(M_A), float(gamma)),
        drift=DriftSpec(F, float(dp.get("L_F", mu)), float(dp.get("C_F", mu)), mu),
        cost=CostSpec(ell, float(M_ell), float(cp["L_ell"]), phi, C_phi),
        randomization=R, delta=1.0, rho=None, eta=eta, name=name)
    if audit:
        rep = validate_assumptions(model, n_samples=n_samples, seed=seed)
        if not rep.passed:
            bad = ", ".join(f"{c.name} (margin {c.margin:.3g})" for c in rep.failures())
            raise ValueError(f"model {name!r} fails assumption audit: {bad}")
    return model


HEAT_DRIFT = {"name": "dirichlet_pointwise", "params": [2.0, 0.0, 1.0, 0.0, 0.0], "mu": 2.0, "L_F": 2.0, "C_F": 2.0}
DESK_COST = {"name": "tanh2", "params": [1.0, 0.1], "M_ell": 1.1, "L_ell": 0.77}


def build_heat_model(n_modes, drift_params=None, cost_params=None, noise_profile="identity", *,
                     n_controls=1, gamma=0.25, M_A=None, randomization_weights=None,
                     audit=True, n_samples=1000, seed=0, name="heat"):
    """Stochastic heat equation on (0,1), Dirichlet: lambda_k = -(k pi)^2."""
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    return _assemble(name, lambda k: -(np.asarray(k, float) * np.pi) ** 2, _noise_fn(noise_profile), n_modes,
                     drift_params or HEAT_DRIFT, cost_params or DESK_COST, n_controls, gamma, M_A,
                     randomization_weights, None, audit, n_samples, seed)


def build_colored_model(n_modes, drift_params=None, cost_params=None, eta=0.5, *, c=1.0, n_controls=1,
                        gamma=None, M_A=None, randomization_weights=None, audit=True, n_samples=1000,
                        seed=0, name="colored"):
    """Spatially colored noise G = (-A)^(-eta): lambda_k = -c k, g_k = (c k)^(-eta)."""
    if not eta > 0.25:
        raise ValueError(f"colored-noise exponent must exceed 1/4, got eta = {eta}")
    if not c > 0:
        raise ValueError("eigenvalue scale c must be > 0")
    if gamma is None:
        gamma = max(0.0, 0.5 - eta) + 0.01
    dp = drift_params or {"name": "modal_tanh", "params": [1.0, 1.0], "mu": 1.0, "L_F": 1.0, "C_F": 1.0}
    return _assemble(name, lambda k: -c * np.asarray(k, float), lambda k: (c * np.asarray(k, float)) ** -eta,
                     n_modes, dp, cost_params or DESK_COST, n_controls, gamma, M_A,
                     randomization_weights, float(eta), audit, n_samples, seed)


def build_desk_model(cost_params=None, *, lam=-1.0, sigma=1.0, mu=1.0, gain=1.0, audit=True, name="desk1d"):
    """One-mode controlled OU: dX = (lam X - mu X + gain tanh(a)) dt + sigma dW."""
    dp = {"name": "modal_tanh", "params": [mu, gain], "mu": mu, "L_F": mu, "C_F": max(mu, abs(gain))}
    return _assemble(name, lambda k: np.full(np.shape(k), lam, float), lambda k: np.where(np.asarray(k) == 1, sigma, 0.0),
                     1, dp, cost_params or DESK_COST, 1, 0.0, None, None, None, audit, 1000, 0)
