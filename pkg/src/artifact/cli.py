"""Manifest-driven experiment runner.

    escl <kind> --manifest PATH [--out DIR] [--workers N] [--seed-override S]
    escl report RECORD.json [RECORD.json ...] --out DIR [--tol 0.05]

Exit status: 0 when every declared check passes, 2 when a check fails,
1 on operational errors (bad manifest, unreadable model, solver failure).
"""
import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import __version__, bsde, ergodic, oracle
from .model import (build_colored_model, build_desk_model, build_heat_model, model_from_json,
                    validate_assumptions)
from .state_sim import ControlPolicy, TimeGrid, moment_report, simulate_state, write_binary

KINDS = ("validate", "simulate", "bsde", "ergodic-sweep", "long-time", "oracle-compare", "report")
SCHEMA_VERSION = 1

BUILTINS = {
    "desk1d": lambda: build_desk_model(),
    "desk1d_xonly": lambda: build_desk_model({"name": "state_tanh2", "params": [1.0], "M_ell": 1.0,
                                              "L_ell": 0.77}, name="desk1d_xonly"),
    "heat4": lambda: build_heat_model(4, name="heat4"),
    "colored2": lambda: build_colored_model(2, name="colored2"),
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_vec = {"type": "array", "items": _num, "minItems": 1}
_terminal = {"type": "object", "additionalProperties": False, "required": ["name", "C_phi"],
             "properties": {"name": {"type": "string"}, "params": {"type": "array", "items": _num},
                            "C_phi": _pos}}
_cfg_props = {}
for _f in bsde.BsdeConfig.__dataclass_fields__:
    _cfg_props[_f] = {}
_cfg_props.update({"h": _pos, "n_paths": {"type": "integer", "minimum": 2}, "workers": {"type": "integer",
                                                                                        "minimum": 1}})

MANIFEST_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "kind", "seed"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "kind": {"enum": list(KINDS)},
        "model": {"oneOf": [{"type": "string"}, {"type": "object"}]},
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string"},
        "discretization": {"type": "object", "additionalProperties": False, "properties": _cfg_props},
        "ladders": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "beta": {"type": "array", "items": _pos, "minItems": 1},
                "T": {"type": "array", "items": _pos, "minItems": 1},
                "n": {"type": "array", "items": {"oneOf": [{"type": "integer", "minimum": 1},
                                                           {"const": "inf"}]}, "minItems": 1},
            },
        },
        "x0": _vec,
        "a0": _vec,
        "x_grid": {"oneOf": [_vec, {"type": "object", "additionalProperties": False,
                                    "required": ["lo", "hi", "num"],
                                    "properties": {"lo": _num, "hi": _num,
                                                   "num": {"type": "integer", "minimum": 2}}}]},
        "terminal": _terminal,
        "simulation": {"type": "object", "additionalProperties": False, "required": ["T", "h", "n_paths"],
                       "properties": {"T": _pos, "h": _pos, "n_paths": {"type": "integer", "minimum": 1},
                                      "record_every": {"type": "integer", "minimum": 1},
                                      "control": _vec,
                                      "scheme": {"enum": ["exp_euler", "local_linear"]}}},
        "oracle": {"type": "object", "additionalProperties": False,
                   "properties": {"n_x": {"type": "integer", "minimum": 11}, "half_width": _pos,
                                  "n_controls": {"type": "integer", "minimum": 2}}},
        "inputs": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "tolerances": {"type": "object", "additionalProperties": False,
                       "properties": {k: _pos for k in ("clip_rate", "z_se_mult", "monotone", "value_rel",
                                                        "lambda_rel", "vhat_rel", "residual", "cauchy",
                                                        "lipschitz")}},
    },
}

# per-kind required blocks (ladders must be declared: no silent defaults)
REQUIRED = {
    "validate": ["model"],
    "simulate": ["model", "simulation"],
    "bsde": ["model", "ladders.beta", "ladders.n", "x0", "a0"],
    "ergodic-sweep": ["model", "ladders.beta", "x_grid"],
    "long-time": ["model", "ladders.T", "x0"],
    "oracle-compare": ["model", "ladders.beta", "x_grid"],
    "report": ["inputs"],
}


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------- manifest parsing

def _node_line(root, path):
    """Line (1-based) of the YAML node at a key path, best effort."""
    node = root
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == str(key):
                    nxt = v
                    break
            if nxt is None:
                break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            break
    return node.start_mark.line + 1 if node is not None else None


def load_manifest(path):
    text = Path(path).read_text()
    try:
        root = yaml.compose(text)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else "unknown line"
        raise ManifestError(f"{path}: YAML parse error at {where}: {getattr(e, 'problem', e)}")
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest must be a mapping")
    errors = sorted(jsonschema.Draft202012Validator(MANIFEST_SCHEMA).iter_errors(doc),
                    key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        field = ".".join(map(str, e.absolute_path)) or "<root>"
        if e.validator == "additionalProperties":
            extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
            field = ".".join(list(map(str, e.absolute_path)) + extra[:1])
            msg = f"unknown field(s) {extra}"
            line = _node_line(root, list(e.absolute_path) + extra[:1])
        else:
            msg = e.message
            line = _node_line(root, list(e.absolute_path))
        raise ManifestError(f"{path}: line {line}: field '{field}': {msg}")
    for req in REQUIRED[doc["kind"]]:
        cur = doc
        for part in req.split("."):
            cur = cur.get(part) if isinstance(cur, dict) else None
        if cur is None:
            raise ManifestError(f"{path}: kind '{doc['kind']}' requires field '{req}'")
    lad = doc.get("ladders", {})
    if "beta" in lad and any(b2 >= b1 for b1, b2 in zip(lad["beta"], lad["beta"][1:])):
        raise ManifestError(f"{path}: line {_node_line(root, ['ladders', 'beta'])}: "
                            "field 'ladders.beta' must be strictly decreasing")
    if "T" in lad and any(b2 <= b1 for b1, b2 in zip(lad["T"], lad["T"][1:])):
        raise ManifestError(f"{path}: line {_node_line(root, ['ladders', 'T'])}: "
                            "field 'ladders.T' must be strictly increasing")
    if "n" in lad:
        nv = [math.inf if v == "inf" else v for v in lad["n"]]
        if any(b2 <= b1 for b1, b2 in zip(nv, nv[1:])):
            raise ManifestError(f"{path}: line {_node_line(root, ['ladders', 'n'])}: "
                                "field 'ladders.n' must be strictly increasing")
    if doc["kind"] == "ergodic-sweep" and len(lad["beta"]) < 2:
        raise ManifestError(f"{path}: field 'ladders.beta' needs at least two entries for an ergodic sweep")
    if doc["kind"] == "long-time" and len(lad["T"]) < 2:
        raise ManifestError(f"{path}: field 'ladders.T' needs at least two entries for a long-time sweep")
    try:
        bsde.BsdeConfig.from_dict(doc.get("discretization", {}))
    except TypeError as e:
        raise ManifestError(f"{path}: field 'discretization': {e}")
    return doc


def manifest_hash(doc):
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def resolve_model(ref, base_dir):
    if isinstance(ref, dict):
        return model_from_json(ref)
    if ref.startswith("builtin:"):
        name = ref.split(":", 1)[1]
        if name not in BUILTINS:
            raise ManifestError(f"unknown builtin model {name!r}; known: {sorted(BUILTINS)}")
        return BUILTINS[name]()
    p = Path(ref)
    if not p.is_absolute():
        p = Path(base_dir) / p
    if not p.exists():
        raise ManifestError(f"model file not found: {p}")
    return model_from_json(str(p))


def _x_grid(g):
    if isinstance(g, dict):
        return np.linspace(g["lo"], g["hi"], g["num"])
    return np.asarray(g, float)


# ---------------------------------------------------------------- output helpers

class Output:
    def __init__(self, out_dir, mhash, seed):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.mhash, self.seed = mhash, seed
        self.files = []

    @property
    def provenance(self):
        return {"manifest_hash": self.mhash, "seed": self.seed}

    @property
    def header(self):
        return f"manifest_hash={self.mhash}, seed={self.seed}"

    def json(self, name, doc):
        p = self.dir / name
        doc = dict(doc)
        doc["provenance"] = self.provenance
        with open(p, "w") as fh:
            json.dump(bsde._jsonable(doc), fh, indent=1, sort_keys=True)
            fh.write("\n")
        self.files.append(str(p))
        return p

    def csv(self, name, cols, rows):
        p = self.dir / name
        with open(p, "w", newline="") as fh:
            fh.write(f"# {self.header}\n")
            w = csv.writer(fh)
            w.writerow(cols)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, (int, float, np.floating, np.integer)) else v
                            for v in r])
        self.files.append(str(p))
        return p

    def register(self, p):
        self.files.append(str(p))


class Checks:
    def __init__(self):
        self.items = {}

    def add(self, name, passed, value=None, tol=None):
        self.items[name] = {"passed": bool(passed), "value": value, "tol": tol}

    @property
    def passed(self):
        return all(c["passed"] for c in self.items.values())

    def failing(self):
        return [k for k, c in self.items.items() if not c["passed"]]


def _cfg(doc, workers):
    d = dict(doc.get("discretization", {}))
    d["workers"] = workers
    return bsde.BsdeConfig.from_dict(d)


def _oracle1d(model, doc):
    o = doc.get("oracle", {})
    hw = o.get("half_width", 6.0)
    controls = np.linspace(-6.0, 6.0, o.get("n_controls", 201))
    return oracle.Oracle1DModel.from_model(model, controls=controls, half_width=hw, n_x=o.get("n_x", 1201))


# ---------------------------------------------------------------- kinds

def run_validate(model, doc, out, checks, workers):
    rep = validate_assumptions(model)
    out.json("validation.json", {"model_hash": model.hash(), "report": rep.to_json()})
    for c in rep.checks:
        checks.add(f"assumption_{c.name}", c.passed, c.margin)


def run_simulate(model, doc, out, checks, workers):
    s = doc["simulation"]
    grid = TimeGrid.from_step(s["T"], s["h"])
    rec = s.get("record_every", 1)
    if grid.n_steps % rec:
        raise ManifestError("simulation.record_every must divide the number of steps")
    x0 = np.asarray(doc.get("x0", np.zeros(model.n_modes)), float)
    ctrl = ControlPolicy.constant(s.get("control", np.zeros(model.m)))
    ens = simulate_state(model, x0, ctrl, grid, s["n_paths"], doc["seed"], scheme=s.get("scheme", "exp_euler"),
                         record_every=rec, keep_noise=False, workers=workers)
    p = out.dir / "paths.escl"
    write_binary(ens, p)
    out.register(p)
    mr = moment_report(ens, (2,))
    out.csv("moments.csv", ["t", "mean_abs_X", "se"], zip(ens.times, mr.mean_abs, mr.mean_abs_se))
    out.json("simulate.json", {"model_hash": model.hash(), "moments": mr.to_json(),
                               "failed_paths": len(ens.failed), "n_paths": ens.n_paths,
                               "grid": {"t0": grid.t0, "t_end": grid.t_end, "n_steps": grid.n_steps}})
    checks.add("no_divergence", not ens.failed, len(ens.failed))
    checks.add("moments_bounded", not mr.growth_flag, mr.kappa)


def run_bsde(model, doc, out, checks, workers):
    cfg = _cfg(doc, workers)
    tol = doc.get("tolerances", {})
    x0, a0 = np.asarray(doc["x0"], float), np.asarray(doc["a0"], float)
    n_list = [math.inf if v == "inf" else float(v) for v in doc["ladders"]["n"]]
    summary = []
    for beta in doc["ladders"]["beta"]:
        tag = f"beta{beta:g}"
        if len(n_list) == 1:
            n = n_list[0]
            sol = (bsde.solve_constrained(model, x0, a0, beta, config=cfg, seed=doc["seed"]) if math.isinf(n)
                   else bsde.solve_penalized(model, x0, a0, beta, n, config=cfg, seed=doc["seed"]))
            rep = None
        else:
            finite = [v for v in n_list if not math.isinf(v)]
            sol, rep = bsde.constrained_limit(model, x0, a0, beta, finite, config=cfg, seed=doc["seed"],
                                              tol=tol.get("monotone"))
            sol.ladder_solutions = None
        d = sol.diagnostics
        sol.write_json(out.dir / f"bsde_{tag}.json", include_coeffs=False,
                       extra={"provenance": out.provenance, "model_hash": model.hash(),
                              "monotonicity": rep.to_json() if rep else None})
        out.register(out.dir / f"bsde_{tag}.json")
        sol.write_csv(out.dir / f"bsde_{tag}.csv", header=out.header)
        out.register(out.dir / f"bsde_{tag}.csv")
        summary.append({"beta": beta, "y0": sol.y0, "clip_rate": d["clip_rate"], "sup_Z": d["sup_Z_all"]})
        checks.add(f"{tag}_y_bound", d["max_abs_Y"] <= d["bound_Y"] * (1 + 1e-12), d["max_abs_Y"], d["bound_Y"])
        if "clip_rate" in tol:
            checks.add(f"{tag}_clip_rate", d["clip_rate"] < tol["clip_rate"], d["clip_rate"], tol["clip_rate"])
        if "z_se_mult" in tol:
            zb = d["z_bound_weak"] + tol["z_se_mult"] * d["z_se"]
            checks.add(f"{tag}_z_bound", d["sup_Z_all"] <= zb, d["sup_Z_all"], zb)
        if rep is not None:
            checks.add(f"{tag}_monotone", rep.monotone, rep.worst_increase, rep.tol)
            checks.add(f"{tag}_k_nondecreasing", rep.k_nondecreasing)
    out.csv("bsde_summary.csv", ["beta", "y0", "clip_rate", "sup_Z"],
            [[s["beta"], s["y0"], s["clip_rate"], s["sup_Z"]] for s in summary])


def _oracle_ergodic(model, doc):
    if model.n_modes != 1:
        return None
    return oracle.hjb_ergodic(_oracle1d(model, doc))


def run_ergodic_sweep(model, doc, out, checks, workers):
    cfg = _cfg(doc, workers)
    tol = doc.get("tolerances", {})
    xg = _x_grid(doc["x_grid"])
    est = ergodic.vanishing_discount_sweep(model, xg, doc["ladders"]["beta"], cfg, seed=doc["seed"],
                                           cauchy_tol=tol.get("cauchy"), workers=workers)
    diag = est.extrapolation_diagnostics
    budget = abs(est.lam - diag["lam_smallest_beta"]) + diag["max_residual_other"]
    inv = est.check_invariants(model, tol.get("lipschitz", 0.05))
    doc_out = {"model_hash": model.hash(), "kind": "ergodic-sweep", "lambda": est.lam,
               "lambda_budget": budget, "estimate": est.to_json(), "invariants": inv}
    orc = _oracle_ergodic(model, doc) if ("lambda_rel" in tol or "vhat_rel" in tol) else None
    if orc is not None:
        ov = orc(est.x_grid[:, 0])
        doc_out["oracle"] = {"lambda": orc.lam, "v_hat": ov}
    prefix = out.dir / "sweep"
    for p in est.write_csv(str(prefix), header=out.header):
        out.register(p)
    out.json("ergodic_sweep.json", doc_out)
    checks.add("cauchy", diag["cauchy_ok"], diag["cauchy_gaps"], diag["cauchy_tol"])
    checks.add("v_hat_origin", inv["v_hat_origin_zero"])
    checks.add("lipschitz", inv["lipschitz_ok"], inv["lipschitz_constant"], inv["lipschitz_bound"])
    checks.add("lambda_bounded", inv["lam_bounded"], est.lam, model.M_ell)
    if orc is not None and "lambda_rel" in tol:
        rel = abs(est.lam - orc.lam) / abs(orc.lam)
        checks.add("lambda_vs_oracle", rel <= tol["lambda_rel"], rel, tol["lambda_rel"])
    if orc is not None and "vhat_rel" in tol:
        rel = float(np.max(np.abs(est.v_hat - ov)) / max(np.max(np.abs(ov)), 1e-12))
        checks.add("vhat_vs_oracle", rel <= tol["vhat_rel"], rel, tol["vhat_rel"])


def run_long_time(model, doc, out, checks, workers):
    cfg = _cfg(doc, workers)
    tol = doc.get("tolerances", {})
    phi = None
    if "terminal" in doc:
        # the terminal cost belongs to the experiment: audit it, keep the model hash
        t = doc["terminal"]
        audited = model.with_terminal(t["name"], t.get("params", []), t["C_phi"])
        a7 = validate_assumptions(audited)["A.7"]
        if not a7.passed:
            raise ManifestError(f"terminal cost violates the growth bound (margin {a7.margin:.3g})")
        phi = audited.cost.terminal
        checks.add("terminal_growth", a7.passed, a7.margin)
    x0 = np.asarray(doc["x0"], float)
    res = ergodic.long_time_sweep(model, x0, doc["ladders"]["T"], phi, cfg, seed=doc["seed"],
                                  rtol=tol.get("residual"), workers=workers)
    doc_out = {"model_hash": model.hash(), "kind": "long-time", "lambda": res.lam, "result": res.to_json()}
    out.csv("long_time_T.csv", ["T", "v_T_x0", "v_T_over_T", "residual"], res.t_ladder)
    r = [row[3] for row in res.t_ladder]
    growth = abs(r[-1]) - max(abs(v) for v in r[:-1])
    checks.add("residual_bounded", res.residual_bounded, growth, res.diagnostics["rtol"])
    if "lambda_rel" in tol:
        orc = _oracle_ergodic(model, doc)
        if orc is not None:
            rel = abs(res.lam - orc.lam) / abs(orc.lam)
            doc_out["oracle"] = {"lambda": orc.lam}
            checks.add("lambda_vs_oracle", rel <= tol["lambda_rel"], rel, tol["lambda_rel"])
    out.json("long_time.json", doc_out)


def run_oracle_compare(model, doc, out, checks, workers):
    if model.n_modes != 1 or model.m != 1:
        raise ManifestError("oracle-compare needs a one-mode model with one control mode")
    cfg = _cfg(doc, workers)
    tol = doc.get("tolerances", {})
    xg = _x_grid(doc["x_grid"])
    reach = float(np.abs(xg).max())
    if cfg.design_spread_x < reach:
        cfg = cfg.replace(design_spread_x=reach + 0.5)
    m1 = _oracle1d(model, doc)
    rows, worst = [], 0.0
    for beta in doc["ladders"]["beta"]:
        ref = oracle.hjb_discounted(m1, beta)(xg)
        sol = bsde.solve_constrained(model, np.zeros(1), np.zeros(1), beta, config=cfg, seed=doc["seed"])
        v = sol.value_at(xg[:, None])
        rel = np.abs(v - ref) / np.maximum(np.abs(ref), 1e-12)
        worst = max(worst, float(rel.max()))
        rows += [[beta, x, a, b, r] for x, a, b, r in zip(xg, v, ref, rel)]
    out.csv("oracle_compare.csv", ["beta", "x", "bsde", "oracle", "rel_err"], rows)
    out.json("oracle_compare.json", {"model_hash": model.hash(), "kind": "oracle-compare",
                                     "max_rel_err": worst, "rows": rows})
    if "value_rel" in tol:
        checks.add("value_vs_oracle", worst <= tol["value_rel"], worst, tol["value_rel"])


# ---------------------------------------------------------------- report

def _read_table(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], [[float(v) for v in r] for r in rows[1:]]


def build_report(record_paths, out_dir, tol=0.05):
    """Merge run records into plot tables and one summary JSON."""
    if not record_paths:
        raise ManifestError("report needs at least one run record")
    recs = []
    for p in record_paths:
        with open(p) as fh:
            recs.append((Path(p), json.load(fh)))
    hashes = {r["model_hash"] for _, r in recs}
    if len(hashes) != 1:
        raise ManifestError(f"records refer to different models: {sorted(hashes)}")
    seeds = sorted({r["seed"] for _, r in recs})
    joint = hashlib.sha256("".join(sorted(r["manifest_hash"] for _, r in recs)).encode()).hexdigest()
    out = Output(out_dir, joint, seeds[0] if len(seeds) == 1 else seeds)
    beta_rows, t_rows, vhat_rows, cmp_rows = [], [], [], []
    summary = {"model_hash": hashes.pop(), "records": [os.path.relpath(p, out_dir) for p, _ in recs]}
    for p, r in recs:
        kind = r["kind"]
        if kind == "ergodic-sweep":
            with open(p.parent / "ergodic_sweep.json") as fh:
                res = json.load(fh)
            est = res["estimate"]
            beta_rows += [[b, v, bv] for b, v, bv in est["beta_ladder"]]
            ov = res.get("oracle", {}).get("v_hat")
            for i, (x, v) in enumerate(zip(est["x_grid"], est["v_hat"])):
                vhat_rows.append([x[0], v, ov[i] if ov is not None else float("nan")])
            summary["lambda_vd"] = res["lambda"]
            summary["lambda_vd_budget"] = res["lambda_budget"]
            if "oracle" in res:
                summary["lambda_oracle"] = res["oracle"]["lambda"]
        elif kind == "long-time":
            with open(p.parent / "long_time.json") as fh:
                res = json.load(fh)
            t_rows += [[T, v, vt] for T, v, vt, _ in res["result"]["t_ladder"]]
            summary["lambda_lt"] = res["lambda"]
        elif kind == "oracle-compare":
            _, rows = _read_table(p.parent / "oracle_compare.csv")
            cmp_rows += rows
    out.csv("plot_beta_ladder.csv", ["beta", "v_beta_0", "beta_v_beta_0"], beta_rows)
    out.csv("plot_T_ladder.csv", ["T", "v_T_x0", "v_T_over_T"], t_rows)
    out.csv("plot_vhat.csv", ["x", "v_hat", "oracle_v_hat"], vhat_rows)
    if cmp_rows:
        out.csv("oracle_compare.csv", ["beta", "x", "bsde", "oracle", "rel_err"], cmp_rows)
    if "lambda_vd" in summary and "lambda_lt" in summary:
        gap = abs(summary["lambda_vd"] - summary["lambda_lt"])
        rel = gap / max(abs(summary["lambda_vd"]), 1e-12)
        summary["lambda_gap"] = gap
        summary["lambda_gap_rel"] = rel
        summary["lambda_consistent"] = bool(rel <= tol)
        summary["tolerance"] = tol
    out.json("summary.json", summary)
    return summary, out.files


# ---------------------------------------------------------------- driver

RUNNERS = {"validate": run_validate, "simulate": run_simulate, "bsde": run_bsde,
           "ergodic-sweep": run_ergodic_sweep, "long-time": run_long_time, "oracle-compare": run_oracle_compare}


def run(manifest_path, out_dir=None, workers=1, seed_override=None, expect_kind=None):
    """Execute a manifest; returns the RunRecord dict (also written as run_record.json)."""
    t_start = time.time()
    doc = load_manifest(manifest_path)
    if expect_kind is not None and doc["kind"] != expect_kind:
        raise ManifestError(f"manifest kind is '{doc['kind']}', command is '{expect_kind}'")
    mhash = manifest_hash(doc)
    if seed_override is not None:
        doc["seed"] = int(seed_override)
    base = Path(manifest_path).resolve().parent
    if out_dir is None and doc.get("output") is not None:
        out_dir = str(base / doc["output"])
    if out_dir is None:
        raise ManifestError("no output directory: set 'output' in the manifest or pass --out")
    timings = {}
    checks = Checks()
    if doc["kind"] == "report":
        paths = [str(base / p) if not os.path.isabs(p) else p for p in doc["inputs"]]
        tol = doc.get("tolerances", {}).get("lambda_rel", 0.05)
        summary, files = build_report(paths, out_dir, tol)
        if "lambda_consistent" in summary:
            checks.add("lambda_vd_vs_lt", summary["lambda_consistent"], summary["lambda_gap_rel"], tol)
        model_hash = summary["model_hash"]
    else:
        t0 = time.time()
        model = resolve_model(doc["model"], base)
        timings["model"] = time.time() - t0
        if doc["kind"] != "validate":
            rep = validate_assumptions(model)
            if not rep.passed:
                raise ManifestError("model fails validation: " + ", ".join(c.name for c in rep.failures()))
        out = Output(out_dir, mhash, doc["seed"])
        t0 = time.time()
        RUNNERS[doc["kind"]](model, doc, out, checks, workers)
        timings[doc["kind"]] = time.time() - t0
        files = out.files
        model_hash = model.hash()
    record = {
        "manifest": str(manifest_path), "manifest_hash": mhash, "kind": doc["kind"], "version": __version__,
        "seed": doc["seed"], "seed_override": seed_override, "workers": workers, "model_hash": model_hash,
        "wall_clock": time.time() - t_start, "timings": timings, "results": files,
        "checks": bsde._jsonable(checks.items), "passed": checks.passed, "failing": checks.failing(),
    }
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(out_dir) / "run_record.json", "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return record


def _parser():
    p = argparse.ArgumentParser(prog="escl", description="Ergodic control numerical laboratory")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run",) + KINDS[:-1]:
        s = sub.add_parser(name, help=f"execute a {name} manifest" if name != "run" else "execute any manifest")
        s.add_argument("--manifest", required=True)
        s.add_argument("--out", default=None)
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--seed-override", type=int, default=None)
    s = sub.add_parser("report", help="merge run records")
    s.add_argument("records", nargs="*")
    s.add_argument("--manifest", default=None)
    s.add_argument("--out", default=None)
    s.add_argument("--tol", type=float, default=0.05)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--seed-override", type=int, default=None)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "report" and args.manifest is None:
            if not args.records or args.out is None:
                raise ManifestError("report needs record paths and --out")
            summary, _ = build_report(args.records, args.out, args.tol)
            print(json.dumps(bsde._jsonable(summary), indent=1, sort_keys=True))
            return 2 if summary.get("lambda_consistent") is False else 0
        if args.workers < 1:
            raise ManifestError("--workers must be >= 1")
        kind = None if args.command == "run" else args.command
        rec = run(args.manifest, args.out, args.workers, args.seed_override, kind)
    except (ManifestError, bsde.BsdeError, oracle.OracleError, ergodic.ErgodicError, ValueError,
            OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    for name, c in rec["checks"].items():
        print(f"{'PASS' if c['passed'] else 'FAIL'} {name} value={c['value']} tol={c['tol']}")
    if not rec["passed"]:
        print(f"failing checks: {', '.join(rec['failing'])}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
