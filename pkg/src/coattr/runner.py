"""Experiment orchestration: seeded pipeline, run-directory layout, reports.

Run directory layout::

    manifest.json            config, code version, master seed, schema version
    instances/<P>_seed<S>_<b>.json
    policy_<P>_seed<S>.json
    duals.jsonl              raw LP and subgradient multipliers per instance
    attribution.csv          stage output of ``attribute``
    counterfactual.csv       stage output of ``counterfactual``
    cf_candidates.csv        every sampled candidate (shot log)
    pac.csv                  stage output of ``pac-subset``
    cells.csv                one row per (problem, seed, instance, step)
    stats.json               everything derived from cells.csv
    fig_agreement.csv        per-backend agreement bars with CI bounds
    report.md                rendered tables

Every random draw comes from a stream keyed by (master seed, seed, problem,
instance, step, purpose), so outputs do not depend on the worker count or
the order in which units are scheduled.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import attribution as attr
from . import counterfactual as cfm
from . import environments as env
from . import pac
from . import policy as pol
from . import rng as rngs
from . import stats
from .errors import ConfigError, SchemaError, UpstreamMissingError
from .instances import PROBLEMS, GeneratorConfig, Instance, generate
from .lp import AGGREGATIONS, aggregate_duals, build_lp, solve_with_duals

log = logging.getLogger(__name__)

SCHEMA_VERSION = "cells-v1"
OUTPUT_ROOT_ENV = "COATTR_OUTPUT_ROOT"
DEFAULT_SIZES = {"CVRPTW": {"n": 10}, "OP": {"n": 8}, "FJSP": {"jobs": 3, "machines": 2}}
NORM_COMBOS = [(n, dn) for n in cfm.NORMS for dn in (False, True)]

KEY_COLS = ["schema_version", "problem", "seed", "instance", "step", "action", "n_feasible", "margin"]
ATTR_COLS = (["mass"] + [f"lambda_lp_{a}" for a in AGGREGATIONS] + ["lambda_subgrad"]
             + [f"top1_lp_{a}" for a in AGGREGATIONS]
             + ["top1_lp", "top1_subgrad", "top1_proxy", "Lambda_lp", "Lambda_subgrad", "Lambda_proxy",
                "node_order"])
CF_COLS = (["cf_status", "cf_key", "cf_shot", "cf_l1", "cf_action", "cf_verdict", "cf_family"]
           + [f"cf_family_{n}_{'dn' if dn else 'raw'}" for n, dn in NORM_COMBOS]
           + ["cf_zeta", "bl_candidates", "bl_flipping", "bl_flipping_arith_pass"])
PAC_COLS = ["pac_k", "pac_rates", "pac_samples", "pac_k_pertest", "pac_control_k"]
CELL_COLS = KEY_COLS + ATTR_COLS + CF_COLS + PAC_COLS
CANDIDATE_COLS = ["problem", "seed", "instance", "step", "shot", "key", "l1", "flipped", "arith", "kept",
                  "action"]
STAGES = {"attribute": ("attribution.csv", ATTR_COLS), "counterfactual": ("counterfactual.csv", CF_COLS),
          "pac-subset": ("pac.csv", PAC_COLS)}


@dataclass
class RunConfig:
    problems: list = field(default_factory=lambda: list(PROBLEMS))
    sizes: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_SIZES)))
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    B: int = 16
    T: int = 8
    master_seed: int = 0
    backends: list = field(default_factory=lambda: ["lp", "subgrad", "proxy"])
    aggregation: str = "mean"
    train_episodes: int = 1000
    # counterfactual search
    shots: int = 128
    rho: float = 3.0
    cf_sigma_scale: float = 1.0
    norm: str = "l1"
    dim_normalize: bool = True
    time_limit: float = 0.5
    # PAC subsets
    eps: float = 0.2
    delta: float = 0.2
    sigma: float = 0.05
    kmax: int = 25
    bonferroni: bool = True
    pac_baseline: str = "nominal"
    control_sigma: float = 1e-6
    # stats
    resamples: int = 10_000
    subgrad_iterations: int = 200
    workers: int = 1
    output: str | None = None

    def validate(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.B < 1 or self.T < 1:
            raise ConfigError("B and T must be >= 1")
        for p in self.problems:
            if p not in PROBLEMS:
                raise ConfigError(f"unknown problem {p!r}")
        for b in self.backends:
            if b not in attr.BACKENDS:
                raise ConfigError(f"unknown backend {b!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.rho <= 0 or self.cf_sigma_scale <= 0:
            raise ConfigError("rho and the counterfactual sigma scale must be positive")
        if self.resamples < 1 or self.subgrad_iterations < 1:
            raise ConfigError("resamples and subgrad_iterations must be >= 1")
        for p in self.problems:
            self.generator(p, 0).validate()
        self.cf_config(self.problems[0]).validate()
        self.pac_config().validate()
        return self

    # ---- derived configs ----
    def generator(self, problem, seed):
        return GeneratorConfig(problem=problem, seed=seed, **self.sizes.get(problem, {}))

    def cf_config(self, problem):
        return cfm.default_cf_config(problem, shots=self.shots, sigma_scale=self.cf_sigma_scale,
                                     rho_factor=self.rho, time_limit=self.time_limit, norm=self.norm,
                                     dim_normalize=self.dim_normalize)

    def pac_config(self, sigma=None, bonferroni=None):
        return pac.PacConfig(eps=self.eps, delta=self.delta, sigma=self.sigma if sigma is None else sigma,
                             k_max=self.kmax, bonferroni=self.bonferroni if bonferroni is None else bonferroni,
                             baseline=self.pac_baseline)

    # ---- serialisation ----
    def to_dict(self):
        d = asdict(self)
        d.pop("output")
        d.pop("workers")  # never affects results
        return d

    @classmethod
    def from_dict(cls, d):
        if "config" in d and isinstance(d["config"], dict):  # a manifest
            d = d["config"]
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise UpstreamMissingError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None


def output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _pid(problem):
    return PROBLEMS.index(problem)


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---- per-unit computations (run inside workers) ------------------------------------------

def instance_seed(cfg, problem, seed, b):
    return rngs.derive_seed(cfg.master_seed, seed, _pid(problem), rngs.GENERATE, b)


def make_instance(cfg, problem, seed, b):
    return generate(cfg.generator(problem, instance_seed(cfg, problem, seed, b)))


def train_unit(cfg, problem, seed):
    params = pol.init_params(problem, rngs.derive_seed(cfg.master_seed, seed, _pid(problem), rngs.INIT))
    gen = cfg.generator(problem, 0)
    return pol.train_reinforce(params, gen, cfg.train_episodes,
                               rngs.derive_seed(cfg.master_seed, seed, _pid(problem), rngs.TRAIN))


def trajectory(params, instance, T):
    """Greedy states at steps 0..T-1 (fewer if the episode ends)."""
    states, st = [], env.initial_state(instance)
    while not st.terminal and len(states) < T:
        states.append(st)
        st = env.transition(st, pol.greedy_action(params, st))
    return states


def instance_duals(cfg, instance):
    lp = build_lp(instance)
    sol = solve_with_duals(lp)
    _, sg_raw = attr.subgrad_lambda(instance, cfg.subgrad_iterations, lp=lp)
    return {"tags": list(lp.tags), "lp_raw": [float(x) for x in sol.duals],
            "subgrad_raw": [float(x) for x in sg_raw], "lp_objective": float(sol.objective)}


def family_lambdas(instance, raw, tags, aggregation):
    by_tag = aggregate_duals(raw, tags, aggregation, [f.lp_row_tag for f in instance.families])
    return {f.name: by_tag[f.lp_row_tag] for f in instance.families}


def _attr_columns(cfg, params, instance, state, action, duals):
    grads = pol.grad_log_prob(params, state, action)
    out = {}
    lam = {a: family_lambdas(instance, duals["lp_raw"], duals["tags"], a) for a in AGGREGATIONS}
    lam_sg = family_lambdas(instance, duals["subgrad_raw"], duals["tags"], "mean")
    results = {}
    for a in AGGREGATIONS:
        results[f"lp_{a}"] = attr.attribute(instance, grads, lam[a], "lp")
    results["subgrad"] = attr.attribute(instance, grads, lam_sg, "subgrad")
    results["proxy"] = attr.attribute(instance, grads, {}, "proxy")
    out["mass"] = _dumps(results["proxy"].masses)
    for a in AGGREGATIONS:
        out[f"lambda_lp_{a}"] = _dumps(lam[a])
        out[f"top1_lp_{a}"] = results[f"lp_{a}"].top1
    out["lambda_subgrad"] = _dumps(lam_sg)
    lp_res = results[f"lp_{cfg.aggregation}"]
    for name, res in (("lp", lp_res), ("subgrad", results["subgrad"]), ("proxy", results["proxy"])):
        out[f"top1_{name}"] = res.top1
        out[f"Lambda_{name}"] = _dumps(res.scores)
    out["node_order"] = " ".join(map(str, pac.node_ordering(lp_res.node_scores)))
    return out


def _cf_columns(cfg, params, instance, state, key):
    cf, bl, shots = cfm.explore_cell(params, instance, state, cfg.cf_config(instance.problem),
                                     rngs.stream(*key, rngs.COUNTERFACTUAL))
    out = {"cf_status": cf.status, "cf_key": cf.key or "", "cf_shot": "" if cf.shot is None else cf.shot,
           "cf_l1": "" if cf.shot is None else repr(cf.l1),
           "cf_action": "" if cf.flipped_action is None else cf.flipped_action,
           "cf_verdict": cf.verdict or "", "cf_family": cf.family or "",
           "cf_zeta": _dumps({k: [float(x) for x in np.ravel(z)] for k, z in cf.zeta.items()}),
           "bl_candidates": bl.candidates, "bl_flipping": bl.flipping,
           "bl_flipping_arith_pass": bl.flipping_arith_pass}
    sweep = cfm.adjudication_sweep(cf, instance) if cf.certified else {}
    for n, dn in NORM_COMBOS:
        out[f"cf_family_{n}_{'dn' if dn else 'raw'}"] = sweep.get((n, dn), "")
    cands = [{"shot": c.shot, "key": c.key, "l1": repr(c.l1), "flipped": int(c.flipped),
              "arith": int(c.arith), "kept": int(c.kept), "action": "" if c.action is None else c.action}
             for c in shots]
    return out, cands


def _pac_columns(cfg, params, instance, state, key, order):
    order = tuple(int(x) for x in order.split())
    res = pac.greedy_subset(params, instance, state, order, cfg.pac_config(), rngs.stream(*key, rngs.PAC))
    per_test = pac.greedy_subset(params, instance, state, order, cfg.pac_config(bonferroni=False),
                                 rngs.stream(*key, rngs.PAC))
    control = pac.greedy_subset(params, instance, state, order, cfg.pac_config(sigma=cfg.control_sigma),
                                rngs.stream(*key, rngs.PAC))
    fmt = lambda r: r.accepted_k if r.succeeded else ""  # noqa: E731
    return {"pac_k": fmt(res), "pac_rates": _dumps(list(res.rates)), "pac_samples": res.samples,
            "pac_k_pertest": fmt(per_test), "pac_control_k": fmt(control)}


def cell_unit(cfg, problem, seed, b, params, stages, orders=None):
    """Rows (and candidate-log rows) for every step of one instance."""
    instance = make_instance(cfg, problem, seed, b)
    duals = instance_duals(cfg, instance) if "attribute" in stages else None
    rows, cands = [], []
    for state in trajectory(params, instance, cfg.T):
        dist = pol.forward(params, state)
        row = {"schema_version": SCHEMA_VERSION, "problem": problem, "seed": seed, "instance": b,
               "step": state.t, "action": dist.argmax, "n_feasible": int(state.mask.sum()),
               "margin": repr(float(dist.margin))}
        key = (cfg.master_seed, seed, _pid(problem), b, state.t)
        if "attribute" in stages:
            row.update(_attr_columns(cfg, params, instance, state, dist.argmax, duals))
        if "counterfactual" in stages:
            cols, cand = _cf_columns(cfg, params, instance, state, key)
            row.update(cols)
            head = {"problem": problem, "seed": seed, "instance": b, "step": state.t}
            cands.extend({**head, **c} for c in cand)
        if "pac-subset" in stages:
            order = row.get("node_order") or orders[(problem, seed, b, state.t)]
            row.update(_pac_columns(cfg, params, instance, state, key, order))
        rows.append(row)
    dual_doc = None if duals is None else {"problem": problem, "seed": seed, "instance": b, **duals}
    return rows, cands, dual_doc


def _call(args):
    fn, *rest = args
    return fn(*rest)


def pool_map(fn, arglist, workers):
    """Ordered map; results are identical for any worker count."""
    jobs = [(fn, *a) for a in arglist]
    if workers <= 1 or len(jobs) <= 1:
        return [_call(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_call, jobs))


# ---- file I/O ----------------------------------------------------------------------------

def write_csv(path, columns, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    Path(path).write_text(buf.getvalue())


def read_csv(path):
    path = Path(path)
    if not path.exists():
        raise UpstreamMissingError(f"expected file {path} is missing")
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _sort_key(r):
    return (PROBLEMS.index(r["problem"]), int(r["seed"]), int(r["instance"]), int(r["step"]))


def instance_path(run_dir, problem, seed, b):
    return Path(run_dir) / "instances" / f"{problem}_seed{seed}_{b}.json"


def policy_path(run_dir, problem, seed):
    return Path(run_dir) / f"policy_{problem}_seed{seed}.json"


def load_manifest(run_dir):
    path = Path(run_dir) / "manifest.json"
    if not path.exists():
        raise UpstreamMissingError(f"expected file {path} is missing (run `generate` first)")
    doc = json.loads(path.read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path} has schema {doc.get('schema_version')!r}, expected {SCHEMA_VERSION!r}")
    return doc, RunConfig.from_dict(doc)


def write_manifest(run_dir, cfg):
    doc = {"schema_version": SCHEMA_VERSION, "code_version": __version__, "master_seed": cfg.master_seed,
           "config": cfg.to_dict()}
    (Path(run_dir) / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_policy(run_dir, problem, seed):
    path = policy_path(run_dir, problem, seed)
    if not path.exists():
        raise UpstreamMissingError(f"expected policy checkpoint {path} is missing (run `train` first)")
    return pol.PolicyParams.from_json(path.read_text())


def _units(cfg):
    return [(p, s, b) for p in cfg.problems for s in cfg.seeds for b in range(cfg.B)]


# ---- stages ----------------------------------------------------------------------------------

def stage_generate(cfg, run_dir):
    run_dir = Path(run_dir)
    (run_dir / "instances").mkdir(parents=True, exist_ok=True)
    write_manifest(run_dir, cfg)
    for p, s, b in _units(cfg):
        instance_path(run_dir, p, s, b).write_text(make_instance(cfg, p, s, b).to_json() + "\n")


def _check_instances(run_dir, cfg):
    for p, s, b in _units(cfg):
        path = instance_path(run_dir, p, s, b)
        if not path.exists():
            raise UpstreamMissingError(f"expected instance file {path} is missing (run `generate` first)")
        if Instance.from_json(path.read_text()).to_json() != make_instance(cfg, p, s, b).to_json():
            raise SchemaError(f"{path} does not match the manifest's generator settings")


def stage_train(cfg, run_dir):
    load_manifest(run_dir)
    pairs = [(p, s) for p in cfg.problems for s in cfg.seeds]
    trained = pool_map(train_unit, [(cfg, p, s) for p, s in pairs], cfg.workers)
    for (p, s), params in zip(pairs, trained):
        policy_path(run_dir, p, s).write_text(params.to_json() + "\n")


def run_cells(cfg, run_dir, stages):
    """Compute the requested stage columns for every cell; returns rows, candidates, duals."""
    _check_instances(run_dir, cfg)
    policies = {(p, s): load_policy(run_dir, p, s) for p in cfg.problems for s in cfg.seeds}
    orders = None
    if "pac-subset" in stages and "attribute" not in stages:
        orders = {(r["problem"], int(r["seed"]), int(r["instance"]), int(r["step"])): r["node_order"]
                  for r in read_csv(Path(run_dir) / STAGES["attribute"][0])}
    args = [(cfg, p, s, b, policies[(p, s)], tuple(stages), orders) for p, s, b in _units(cfg)]
    results = pool_map(cell_unit, args, cfg.workers)
    rows = sorted((r for res in results for r in res[0]), key=_sort_key)
    cands = [c for res in results for c in res[1]]
    duals = [res[2] for res in results if res[2] is not None]
    return rows, cands, duals


def stage_cells(cfg, run_dir, stage):
    run_dir = Path(run_dir)
    rows, cands, duals = run_cells(cfg, run_dir, [stage])
    name, cols = STAGES[stage]
    write_csv(run_dir / name, KEY_COLS + cols, rows)
    if stage == "counterfactual":
        write_csv(run_dir / "cf_candidates.csv", CANDIDATE_COLS, cands)
    if stage == "attribute":
        _write_duals(run_dir, duals)


def _write_duals(run_dir, duals):
    text = "".join(json.dumps(d, sort_keys=True) + "\n" for d in duals)
    (Path(run_dir) / "duals.jsonl").write_text(text)


def merge_stage_files(run_dir):
    """Join the three stage CSVs into cells.csv."""
    run_dir = Path(run_dir)
    tables = [read_csv(run_dir / STAGES[s][0]) for s in ("attribute", "counterfactual", "pac-subset")]
    keyed = [{tuple(r[c] for c in KEY_COLS): r for r in t} for t in tables]
    if not (keyed[0].keys() == keyed[1].keys() == keyed[2].keys()):
        raise SchemaError("stage files cover different cells; rerun the stages from one manifest")
    rows = [{**keyed[0][k], **keyed[1][k], **keyed[2][k]} for k in keyed[0]]
    rows.sort(key=_sort_key)
    write_csv(run_dir / "cells.csv", CELL_COLS, rows)
    return rows


# ---- statistics from cells.csv alone ------------------------------------------------------

def load_cells(run_dirs):
    rows = []
    for d in run_dirs:
        path = Path(d) / "cells.csv"
        if not path.exists() and all((Path(d) / STAGES[s][0]).exists() for s in STAGES):
            merge_stage_files(d)
        table = read_csv(path)
        for r in table:
            if r.get("schema_version") != SCHEMA_VERSION:
                raise SchemaError(f"{path} has schema {r.get('schema_version')!r}, expected {SCHEMA_VERSION!r}")
        rows.extend(table)
    return rows


def _median(xs):
    return float(np.median(xs)) if xs else None


def problem_stats(rows, backends, resamples=10_000, seed=0):
    problem = rows[0]["problem"] if rows else None
    records = [{"seed": int(r["seed"]), "cf_status": r["cf_status"], "cf_family": r["cf_family"],
                **{f"top1_{b}": r[f"top1_{b}"] for b in backends},
                **{f"top1_lp_{a}": r[f"top1_lp_{a}"] for a in AGGREGATIONS}} for r in rows]
    out = stats.summarize(records, backends, problem, resamples, seed)
    cert = [r for r in rows if r["cf_status"] == "certified"]
    out["cf_coverage"] = {s: sum(r["cf_status"] == s for r in rows)
                          for s in (cfm.CERTIFIED, cfm.ARITH_ONLY, cfm.NONE)}
    flipping = sum(int(r["bl_flipping"]) for r in rows)
    passing = sum(int(r["bl_flipping_arith_pass"]) for r in rows)
    out["unconstrained_baseline"] = {"flipping": flipping, "flipping_arith_pass": passing,
                                     "pass_rate": passing / flipping if flipping else None}
    if cert:
        out["aggregation_ablation"] = {a: float(np.mean([r[f"top1_lp_{a}"] == r["cf_family"] for r in cert]))
                                       for a in AGGREGATIONS}
        default = [r["cf_family"] for r in cert]
        out["norm_sweep"] = {f"{n}_{'dn' if dn else 'raw'}": {
            "same_as_default": float(np.mean([r[f"cf_family_{n}_{'dn' if dn else 'raw'}"] == f
                                              for r, f in zip(cert, default)])),
            **{b: float(np.mean([r[f"top1_{b}"] == r[f"cf_family_{n}_{'dn' if dn else 'raw'}"] for r in cert]))
               for b in backends}} for n, dn in NORM_COMBOS}
    ks = [int(r["pac_k"]) for r in rows if r["pac_k"] != ""]
    margins_ok = [float(r["margin"]) for r in rows if r["pac_k"] != ""]
    margins_bad = [float(r["margin"]) for r in rows if r["pac_k"] == ""]
    out["pac"] = {
        "cells": len(rows), "succeeded": len(ks),
        "succeeded_per_test": sum(r["pac_k_pertest"] != "" for r in rows),
        "mean_size": float(np.mean(ks)) if ks else None, "median_size": _median(ks),
        "max_size": max(ks) if ks else None,
        "control_size_one": sum(r["pac_control_k"] == "1" for r in rows),
        "failed_median_margin": _median(margins_bad), "succeeded_median_margin": _median(margins_ok),
    }
    return out


def compute_stats(rows, backends, resamples=10_000, seed=0):
    by_problem = {}
    for r in rows:
        by_problem.setdefault(r["problem"], []).append(r)
    return {"schema_version": SCHEMA_VERSION, "std_convention": stats.STD_CONVENTION,
            "problems": {p: problem_stats(by_problem[p], backends, resamples, seed)
                         for p in sorted(by_problem, key=PROBLEMS.index)}}


def figure_rows(report, backends, resamples=10_000, seed=0, rows=None):
    """Per-problem, per-backend agreement with a bootstrap CI of the pooled mean."""
    out = []
    by_problem = {}
    for r in rows or []:
        if r["cf_status"] == "certified":
            by_problem.setdefault(r["problem"], []).append(r)
    for p, rep in report["problems"].items():
        for b in backends:
            if b not in rep["backends"]:
                continue
            hits = np.array([r[f"top1_{b}"] == r["cf_family"] for r in by_problem[p]], dtype=float)
            pooled, lo, hi = stats.paired_bootstrap_ci(np.stack([hits, np.zeros_like(hits)], axis=1),
                                                       resamples, seed)
            out.append({"problem": p, "backend": b, "mean": rep["backends"][b]["mean"],
                        "std": rep["backends"][b]["std"], "pooled": pooled, "ci_lo": lo, "ci_hi": hi,
                        "n_cert": rep["n_cert"]})
    return out


def adjudicate(run_dirs, out_dir=None, backends=("lp", "subgrad", "proxy"), resamples=10_000, seed=0):
    rows = load_cells(run_dirs)
    report = compute_stats(rows, list(backends), resamples, seed)
    out_dir = Path(out_dir or run_dirs[0])
    (out_dir / "stats.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    write_csv(out_dir / "fig_agreement.csv",
              ["problem", "backend", "mean", "std", "pooled", "ci_lo", "ci_hi", "n_cert"],
              figure_rows(report, backends, resamples, seed, rows))
    return report


def _fmt(x, digits=3):
    if x is None:
        return "-"
    if isinstance(x, float):
        return f"{x:.{digits}g}" if abs(x) < 1e-3 and x != 0 else f"{x:.{digits}f}"
    return str(x)


def render_report(report):
    lines = [f"# Agreement with the counterfactual signal (std: {report['std_convention']})", ""]
    if not report["problems"] or all(p["n_cert"] == 0 for p in report["problems"].values()):
        lines += ["| problem | n_cert |", "|---|---|", f"| (all) | 0 — {stats.EMPTY} |", ""]
    for name, p in report["problems"].items():
        lines.append(f"## {name}  (certified cells: {p['n_cert']} of {p['n_cells']})")
        lines.append("")
        if p["n_cert"] == 0:
            lines += [stats.EMPTY, ""]
            continue
        lines += ["| backend | mean | std |", "|---|---|---|"]
        lines += [f"| {b} | {_fmt(v['mean'])} | {_fmt(v['std'])} |" for b, v in p["backends"].items()]
        lines += ["", "| pair | diff | 95% CI | b01 | b10 | McNemar p |", "|---|---|---|---|---|---|"]
        lines += [f"| {k} | {_fmt(v['diff'])} | [{_fmt(v['ci_lo'])}, {_fmt(v['ci_hi'])}] | {v['b01']} | "
                  f"{v['b10']} | {_fmt(v['p'])} |" for k, v in p["pairs"].items()]
        pc = p["pac"]
        bl = p["unconstrained_baseline"]
        lines += ["", f"PAC subsets: {pc['succeeded']}/{pc['cells']} succeeded "
                  f"(per-test budget: {pc['succeeded_per_test']}), mean |S*| {_fmt(pc['mean_size'])}, "
                  f"median {_fmt(pc['median_size'])}, max {_fmt(pc['max_size'])}.",
                  f"Unconstrained baseline arithmetic pass rate on flipping candidates: "
                  f"{_fmt(bl['pass_rate'])} ({bl['flipping_arith_pass']}/{bl['flipping']}).", ""]
    return "\n".join(lines)


def run(cfg: RunConfig, run_dir=None):
    """Full pipeline; returns the run directory."""
    cfg.validate()
    run_dir = Path(run_dir or cfg.output or output_root() / "run")
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create run directory {run_dir}: {exc}") from None
    if not os.access(run_dir, os.W_OK):
        raise ConfigError(f"run directory {run_dir} is not writable")
    stage_generate(cfg, run_dir)
    stage_train(cfg, run_dir)
    rows, cands, duals = run_cells(cfg, run_dir, list(STAGES))
    write_csv(run_dir / "cells.csv", CELL_COLS, rows)
    write_csv(run_dir / "cf_candidates.csv", CANDIDATE_COLS, cands)
    _write_duals(run_dir, duals)
    report = adjudicate([run_dir], run_dir, cfg.backends, cfg.resamples)
    (run_dir / "report.md").write_text(render_report(report) + "\n")
    return run_dir


__all__ = ["RunConfig", "SCHEMA_VERSION", "CELL_COLS", "run", "adjudicate", "render_report", "load_cells",
           "compute_stats", "stage_generate", "stage_train", "stage_cells", "merge_stage_files"]
