"""Constraint-family attribution weighted by per-family multipliers.

For a decision with input gradient ``g`` and features ``x`` the score of
family k is ``lambda_k * sum_{entries of its tensors} |g * x|``. The three
backends differ only in where ``lambda`` comes from: LP duals (``lp``),
Lagrangian subgradient ascent (``subgrad``) or all ones (``proxy``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SchemaError
from .instances import GLOBAL
from .lp import UNTAGGED, aggregate_duals, build_lp

BACKENDS = ("lp", "subgrad", "proxy")


@dataclass(frozen=True)
class AttributionResult:
    backend: str
    scores: dict
    top1: str
    node_scores: np.ndarray
    lambdas: dict
    masses: dict


def top_family(scores):
    return min(scores, key=lambda name: (-scores[name], name))


def family_masses(instance, grads):
    """Unweighted sum of |grad * x| per family."""
    contrib = {k: np.abs(grads[k] * instance[k]) for k in grads}
    out = {}
    for fam in instance.families:
        missing = [k for k in fam.feature_keys if k not in instance.tensors]
        if missing:
            raise SchemaError(f"family {fam.name!r} references missing tensors {missing}")
        out[fam.name] = float(sum(contrib[k].sum() for k in fam.feature_keys if k in contrib))
    return out


def node_scores(instance, grads):
    """Family-agnostic |grad * x| summed over each node's entries (global entries skipped)."""
    scores = np.zeros(instance.N)
    for k, g in grads.items():
        t = instance.tensors[k]
        c = np.abs(g * t.values)
        idx = t.node_index
        np.add.at(scores, idx[idx != GLOBAL], c[idx != GLOBAL])
    return scores


def attribute(instance, grads, lambdas, backend="lp"):
    if backend not in BACKENDS:
        raise ConfigError(f"unknown backend {backend!r}")
    missing = set(instance.tensors) - set(grads)
    if missing:
        raise SchemaError(f"gradients missing for {sorted(missing)}")
    masses = family_masses(instance, grads)
    if backend == "proxy":
        lambdas = {name: 1.0 for name in masses}
    absent = set(masses) - set(lambdas)
    if absent:
        raise SchemaError(f"no multiplier for families {sorted(absent)}")
    scores = {name: float(lambdas[name]) * masses[name] for name in masses}
    return AttributionResult(backend, scores, top_family(scores), node_scores(instance, grads),
                             dict(lambdas), masses)


def agreement(attribution_top1, cf_top1, certified=None, seeds=None):
    """Mean of [attribution top1 == CF family] over certified cells, plus per-seed means."""
    a, c = list(attribution_top1), list(cf_top1)
    if len(a) != len(c):
        raise ValueError("signals must cover the same cells")
    cert = [True] * len(a) if certified is None else list(certified)
    seeds = [0] * len(a) if seeds is None else list(seeds)
    hits = [(s, x == y) for x, y, ok, s in zip(a, c, cert, seeds) if ok]
    if not hits:
        raise ValueError("agreement is undefined on an empty certified set")
    per_seed = {}
    for s, h in hits:
        per_seed.setdefault(s, []).append(h)
    return float(np.mean([h for _, h in hits])), {s: float(np.mean(v)) for s, v in sorted(per_seed.items())}


# ---- subgradient backend ---------------------------------------------------------------

def _min_form(lp):
    c = -lp.c if lp.maximize else lp.c
    return c, lp.A, np.asarray(lp.b), lp.senses


def lagrangian_ascent(lp, iterations=200, step=1.0, init=None):
    """Dualise every row of ``lp`` and ascend the multipliers with step ``step / t``.

    The inner problem is the box-constrained Lagrangian, minimised by putting
    each variable at the bound its reduced cost prefers. Multipliers use the
    min-form sign convention (>= rows non-negative, <= rows non-positive).
    Returns the last iterate.
    """
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    if not (np.all(np.isfinite(lp.lb)) and np.all(np.isfinite(lp.ub))):
        raise ConfigError("subgradient backend needs finite variable bounds")
    c, A, b, senses = _min_form(lp)
    sense = np.array([{"<=": -1, ">=": 1, "=": 0}[s] for s in senses])
    y = np.zeros(len(b)) if init is None else np.array(init, dtype=float)
    for t in range(1, iterations + 1):
        red = c - A.T @ y
        x = np.where(red > 0, lp.lb, np.where(red < 0, lp.ub, lp.lb))
        g = b - A @ x
        y = y + (step / t) * g
        y = np.where(sense > 0, np.maximum(y, 0), np.where(sense < 0, np.minimum(y, 0), y))
    return y


def subgrad_lambda(instance, iterations=200, step=1.0, aggregation="mean", lp=None):
    lp = build_lp(instance) if lp is None else lp
    y = lagrangian_ascent(lp, iterations, step)
    tags = [f.lp_row_tag for f in instance.families]
    by_tag = aggregate_duals(y, lp.tags, aggregation, tags)
    return {f.name: by_tag[f.lp_row_tag] for f in instance.families}, y


__all__ = ["BACKENDS", "AttributionResult", "attribute", "agreement", "family_masses", "node_scores",
           "lagrangian_ascent", "subgrad_lambda", "top_family", "UNTAGGED"]
