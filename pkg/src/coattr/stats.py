"""Paired statistics over per-cell agreement indicators."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations
from math import comb

import numpy as np

STD_CONVENTION = "population (divide by number of seeds)"
EMPTY = "no certified cells"


@dataclass(frozen=True)
class PairedOutcome:
    """Discordance table for two backends against the reference signal.

    ``b01`` counts cells where only backend A is wrong, ``b10`` cells where
    only backend B is wrong.
    """
    b01: int
    b10: int
    both_right: int
    both_wrong: int

    @property
    def n(self):
        return self.b01 + self.b10 + self.both_right + self.both_wrong

    @classmethod
    def from_indicators(cls, a, b):
        a = np.asarray(a, dtype=bool)
        b = np.asarray(b, dtype=bool)
        if a.shape != b.shape:
            raise ValueError("indicator vectors must have equal length")
        return cls(int(np.sum(~a & b)), int(np.sum(a & ~b)), int(np.sum(a & b)), int(np.sum(~a & ~b)))


def mcnemar_exact(b01: int, b10: int) -> float:
    """Two-sided exact binomial McNemar test, computed in exact rational arithmetic."""
    if b01 < 0 or b10 < 0:
        raise ValueError("discordant counts must be non-negative")
    n = b01 + b10
    if n == 0:
        return 1.0
    tail = Fraction(sum(comb(n, i) for i in range(min(b01, b10) + 1)), 2**n)
    return float(min(Fraction(1), 2 * tail))


def paired_bootstrap_ci(pairs, resamples=10_000, seed=0, level=0.95):
    """Percentile CI of mean(A) - mean(B) over cells resampled with replacement.

    The interval is widened, if necessary, to include the point estimate so
    that percentile rounding on tiny samples cannot exclude it.
    """
    pairs = np.asarray(pairs, dtype=float)
    if pairs.ndim != 2 or pairs.shape[1] != 2 or pairs.shape[0] < 1:
        raise ValueError("need at least one (a, b) pair")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    d = pairs[:, 0] - pairs[:, 1]
    diff = float(d.mean())
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, d.size, size=(resamples, d.size))
    means = d[idx].mean(axis=1)
    alpha = (1 - level) / 2
    lo, hi = np.quantile(means, [alpha, 1 - alpha])
    return diff, float(min(lo, diff)), float(max(hi, diff))


def seed_mean_std(values_by_seed):
    vals = np.asarray(list(values_by_seed), dtype=float)
    return float(vals.mean()), float(vals.std(ddof=0))


def summarize(records, backends, problem=None, resamples=10_000, seed=0):
    """Agreement report over certified cells.

    ``records`` are mappings with at least ``seed``, ``cf_status``,
    ``cf_family`` and ``top1_<backend>`` for every backend. Pairs follow the
    order of ``backends``; ``b01`` counts cells where only the first is wrong.
    """
    cert = [r for r in records if r["cf_status"] == "certified"]
    report = {"problem": problem, "std_convention": STD_CONVENTION, "n_cert": len(cert),
              "n_cells": len(records)}
    if not cert:
        report["empty"] = EMPTY
        report["backends"] = {}
        report["pairs"] = {}
        return report
    seeds = sorted({r["seed"] for r in cert})
    hits = {b: np.array([r[f"top1_{b}"] == r["cf_family"] for r in cert]) for b in backends}
    seed_of = np.array([r["seed"] for r in cert])
    report["backends"] = {}
    for b in backends:
        per_seed = [float(hits[b][seed_of == s].mean()) for s in seeds]
        mean, std = seed_mean_std(per_seed)
        report["backends"][b] = {"mean": mean, "std": std, "pooled": float(hits[b].mean()),
                                 "per_seed": dict(zip(map(str, seeds), per_seed))}
    report["pairs"] = {}
    for a, b in combinations(backends, 2):
        po = PairedOutcome.from_indicators(hits[a], hits[b])
        diff, lo, hi = paired_bootstrap_ci(np.stack([hits[a], hits[b]], axis=1), resamples, seed)
        report["pairs"][f"{a}_vs_{b}"] = {"diff": diff, "ci_lo": lo, "ci_hi": hi, "b01": po.b01,
                                         "b10": po.b10, "p": mcnemar_exact(po.b01, po.b10)}
    return report
