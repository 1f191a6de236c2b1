"""Greedy PAC-sufficient node subsets along an attribution ordering."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import policy as pol
from .errors import ConfigError
from .instances import GLOBAL, generator_mean

BASELINES = ("nominal", "mean", "zero")


def sample_size(eps, delta, k_max=1, bonferroni=True) -> int:
    """Hoeffding sample size per test; Bonferroni splits delta over k_max tests."""
    if not (0 < eps < 1 and 0 < delta < 1):
        raise ConfigError("eps and delta must lie in (0, 1)")
    if bonferroni and k_max < 1:
        raise ConfigError("k_max must be >= 1")
    tests = k_max if bonferroni else 1
    return math.ceil(math.log(2 * tests / delta) / (2 * eps * eps))


@dataclass(frozen=True)
class PacConfig:
    eps: float = 0.2
    delta: float = 0.2
    sigma: float = 0.05
    k_max: int = 25
    bonferroni: bool = True
    baseline: str = "nominal"

    def validate(self):
        if not (0 < self.eps < 1 and 0 < self.delta < 1):
            raise ConfigError("eps and delta must lie in (0, 1)")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if self.k_max < 1:
            raise ConfigError("k_max must be >= 1")
        if self.baseline not in BASELINES:
            raise ConfigError(f"unknown baseline {self.baseline!r}")
        return self

    @property
    def samples(self):
        return sample_size(self.eps, self.delta, self.k_max, self.bonferroni)


@dataclass(frozen=True)
class PacSubsetResult:
    ordering: tuple
    accepted_k: int | None
    rates: tuple
    samples: int
    margin: float

    @property
    def succeeded(self):
        return self.accepted_k is not None

    @property
    def subset(self):
        return self.ordering[: self.accepted_k] if self.succeeded else ()


def node_ordering(node_scores):
    """Nodes by decreasing score; ties by node index."""
    scores = np.asarray(node_scores)
    return tuple(int(i) for i in sorted(range(scores.size), key=lambda i: (-scores[i], i)))


def baseline_values(instance, mode):
    if mode == "nominal":
        return instance.features()
    if mode == "zero":
        return {k: np.zeros_like(v) for k, v in instance.features().items()}
    return generator_mean(instance)


def perturbation_draws(instance, sigma, samples, rng):
    """``samples`` Gaussian copies of the features, drawn sample-major so a
    shorter run reuses the prefix of a longer one."""
    keys = list(instance.tensors)
    sizes = [instance.tensors[k].size for k in keys]
    z = rng.standard_normal((samples, sum(sizes))) * sigma
    out, start = {}, 0
    for k, size in zip(keys, sizes):
        x = instance[k]
        out[k] = x + z[:, start:start + size].reshape((samples,) + x.shape)
        start += size
    return out


def masked(instance, draws, subset, baseline):
    """Keep drawn entries at nodes in ``subset`` (and global entries); reset others to baseline."""
    keep = set(int(s) for s in subset)
    out = {}
    for k, t in instance.tensors.items():
        node_keep = np.isin(t.node_index, list(keep)) | (t.node_index == GLOBAL)
        out[k] = np.where(node_keep, draws[k], baseline[k])
    return out


def greedy_subset(params, instance, state, ordering, config: PacConfig, rng) -> PacSubsetResult:
    config.validate()
    samples = config.samples
    margin = pol.forward(params, state).margin
    draws = perturbation_draws(instance, config.sigma, samples, rng)
    base = baseline_values(instance, config.baseline)
    target = pol.greedy_batch(params, state, draws)
    rates = []
    for k in range(1, min(config.k_max, len(ordering)) + 1):
        kept = pol.greedy_batch(params, state, masked(instance, draws, ordering[:k], base))
        rate = float(np.mean(kept == target))
        rates.append(rate)
        if rate >= 1 - config.eps:
            return PacSubsetResult(tuple(ordering), k, tuple(rates), samples, margin)
    return PacSubsetResult(tuple(ordering), None, tuple(rates), samples, margin)


def failure_diagnostics(results):
    """Median top-1/top-2 logit margin on failed vs succeeded cells (None when absent)."""
    if not results:
        raise ConfigError("need at least one result")
    failed = [r.margin for r in results if not r.succeeded]
    ok = [r.margin for r in results if r.succeeded]
    return {
        "failed_median_margin": float(np.median(failed)) if failed else None,
        "succeeded_median_margin": float(np.median(ok)) if ok else None,
        "n_failed": len(failed),
        "n_succeeded": len(ok),
    }
