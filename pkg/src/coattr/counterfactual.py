"""Sample-and-verify counterfactuals with post-hoc CSP certification.

For each shot one feature key is chosen round-robin and perturbed with a
box-truncated Gaussian. A candidate is kept if the perturbed instance passes
the arithmetic check, the greedy action at the cell changes and its L1 mass
beats the best so far (ties keep the earlier shot). Only the cell winner is
sent to the complete feasibility search; if that does not return
``feasible`` the winner is not a counterfactual.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import environments as env
from . import policy as pol
from .errors import ConfigError, ContractError
from .instances import CVRPTW, FJSP, OP, family_dimension
from .oracle import arithmetic_feasible, csp_feasible

CERTIFIED = "certified"
ARITH_ONLY = "arith_only"
NONE = "none"
NORMS = ("l1", "l2", "linf")
MAX_REJECTS = 100

DEFAULT_SCALES = {
    CVRPTW: {"demand": 0.05, "capacity": 0.05, "coords": 0.05, "windows": 0.2},
    OP: {"budget": 0.1, "prize": 0.1, "coords": 0.05},
    FJSP: {"elig_count": 0.5, "proc_time": 1.0},
}


@dataclass(frozen=True)
class CfConfig:
    shots: int = 128
    sigma: dict = field(default_factory=dict)
    rho: dict = field(default_factory=dict)
    keys: tuple = ()
    time_limit: float = 0.5
    norm: str = "l1"
    dim_normalize: bool = True

    def validate(self, instance=None):
        if self.shots < 1:
            raise ConfigError("shots must be >= 1")
        if not self.keys:
            raise ConfigError("at least one feature key is required")
        for k in self.keys:
            if not (self.sigma.get(k, 0) > 0 and self.rho.get(k, 0) > 0):
                raise ConfigError(f"sigma and rho must be positive for key {k!r}")
        if instance is not None and not set(self.keys) <= set(instance.tensors):
            raise ConfigError("perturbation keys must be instance tensors")
        if self.norm not in NORMS:
            raise ConfigError(f"unknown norm {self.norm!r}")
        if not self.time_limit > 0:
            raise ConfigError("time_limit must be positive")
        return self


def default_cf_config(problem, shots=128, sigma_scale=1.0, rho_factor=3.0, **kw):
    """Per-key sigma from the defaults table, rho = ``rho_factor`` * sigma."""
    sigma = {k: v * sigma_scale for k, v in DEFAULT_SCALES[problem].items()}
    rho = {k: v * rho_factor for k, v in sigma.items()}
    return CfConfig(shots=shots, sigma=sigma, rho=rho, keys=tuple(DEFAULT_SCALES[problem]), **kw)


@dataclass(frozen=True)
class Counterfactual:
    step: int
    original_action: int
    status: str
    key: str | None = None
    zeta: dict = field(default_factory=dict)
    l1: float = float("inf")
    flipped_action: int | None = None
    shot: int | None = None
    verdict: str | None = None
    family: str | None = None

    @property
    def certified(self):
        return self.status == CERTIFIED


@dataclass(frozen=True)
class Candidate:
    shot: int
    key: str
    l1: float
    flipped: bool
    arith: bool
    kept: bool
    action: int | None


@dataclass(frozen=True)
class BaselineStats:
    candidates: int
    flipping: int
    flipping_arith_pass: int

    @property
    def pass_rate(self):
        return self.flipping_arith_pass / self.flipping if self.flipping else float("nan")


def truncated_normal(rng, sigma, rho, shape):
    z = rng.normal(0.0, sigma, shape)
    for _ in range(MAX_REJECTS):
        bad = np.abs(z) > rho
        if not bad.any():
            return z
        z[bad] = rng.normal(0.0, sigma, int(bad.sum()))
    return np.clip(z, -rho, rho)


def perturbed_action(params, instance, prefix):
    """Greedy action at the end of ``prefix`` replayed in ``instance`` (None if terminal)."""
    st = env.replay(instance, prefix, strict=False)
    if st.terminal:
        return None
    return pol.greedy_action(params, st)


def explore_cell(params, instance, state, config: CfConfig, rng, flips_for_all=True):
    """Run the shot loop once; returns (Counterfactual, BaselineStats, candidate log).

    The constrained search and the unconstrained baseline share the same
    draws. With ``flips_for_all=False`` the policy is only queried on
    arithmetic-feasible candidates and the baseline stats are left empty.
    """
    config.validate(instance)
    a_t = pol.greedy_action(params, state)
    keys = config.keys
    log = []
    best, best_l1 = None, np.inf
    flipping = flipping_pass = 0
    for m in range(1, config.shots + 1):
        key = keys[m % len(keys)]
        base = instance[key]
        z = truncated_normal(rng, config.sigma[key], config.rho[key], base.shape)
        cand = instance.with_features({key: base + z})
        l1 = float(np.abs(z).sum())
        arith = arithmetic_feasible(cand)
        action = None
        if arith or flips_for_all:
            action = perturbed_action(params, cand, state.prefix)
        flipped = action is not None and action != a_t
        kept = arith and flipped and l1 < best_l1
        if flipped:
            flipping += 1
            flipping_pass += arith
        if kept:
            best, best_l1 = (m, key, z, action, cand), l1
        log.append(Candidate(m, key, l1, flipped, arith, kept, action))
    stats = BaselineStats(config.shots, flipping, flipping_pass) if flips_for_all else None
    if best is None:
        return Counterfactual(state.t, a_t, NONE), stats, log
    m, key, z, action, cand = best
    verdict = csp_feasible(cand, config.time_limit)
    cf = Counterfactual(state.t, a_t, CERTIFIED if verdict.feasible else ARITH_ONLY, key, {key: z},
                        best_l1, action, m, verdict.status)
    if cf.certified:
        cf = replace(cf, family=adjudicate(cf, instance, config.norm, config.dim_normalize))
    return cf, stats, log


def search_cell(params, instance, state, config: CfConfig, rng) -> Counterfactual:
    return explore_cell(params, instance, state, config, rng, flips_for_all=False)[0]


def unconstrained_baseline(params, instance, state, config: CfConfig, rng) -> BaselineStats:
    return explore_cell(params, instance, state, config, rng, flips_for_all=True)[1]


def family_masses(cf, instance, norm="l1", dim_normalize=True):
    masses = {}
    for fam in instance.families:
        parts = [np.ravel(cf.zeta[k]) for k in fam.feature_keys if k in cf.zeta]
        vec = np.concatenate(parts) if parts else np.zeros(0)
        if vec.size == 0:
            mass = 0.0
        elif norm == "l1":
            mass = float(np.abs(vec).sum())
        elif norm == "l2":
            mass = float(np.sqrt((vec**2).sum()))
        elif norm == "linf":
            mass = float(np.abs(vec).max())
        else:
            raise ConfigError(f"unknown norm {norm!r}")
        masses[fam.name] = mass / family_dimension(instance, fam) if dim_normalize else mass
    return masses


def top_family(scores):
    """Largest score; ties go to the lexicographically smallest name."""
    return min(scores, key=lambda name: (-scores[name], name))


def adjudicate(cf, instance, norm="l1", dim_normalize=True):
    if not cf.certified:
        raise ContractError("only certified counterfactuals can be adjudicated")
    return top_family(family_masses(cf, instance, norm, dim_normalize))


def adjudication_sweep(cf, instance):
    """Adjudicated family under every (norm, normalisation) combination."""
    return {(norm, dn): adjudicate(cf, instance, norm, dn) for norm in NORMS for dn in (False, True)}


def revalidate(params, instance, prefix, cf, config: CfConfig, time_limit=None):
    """Recheck a certified counterfactual from scratch; returns a list of violations."""
    problems = []
    if len(cf.zeta) != 1:
        problems.append("perturbation touches more than one key")
    for key, z in cf.zeta.items():
        if np.any(np.abs(z) > config.rho[key] + 1e-12):
            problems.append(f"box violated on {key}")
    cand = instance.with_features({k: instance[k] + z for k, z in cf.zeta.items()})
    nominal = env.replay(instance, prefix)
    a_t = pol.greedy_action(params, nominal)
    if a_t != cf.original_action:
        problems.append("original action differs")
    action = perturbed_action(params, cand, prefix)
    if action is None or action == a_t:
        problems.append("argmax does not flip")
    if not arithmetic_feasible(cand):
        problems.append("arithmetic check fails")
    verdict = csp_feasible(cand, time_limit or config.time_limit)
    if not verdict.feasible:
        problems.append(f"feasibility search returned {verdict.status}")
    return problems
