"""CO instances, feature tensors, constraint families and seeded generators.

Conventions: node 0 is the depot for CVRPTW and OP; FJSP nodes are the
operations, ordered job-major. A tensor whose first axis has length N is
indexed by node along that axis; a 0-d tensor belongs to the global slot (-1).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import numpy as np

from .errors import ConfigError, SchemaError

CVRPTW = "CVRPTW"
OP = "OP"
FJSP = "FJSP"
PROBLEMS = (CVRPTW, OP, FJSP)

GLOBAL = -1


@dataclass(frozen=True)
class FeatureTensor:
    key: str
    values: np.ndarray
    node_index: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return int(self.values.size)

    @classmethod
    def build(cls, key, values, n_nodes):
        values = np.array(values, dtype=float)
        values.setflags(write=False)
        return cls(key, values, node_index_for(values.shape, n_nodes))


def node_index_for(shape, n_nodes):
    shape = tuple(shape)
    if len(shape) == 0:
        idx = np.full(shape, GLOBAL, dtype=int)
    elif shape[0] == n_nodes:
        idx = np.broadcast_to(
            np.arange(n_nodes).reshape((n_nodes,) + (1,) * (len(shape) - 1)), shape
        ).copy()
    else:
        raise SchemaError(f"cannot map tensor of shape {shape} onto {n_nodes} nodes")
    idx.setflags(write=False)
    return idx


@dataclass(frozen=True)
class ConstraintFamily:
    name: str
    feature_keys: tuple
    lp_row_tag: str

    def __post_init__(self):
        if not self.feature_keys:
            raise SchemaError(f"family {self.name!r} has no feature keys")


@dataclass(frozen=True)
class Instance:
    problem: str
    N: int
    tensors: Mapping[str, FeatureTensor]
    families: tuple
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise SchemaError(f"unknown problem {self.problem!r}")
        names = [f.name for f in self.families]
        if len(set(names)) != len(names):
            raise SchemaError("family names must be unique")
        for fam in self.families:
            missing = set(fam.feature_keys) - set(self.tensors)
            if missing:
                raise SchemaError(f"family {fam.name!r} references missing tensors {sorted(missing)}")
        if self.dimension <= 0:
            raise SchemaError("instance has no feature entries")

    def __getitem__(self, key):
        return self.tensors[key].values

    @property
    def dimension(self):
        return sum(t.size for t in self.tensors.values())

    @property
    def family_names(self):
        return tuple(f.name for f in self.families)

    def family(self, name):
        for fam in self.families:
            if fam.name == name:
                return fam
        raise KeyError(f"unknown family {name!r}")

    def features(self):
        return {k: t.values for k, t in self.tensors.items()}

    def with_features(self, values: Mapping[str, np.ndarray]):
        """Copy of the instance with some tensors' values replaced."""
        tensors = dict(self.tensors)
        for key, v in values.items():
            old = tensors[key]
            v = np.array(v, dtype=float)
            if v.shape != old.shape:
                raise SchemaError(f"shape mismatch for {key!r}: {v.shape} vs {old.shape}")
            v.setflags(write=False)
            tensors[key] = FeatureTensor(key, v, old.node_index)
        return dataclasses.replace(self, tensors=tensors)

    def to_json(self):
        doc = {
            "problem": self.problem,
            "N": self.N,
            "tensors": {
                k: {"shape": list(t.shape), "values": [float(x) for x in t.values.ravel()]}
                for k, t in self.tensors.items()
            },
            "params": _jsonable(self.params),
            "families": [
                {"name": f.name, "feature_keys": list(f.feature_keys), "lp_row_tag": f.lp_row_tag}
                for f in self.families
            ],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        try:
            n = int(doc["N"])
            tensors = {
                k: FeatureTensor.build(k, np.reshape(np.asarray(t["values"], float), t["shape"]), n)
                for k, t in doc["tensors"].items()
            }
            families = tuple(
                ConstraintFamily(f["name"], tuple(f["feature_keys"]), f["lp_row_tag"])
                for f in doc["families"]
            )
            return cls(doc["problem"], n, tensors, families, doc.get("params", {}))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"malformed instance document: {exc}") from exc


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def family_dimension(instance: Instance, family) -> int:
    name = family.name if isinstance(family, ConstraintFamily) else family
    fam = instance.family(name)
    return sum(instance.tensors[k].size for k in fam.feature_keys)


CANONICAL_FAMILIES = {
    CVRPTW: (
        ConstraintFamily("capacity", ("demand", "capacity"), "capacity"),
        ConstraintFamily("spatial", ("coords",), "spatial"),
        ConstraintFamily("time_window", ("windows",), "time_window"),
    ),
    OP: (
        ConstraintFamily("budget", ("budget",), "budget"),
        ConstraintFamily("prize", ("prize",), "prize"),
        ConstraintFamily("spatial", ("coords",), "spatial"),
    ),
    FJSP: (
        ConstraintFamily("eligibility", ("elig_count",), "eligibility"),
        ConstraintFamily("precedence", ("proc_time",), "precedence"),
    ),
}


@dataclass(frozen=True)
class GeneratorConfig:
    """Sampling ranges are uniform; see ``generate`` for how each is used.

    ``n`` is the node count for CVRPTW/OP; for FJSP it is ignored in favour of
    ``jobs`` x ``ops_per_job`` (``ops_per_job`` defaults to ``machines``).
    """

    problem: str
    n: int = 8
    seed: int = 0
    jobs: int = 3
    machines: int = 2
    ops_per_job: int | None = None
    capacity: float = 1.0
    demand: tuple = (0.05, 0.3)
    service: tuple = (0.02, 0.1)
    horizon: float = 3.0
    window_width: tuple = (0.3, 1.2)
    prize: tuple = (0.1, 1.0)
    budget: tuple = (1.0, 2.0)
    proc_time: tuple = (1, 9)
    eligibility_prob: float = 0.6

    def validate(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}")
        if self.problem in (CVRPTW, OP) and not 2 <= self.n <= 20:
            raise ConfigError("n must be in [2, 20]")
        if self.problem == FJSP:
            if not (1 <= self.jobs <= 6 and 1 <= self.machines <= 3):
                raise ConfigError("FJSP size must be within 6 jobs x 3 machines")
            if self.ops_per_job is not None and self.ops_per_job < 1:
                raise ConfigError("ops_per_job must be >= 1")
        if self.capacity <= 0:
            raise ConfigError("capacity must be positive")
        for name in ("demand", "service", "window_width", "prize", "budget", "proc_time"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name} range is empty")
        if self.demand[0] <= 0 or self.demand[1] > self.capacity:
            raise ConfigError("demand range must lie in (0, capacity]")
        if self.service[0] < 0 or self.window_width[0] <= 0:
            raise ConfigError("service times must be >= 0 and window widths > 0")
        if self.prize[0] <= 0 or self.budget[0] <= 0 or self.proc_time[0] <= 0:
            raise ConfigError("prizes, budgets and processing times must be positive")
        if self.horizon <= 2 * np.sqrt(2) + self.service[1]:
            raise ConfigError("horizon too short for a unit-square depot round trip")
        if not 0 < self.eligibility_prob <= 1:
            raise ConfigError("eligibility_prob must be in (0, 1]")
        return self


def generate(config: GeneratorConfig) -> Instance:
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), PROBLEMS.index(config.problem)]))
    if config.problem == CVRPTW:
        return _generate_cvrptw(config, rng)
    if config.problem == OP:
        return _generate_op(config, rng)
    return _generate_fjsp(config, rng)


def _generate_cvrptw(cfg, rng):
    n, H = cfg.n, cfg.horizon
    coords = rng.uniform(0, 1, (n, 2))
    demand = np.zeros(n)
    service = np.zeros(n)
    windows = np.zeros((n, 2))
    windows[0] = (0.0, H)
    for j in range(1, n):
        demand[j] = rng.uniform(*cfg.demand)
        service[j] = rng.uniform(*cfg.service)
        d = float(np.linalg.norm(coords[j] - coords[0]))
        latest = H - service[j] - d
        while True:
            width = rng.uniform(*cfg.window_width)
            opening = rng.uniform(0.0, max(latest - width, 0.0))
            closing = opening + width
            if d <= closing and max(d, opening) <= latest:
                break
        windows[j] = (opening, closing)
    tensors = _tensors(n, coords=coords, demand=demand, windows=windows,
                       service_time=service, capacity=np.array(cfg.capacity))
    return Instance(CVRPTW, n, tensors, CANONICAL_FAMILIES[CVRPTW], {"depot": 0})


def _generate_op(cfg, rng):
    n = cfg.n
    while True:
        coords = rng.uniform(0, 1, (n, 2))
        prize = np.concatenate([[0.0], rng.uniform(*cfg.prize, n - 1)])
        budget = rng.uniform(*cfg.budget)
        round_trips = 2 * np.linalg.norm(coords[1:] - coords[0], axis=1)
        if round_trips.min() <= budget:
            break
    tensors = _tensors(n, coords=coords, prize=prize, budget=np.array(budget))
    return Instance(OP, n, tensors, CANONICAL_FAMILIES[OP], {"depot": 0})


def _generate_fjsp(cfg, rng):
    J, M = cfg.jobs, cfg.machines
    ops = cfg.ops_per_job or M
    n = J * ops
    eligible = np.zeros((n, M), dtype=bool)
    for o in range(n):
        while not eligible[o].any():
            eligible[o] = rng.uniform(size=M) < cfg.eligibility_prob
    lo, hi = cfg.proc_time
    proc = np.where(eligible, rng.integers(lo, hi + 1, (n, M)).astype(float), 0.0)
    tensors = _tensors(n, proc_time=proc, elig_count=eligible.sum(1).astype(float))
    params = {"jobs": J, "machines": M, "ops_per_job": ops, "eligible": eligible.astype(int).tolist()}
    return Instance(FJSP, n, tensors, CANONICAL_FAMILIES[FJSP], params)


def _tensors(n, **arrays):
    return {k: FeatureTensor.build(k, v, n) for k, v in arrays.items()}


def fjsp_eligible(instance):
    return np.asarray(instance.params["eligible"], dtype=bool)


@lru_cache(maxsize=None)
def _generator_means(problem, n, jobs, machines, ops_per_job):
    samples = [
        generate(GeneratorConfig(problem, n=n, seed=10_000 + s, jobs=jobs, machines=machines,
                                 ops_per_job=ops_per_job))
        for s in range(200)
    ]
    keys = samples[0].tensors.keys()
    return {k: np.mean([inst[k] for inst in samples], axis=0) for k in keys}


def generator_mean(instance: Instance):
    """Per-entry mean of the default generator at the instance's size."""
    if instance.problem == FJSP:
        p = instance.params
        means = _generator_means(FJSP, 0, p["jobs"], p["machines"], p["ops_per_job"])
    else:
        means = _generator_means(instance.problem, instance.N, 3, 2, None)
    return {k: v.copy() for k, v in means.items()}
