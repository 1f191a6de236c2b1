"""Two-tier feasibility decision.

``arithmetic_feasible`` is the cheap per-field bound check run inside sampling
loops. ``csp_feasible`` is a complete backtracking search over solutions with
forward checking and a wall-clock limit; a timeout is reported as such and is
never read as infeasibility. ``enumerate_oracle`` brute-forces tiny instances
and serves as ground truth in tests.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .environments import distance_matrix
from .errors import ConfigError
from .instances import CVRPTW, FJSP, OP, fjsp_eligible

FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
TIMEOUT = "timeout"
TOL = 1e-9
ENUMERATION_CAP = 6


@dataclass(frozen=True)
class FeasibilityVerdict:
    status: str
    elapsed: float
    witness: object = None

    @property
    def feasible(self):
        return self.status == FEASIBLE


def arithmetic_feasible(instance) -> bool:
    if not all(np.all(np.isfinite(t.values)) for t in instance.tensors.values()):
        return False
    if instance.problem == CVRPTW:
        cap = float(instance["capacity"])
        demand = instance["demand"][1:]
        w = instance["windows"]
        c = instance["coords"]
        return bool(cap > 0 and np.all(demand > 0) and np.all(demand <= cap)
                    and np.all(w[:, 0] < w[:, 1]) and np.all((c >= 0) & (c <= 1))
                    and np.all(instance["service_time"] >= 0))
    if instance.problem == OP:
        return bool(np.all(instance["prize"][1:] > 0) and float(instance["budget"]) > 0)
    elig = fjsp_eligible(instance)
    p = instance["proc_time"]
    return bool(np.all(p[elig] > 0) and np.all(elig.any(axis=1)) and np.all(instance["elig_count"] >= 1))


class _Timeout(Exception):
    pass


class _Clock:
    def __init__(self, limit):
        self.start = time.monotonic()
        self.limit = limit
        self.ticks = 0

    def check(self):
        self.ticks += 1
        if self.ticks % 64 == 0 and time.monotonic() - self.start > self.limit:
            raise _Timeout

    @property
    def elapsed(self):
        return time.monotonic() - self.start


def csp_feasible(instance, time_limit=0.5) -> FeasibilityVerdict:
    if not time_limit > 0:
        raise ConfigError("time_limit must be positive")
    clock = _Clock(time_limit)
    search = {CVRPTW: _search_cvrptw, OP: _search_op, FJSP: _search_fjsp}[instance.problem]
    try:
        witness = search(instance, clock)
    except _Timeout:
        return FeasibilityVerdict(TIMEOUT, clock.elapsed)
    if witness is None:
        return FeasibilityVerdict(INFEASIBLE, clock.elapsed)
    return FeasibilityVerdict(FEASIBLE, clock.elapsed, witness)


# ---- CVRPTW: route-set existence, unbounded fleet ------------------------------

def _search_cvrptw(inst, clock):
    n = inst.N
    d = distance_matrix(inst["coords"])
    win, svc, dem = inst["windows"], inst["service_time"], inst["demand"]
    cap, depot_close = float(inst["capacity"]), float(win[0, 1])

    def arrive(node, t, j):
        a = max(t + d[node, j], win[j, 0])
        if a > win[j, 1] + TOL or a + svc[j] + d[j, 0] > depot_close + TOL:
            return None
        return a + svc[j]

    # a customer that cannot open a fresh route can never be served
    if any(dem[j] > cap + TOL or arrive(0, 0.0, j) is None for j in range(1, n)):
        return None

    routes = []

    def extend(route, must, node, t, load, unserved):
        clock.check()
        if not unserved:
            routes.append(route)
            return True
        # extend the open route; time only grows, so customers whose windows
        # can no longer be met drop out of this branch
        for j in sorted(unserved):
            if load + dem[j] > cap + TOL:
                continue
            t2 = arrive(node, t, j)
            if t2 is not None and extend(route + [j], must, j, t2, load + dem[j], unserved - {j}):
                return True
        # symmetry break: a route may close only once it holds the smallest
        # customer that was unserved when it opened
        if must in route:
            routes.append(route)
            nxt = min(unserved)
            for j in sorted(unserved):
                if extend([j], nxt, j, arrive(0, 0.0, j), dem[j], unserved - {j}):
                    return True
            routes.pop()
        return False

    if n == 1:
        return []
    everyone = frozenset(range(1, n))
    for j in sorted(everyone):
        if extend([j], 1, j, arrive(0, 0.0, j), dem[j], everyone - {j}):
            return routes
    return None


# ---- OP: budget-respecting closed walk visiting at least one customer ------------

def _search_op(inst, clock):
    n = inst.N
    d = distance_matrix(inst["coords"])
    budget = float(inst["budget"])
    if budget <= 0 or np.any(inst["prize"][1:] <= 0):
        return None

    def walk(route, node, used, visited):
        clock.check()
        if route and used + d[node, 0] <= budget + TOL:
            return route
        for j in range(1, n):
            if j in visited:
                continue
            # propagation: must still be able to return to the depot afterwards
            if used + d[node, j] + d[j, 0] <= budget + TOL:
                found = walk(route + [j], j, used + d[node, j], visited | {j})
                if found:
                    return found
        return None

    return walk([], 0, 0.0, frozenset())


# ---- FJSP: eligibility + precedence respecting assignment -----------------------

def _search_fjsp(inst, clock):
    J, M, ops = inst.params["jobs"], inst.params["machines"], inst.params["ops_per_job"]
    elig = fjsp_eligible(inst)
    p = inst["proc_time"]
    if np.any(inst["elig_count"] < 1):
        return None
    domains = [[m for m in range(M) if elig[o, m] and p[o, m] > 0] for o in range(inst.N)]
    if any(not dom for dom in domains):
        return None
    assign = [None] * inst.N

    def place(o):
        clock.check()
        if o == inst.N:
            return True
        for m in domains[o]:
            assign[o] = m
            if place(o + 1):
                return True
        assign[o] = None
        return False

    if not place(0):
        return None
    # list-schedule: round-robin over jobs keeps intra-job order
    start = [0.0] * inst.N
    free = [0.0] * M
    ready = [0.0] * J
    for k in range(ops):
        for j in range(J):
            o = j * ops + k
            m = assign[o]
            start[o] = max(free[m], ready[j])
            free[m] = ready[j] = start[o] + p[o, m]
    return {"machine": list(assign), "start": start}


# ---- independent witness validation ------------------------------------------------

def validate_witness(instance, witness) -> bool:
    """Check a witness by direct simulation, independent of the search code."""
    if instance.problem == CVRPTW:
        served = [j for r in witness for j in r]
        if sorted(served) != list(range(1, instance.N)):
            return False
        return all(_cvrptw_route_ok(instance, r) for r in witness)
    if instance.problem == OP:
        return bool(witness) and _op_walk_ok(instance, witness)
    elig = fjsp_eligible(instance)
    p = instance["proc_time"]
    ops, M = instance.params["ops_per_job"], instance.params["machines"]
    machine, start = witness["machine"], witness["start"]
    for o in range(instance.N):
        m = machine[o]
        if not elig[o, m] or p[o, m] <= 0:
            return False
        if o % ops and start[o] < start[o - 1] + p[o - 1, machine[o - 1]] - TOL:
            return False
    for m in range(M):
        jobs = sorted((start[o], start[o] + p[o, m]) for o in range(instance.N) if machine[o] == m)
        if any(b[0] < a[1] - TOL for a, b in zip(jobs, jobs[1:])):
            return False
    return True


def _cvrptw_route_ok(inst, route):
    coords = inst["coords"]
    win, svc, dem = inst["windows"], inst["service_time"], inst["demand"]
    t, load, prev = 0.0, 0.0, 0
    for j in route:
        t = max(t + float(np.hypot(*(coords[j] - coords[prev]))), win[j, 0])
        if t > win[j, 1] + TOL:
            return False
        t += svc[j]
        load += dem[j]
        prev = j
    t += float(np.hypot(*(coords[prev] - coords[0])))
    return load <= float(inst["capacity"]) + TOL and t <= win[0, 1] + TOL


def _op_walk_ok(inst, walk):
    coords = inst["coords"]
    path = [0] + list(walk) + [0]
    length = sum(float(np.hypot(*(coords[a] - coords[b]))) for a, b in zip(path, path[1:]))
    return (len(set(walk)) == len(walk) and 0 not in walk and length <= float(inst["budget"]) + TOL
            and float(inst["budget"]) > 0 and bool(np.all(inst["prize"][1:] > 0)))


# ---- exhaustive ground truth ---------------------------------------------------------

def enumerate_oracle(instance) -> bool:
    if instance.N > ENUMERATION_CAP:
        raise ConfigError(f"enumeration refused above {ENUMERATION_CAP} nodes/operations")
    if instance.problem == CVRPTW:
        customers = list(range(1, instance.N))
        if not customers:
            return True
        for perm in itertools.permutations(customers):
            for cuts in itertools.product((False, True), repeat=len(perm) - 1):
                routes, cur = [], [perm[0]]
                for j, cut in zip(perm[1:], cuts):
                    if cut:
                        routes.append(cur)
                        cur = []
                    cur.append(j)
                routes.append(cur)
                if all(_cvrptw_route_ok(instance, r) for r in routes):
                    return True
        return False
    if instance.problem == OP:
        customers = range(1, instance.N)
        for size in range(1, instance.N):
            for walk in itertools.permutations(customers, size):
                if _op_walk_ok(instance, walk):
                    return True
        return False
    elig = fjsp_eligible(instance)
    p = instance["proc_time"]
    if np.any(instance["elig_count"] < 1):
        return False
    M = instance.params["machines"]
    for assign in itertools.product(range(M), repeat=instance.N):
        if all(elig[o, m] and p[o, m] > 0 for o, m in enumerate(assign)):
            return True
    return False
