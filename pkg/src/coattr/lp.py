"""LP relaxations, a dense two-phase simplex with duals, and dual aggregation.

Row duals are reported in the sign convention of the LP's own objective sense:
for a maximisation, a binding ``<=`` row has a non-negative dual; for a
minimisation, a binding ``>=`` row does. Aggregation works on absolute values.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SolverError
from .environments import distance_matrix
from .instances import CVRPTW, FJSP, OP, Instance, fjsp_eligible

UNTAGGED = "untagged"
AGGREGATIONS = ("mean", "sum", "max")
TOL = 1e-9


@dataclass
class LinearProgram:
    c: np.ndarray
    A: np.ndarray
    senses: list
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    tags: list
    maximize: bool = False
    var_names: list = field(default_factory=list)

    @property
    def shape(self):
        return self.A.shape

    def row_count(self, tag):
        return sum(1 for t in self.tags if t == tag)

    def dump(self):
        """Row-oriented text: one line per row, ``tag sense rhs | j:coef ...``."""
        lines = [f"{'max' if self.maximize else 'min'} " + " ".join(
            f"{j}:{v!r}" for j, v in enumerate(self.c) if v != 0)]
        for j in range(self.A.shape[1]):
            lines.append(f"bound {j} {self.lb[j]!r} {self.ub[j]!r}")
        for i, row in enumerate(self.A):
            terms = " ".join(f"{j}:{row[j]!r}" for j in np.flatnonzero(row))
            lines.append(f"{self.tags[i]} {self.senses[i]} {self.b[i]!r} | {terms}")
        return "\n".join(lines) + "\n"


class _Builder:
    def __init__(self):
        self.names, self.lb, self.ub, self.c = [], [], [], []
        self.rows, self.senses, self.b, self.tags = [], [], [], []

    def var(self, name, lb=0.0, ub=np.inf, cost=0.0):
        self.names.append(name)
        self.lb.append(lb)
        self.ub.append(ub)
        self.c.append(cost)
        return len(self.names) - 1

    def row(self, coefs, sense, rhs, tag):
        self.rows.append(dict(coefs))
        self.senses.append(sense)
        self.b.append(float(rhs))
        self.tags.append(tag)

    def build(self, maximize):
        A = np.zeros((len(self.rows), len(self.names)))
        for i, coefs in enumerate(self.rows):
            for j, v in coefs.items():
                A[i, j] += v
        return LinearProgram(np.array(self.c, float), A, list(self.senses), np.array(self.b),
                             np.array(self.lb, float), np.array(self.ub, float), list(self.tags),
                             maximize, list(self.names))


# ---- simplex ----------------------------------------------------------------

@dataclass
class LPSolution:
    status: str
    objective: float
    x: np.ndarray
    duals: np.ndarray
    reduced_costs: np.ndarray
    duality_gap: float
    cs_residual: float
    pivots: list

    @property
    def pivot_digest(self):
        return hashlib.sha256(repr(self.pivots).encode()).hexdigest()[:16]


def _pivot(T, basis, i, j, pivots):
    T[i] /= T[i, j]
    col = T[:, j].copy()
    col[i] = 0.0
    T -= np.outer(col, T[i])
    basis[i] = j
    pivots.append((int(i), int(j)))


def _bland(T, basis, allowed, pivots, max_iter):
    """Minimise the cost row T[-1]; entering column by Bland's rule."""
    m = T.shape[0] - 1
    for _ in range(max_iter):
        red = T[-1, :-1]
        cand = np.flatnonzero((red < -TOL) & allowed)
        if cand.size == 0:
            return "optimal"
        j = cand[0]
        col = T[:m, j]
        pos = col > TOL
        if not pos.any():
            return "unbounded"
        ratios = np.full(m, np.inf)
        ratios[pos] = T[:m, -1][pos] / col[pos]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + TOL * max(1.0, abs(best)))
        i = ties[np.argmin(basis[ties])]
        _pivot(T, basis, i, j, pivots)
    return "iteration_limit"


def solve_with_duals(lp: LinearProgram, max_iter=50_000) -> LPSolution:
    """Two-phase dense simplex; raises SolverError unless an optimum is found."""
    m0, n = lp.A.shape
    if not np.all(np.isfinite(lp.lb)):
        raise ConfigError("variables need finite lower bounds")
    # shift x = lb + x'; finite upper bounds become rows
    ub_vars = [j for j in range(n) if np.isfinite(lp.ub[j])]
    A = np.vstack([lp.A, np.eye(n)[ub_vars]]) if ub_vars else lp.A.copy()
    b = np.concatenate([lp.b - lp.A @ lp.lb, lp.ub[ub_vars] - lp.lb[ub_vars]])
    senses = list(lp.senses) + ["<="] * len(ub_vars)
    m = A.shape[0]
    cmin = -lp.c if lp.maximize else lp.c.copy()

    slack_cols = [i for i in range(m) if senses[i] != "="]
    S = np.zeros((m, len(slack_cols)))
    for k, i in enumerate(slack_cols):
        S[i, k] = 1.0 if senses[i] == "<=" else -1.0
    sign = np.where(b < 0, -1.0, 1.0)
    Astd = np.hstack([A, S]) * sign[:, None]
    bstd = b * sign
    nstd = Astd.shape[1]

    basis = np.full(m, -1)
    for k, i in enumerate(slack_cols):
        if Astd[i, n + k] > 0:
            basis[i] = n + k
    art_rows = np.flatnonzero(basis < 0)
    art = np.zeros((m, art_rows.size))
    art[art_rows, np.arange(art_rows.size)] = 1.0
    basis[art_rows] = nstd + np.arange(art_rows.size)
    ntot = nstd + art_rows.size

    T = np.zeros((m + 1, ntot + 1))
    T[:m, :nstd] = Astd
    T[:m, nstd:ntot] = art
    T[:m, -1] = bstd
    pivots = []
    if art_rows.size:
        T[-1, nstd:ntot] = 1.0
        T[-1] -= T[art_rows].sum(axis=0)
        status = _bland(T, basis, np.ones(ntot, bool), pivots, max_iter)
        if status != "optimal":
            raise SolverError(status, f"phase 1 ended with {status}")
        if -T[-1, -1] > 1e-7 * (1 + np.abs(bstd).max()):
            raise SolverError("infeasible", "LP is infeasible")
        for i in range(m):
            if basis[i] >= nstd:
                nz = np.flatnonzero(np.abs(T[i, :nstd]) > 1e-9)
                if nz.size:
                    _pivot(T, basis, i, nz[0], pivots)
    allowed = np.zeros(ntot, bool)
    allowed[:nstd] = True
    cfull = np.zeros(ntot)
    cfull[:n] = cmin
    T[-1, :-1] = cfull - cfull[basis] @ T[:m, :-1]
    T[-1, -1] = -cfull[basis] @ T[:m, -1]
    status = _bland(T, basis, allowed, pivots, max_iter)
    if status != "optimal":
        raise SolverError(status, f"phase 2 ended with {status}")

    # recompute primal and dual from the final basis for accuracy
    full = np.hstack([Astd, art])
    B = full[:, basis]
    xB = np.linalg.solve(B, bstd)
    xstd = np.zeros(ntot)
    xstd[basis] = xB
    y = np.linalg.solve(B.T, cfull[basis])
    red = cfull[:nstd] - Astd.T @ y
    row_duals = y * sign
    xprime = xstd[:n]
    primal = cmin @ xprime
    dual_obj = bstd @ y
    row_slack = b - A @ xprime
    gap = abs(primal - dual_obj)
    cs = max(np.max(np.abs(row_duals * row_slack), initial=0.0),
             np.max(np.abs(xstd[:nstd] * red), initial=0.0))
    const = cmin @ lp.lb
    flip = -1.0 if lp.maximize else 1.0
    return LPSolution(
        status="optimal",
        objective=flip * (primal + const),
        x=xprime + lp.lb,
        duals=flip * row_duals[:m0],
        reduced_costs=flip * red[:n],
        duality_gap=float(gap),
        cs_residual=float(cs),
        pivots=pivots,
    )


# ---- aggregation --------------------------------------------------------------

@dataclass(frozen=True)
class DualVector:
    lambdas: dict
    raw: np.ndarray
    tags: tuple
    aggregation: str
    status: str = "optimal"


def aggregate_duals(raw, tags, aggregation="mean", families=None):
    """Per-family mean / sum / max of |dual| over the family's rows."""
    if aggregation not in AGGREGATIONS:
        raise ConfigError(f"unknown aggregation {aggregation!r}")
    raw = np.abs(np.asarray(raw, dtype=float))
    tags = list(tags)
    names = list(families) if families is not None else sorted({t for t in tags if t != UNTAGGED})
    out = {}
    for name in names:
        vals = raw[[i for i, t in enumerate(tags) if t == name]]
        if vals.size == 0:
            out[name] = 0.0
        elif aggregation == "mean":
            out[name] = float(vals.mean())
        elif aggregation == "sum":
            out[name] = float(vals.sum())
        else:
            out[name] = float(vals.max())
    return out


def lp_lambda(instance, aggregation="mean", **build_kw):
    lp = build_lp(instance, **build_kw)
    sol = solve_with_duals(lp)
    fams = [f.lp_row_tag for f in instance.families]
    by_tag = aggregate_duals(sol.duals, lp.tags, aggregation, fams)
    lambdas = {f.name: by_tag[f.lp_row_tag] for f in instance.families}
    return DualVector(lambdas, sol.duals, tuple(lp.tags), aggregation), sol, lp


# ---- relaxations ----------------------------------------------------------------

def build_lp(instance: Instance, capacity_rows="aggregate") -> LinearProgram:
    if instance.problem == CVRPTW:
        return _cvrptw_lp(instance, capacity_rows)
    if instance.problem == OP:
        return _op_lp(instance)
    return _fjsp_lp(instance)


def _cvrptw_lp(inst, capacity_rows):
    if capacity_rows not in ("aggregate", "mtz"):
        raise ConfigError(f"unknown capacity_rows {capacity_rows!r}")
    n = inst.N
    d = distance_matrix(inst["coords"])
    win, svc, dem, cap = inst["windows"], inst["service_time"], inst["demand"], float(inst["capacity"])
    horizon = float(win[0, 1])
    bld = _Builder()
    x = {(i, j): bld.var(f"x{i},{j}", 0.0, 1.0, d[i, j]) for i in range(n) for j in range(n) if i != j}
    tau = {i: bld.var(f"t{i}", 0.0, horizon) for i in range(1, n)}
    for i in range(1, n):
        bld.row({x[i, j]: 1.0 for j in range(n) if j != i}, "=", 1.0, "spatial")
        bld.row({x[j, i]: 1.0 for j in range(n) if j != i}, "=", 1.0, "spatial")
    flow = {x[0, j]: 1.0 for j in range(1, n)}
    for j in range(1, n):
        flow[x[j, 0]] = -1.0
    bld.row(flow, "=", 0.0, "spatial")
    if capacity_rows == "aggregate":
        bld.row({x[0, j]: 1.0 for j in range(1, n)}, ">=", dem[1:].sum() / cap, "capacity")
    else:
        load = {i: bld.var(f"q{i}", 0.0, cap) for i in range(1, n)}
        for i in range(1, n):
            bld.row({load[i]: 1.0}, ">=", dem[i], "capacity")
            for j in range(1, n):
                if i != j:
                    # q_j >= q_i + d_j - cap (1 - x_ij)
                    bld.row({load[i]: 1.0, load[j]: -1.0, x[i, j]: cap}, "<=", cap - dem[j], "capacity")
    for i in range(1, n):
        bld.row({tau[i]: 1.0}, ">=", win[i, 0], "time_window")
        bld.row({tau[i]: 1.0}, "<=", win[i, 1], "time_window")
        bld.row({tau[i]: 1.0, x[0, i]: -d[0, i]}, ">=", 0.0, "time_window")
        for j in range(1, n):
            if i != j:
                big = max(win[i, 1] + svc[i] + d[i, j] - win[j, 0], 0.0)
                # tau_i + s_i + d_ij - tau_j <= big (1 - x_ij)
                bld.row({tau[i]: 1.0, tau[j]: -1.0, x[i, j]: big}, "<=", big - svc[i] - d[i, j], "time_window")
    return bld.build(maximize=False)


def _op_lp(inst):
    n = inst.N
    d = distance_matrix(inst["coords"])
    prize, budget = inst["prize"], float(inst["budget"])
    bld = _Builder()
    z = bld.var("z", 0.0, float(prize.sum()), 1.0)
    x = {(i, j): bld.var(f"x{i},{j}", 0.0, 1.0) for i in range(n) for j in range(n) if i != j}
    y = {i: bld.var(f"y{i}", 0.0, 1.0) for i in range(1, n)}
    u = {i: bld.var(f"u{i}", 1.0, float(n - 1)) for i in range(1, n)}
    row = {z: 1.0}
    row.update({y[i]: -prize[i] for i in range(1, n)})
    bld.row(row, "<=", 0.0, "prize")
    for i in range(1, n):
        out = {x[i, j]: 1.0 for j in range(n) if j != i}
        out[y[i]] = -1.0
        bld.row(out, "=", 0.0, "spatial")
        inn = {x[j, i]: 1.0 for j in range(n) if j != i}
        inn[y[i]] = -1.0
        bld.row(inn, "=", 0.0, "spatial")
        link = {x[0, j]: -1.0 for j in range(1, n)}
        link[y[i]] = 1.0
        bld.row(link, "<=", 0.0, "spatial")
    bld.row({x[0, j]: 1.0 for j in range(1, n)}, "<=", 1.0, "spatial")
    flow = {x[0, j]: 1.0 for j in range(1, n)}
    for j in range(1, n):
        flow[x[j, 0]] = -1.0
    bld.row(flow, "=", 0.0, "spatial")
    for i in range(1, n):
        for j in range(1, n):
            if i != j:
                bld.row({u[i]: 1.0, u[j]: -1.0, x[i, j]: float(n - 1)}, "<=", float(n - 2), "spatial")
    bld.row({x[i, j]: d[i, j] for (i, j) in x}, "<=", budget, "budget")
    return bld.build(maximize=True)


def _fjsp_lp(inst):
    J, M, ops = inst.params["jobs"], inst.params["machines"], inst.params["ops_per_job"]
    p = inst["proc_time"]
    elig = fjsp_eligible(inst)
    horizon = float(np.where(elig, p, 0).max(axis=1).sum())
    bld = _Builder()
    cmax = bld.var("Cmax", 0.0, horizon, 1.0)
    a = {(o, m): bld.var(f"a{o},{m}", 0.0, 1.0) for o in range(inst.N) for m in range(M) if elig[o, m]}
    s = {o: bld.var(f"S{o}", 0.0, horizon) for o in range(inst.N)}
    for o in range(inst.N):
        bld.row({a[o, m]: 1.0 for m in range(M) if elig[o, m]}, "=", 1.0, "eligibility")
    for j in range(J):
        for k in range(ops):
            o = j * ops + k
            row = {s[o]: 1.0}
            row.update({a[o, m]: p[o, m] for m in range(M) if elig[o, m]})
            if k + 1 < ops:
                row[s[o + 1]] = -1.0
            else:
                row[cmax] = -1.0
            bld.row(row, "<=", 0.0, "precedence")
    for m in range(M):
        row = {a[o, m]: p[o, m] for o in range(inst.N) if elig[o, m]}
        row[cmax] = -1.0
        bld.row(row, "<=", 0.0, UNTAGGED)
    return bld.build(maximize=False)
