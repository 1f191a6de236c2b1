"""Step semantics, feasible-action masks and dynamic quantities per problem.

Action spaces:
  CVRPTW  N actions; 0 returns to the depot (closing the route, the next route
          starts at time 0 with full capacity), j >= 1 visits customer j.
  OP      N actions; 0 returns to the depot and ends the tour, j visits j.
  FJSP    J*M actions; a = job * M + machine schedules the job's next
          operation on that machine.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, TerminalStateError
from .instances import CVRPTW, FJSP, OP, Instance, fjsp_eligible

TOL = 1e-9


@dataclass(frozen=True)
class PolicyState:
    instance: Instance
    t: int
    prefix: tuple
    dyn: dict = field(compare=False)
    mask: np.ndarray = field(compare=False)
    done: bool = False

    @property
    def terminal(self):
        return self.done or not self.mask.any()

    @property
    def n_actions(self):
        return self.mask.size

    def same_as(self, other):
        if self.t != other.t or self.prefix != other.prefix or self.done != other.done:
            return False
        if not np.array_equal(self.mask, other.mask):
            return False
        return all(np.array_equal(np.asarray(self.dyn[k]), np.asarray(other.dyn[k])) for k in self.dyn)


def distance_matrix(coords):
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff**2).sum(-1))


# ---- CVRPTW ---------------------------------------------------------------

def _cvrptw_start(inst):
    visited = np.zeros(inst.N, dtype=bool)
    visited[0] = True
    return {"node": 0, "load_left": float(inst["capacity"]), "time": 0.0,
            "visited": visited, "route_len": 0}


def _cvrptw_mask(inst, dyn, dist=None):
    dist = distance_matrix(inst["coords"]) if dist is None else dist
    node = dyn["node"]
    windows, service, demand = inst["windows"], inst["service_time"], inst["demand"]
    arrival = np.maximum(dyn["time"] + dist[node], windows[:, 0])
    mask = (~dyn["visited"]) & (demand <= dyn["load_left"] + TOL) & (arrival <= windows[:, 1] + TOL)
    mask &= arrival + service + dist[:, 0] <= windows[0, 1] + TOL
    mask[0] = node != 0
    return mask


def _cvrptw_step(inst, dyn, action, dist):
    d = dict(dyn)
    if action == 0:
        d.update(node=0, load_left=float(inst["capacity"]), time=0.0, route_len=0)
        return d
    w = inst["windows"][action]
    arrival = max(dyn["time"] + dist[dyn["node"], action], w[0])
    visited = dyn["visited"].copy()
    visited[action] = True
    d.update(node=action, load_left=dyn["load_left"] - inst["demand"][action],
             time=arrival + inst["service_time"][action], visited=visited,
             route_len=dyn["route_len"] + 1)
    return d


def _cvrptw_done(inst, dyn):
    return bool(dyn["visited"].all() and dyn["node"] == 0)


# ---- OP -------------------------------------------------------------------

def _op_start(inst):
    visited = np.zeros(inst.N, dtype=bool)
    visited[0] = True
    return {"node": 0, "budget_left": float(inst["budget"]), "visited": visited,
            "prize": 0.0, "ended": False}


def _op_mask(inst, dyn, dist=None):
    dist = distance_matrix(inst["coords"]) if dist is None else dist
    node = dyn["node"]
    mask = (~dyn["visited"]) & (dist[node] + dist[:, 0] <= dyn["budget_left"] + TOL)
    mask[0] = node != 0 or not mask[1:].any()
    if dyn["ended"]:
        mask[:] = False
    return mask


def _op_step(inst, dyn, action, dist):
    d = dict(dyn)
    if action == 0:
        d.update(node=0, budget_left=dyn["budget_left"] - dist[dyn["node"], 0], ended=True)
        return d
    visited = dyn["visited"].copy()
    visited[action] = True
    d.update(node=action, budget_left=dyn["budget_left"] - dist[dyn["node"], action],
             visited=visited, prize=dyn["prize"] + inst["prize"][action])
    return d


def _op_done(inst, dyn):
    return bool(dyn["ended"])


# ---- FJSP -----------------------------------------------------------------

def _fjsp_shape(inst):
    p = inst.params
    return p["jobs"], p["machines"], p["ops_per_job"]


def _fjsp_start(inst):
    J, M, _ = _fjsp_shape(inst)
    return {"machine_free": np.zeros(M), "job_ready": np.zeros(J),
            "next_op": np.zeros(J, dtype=int), "makespan": 0.0}


def fjsp_current_ops(inst, dyn):
    """Operation index each job would schedule next (clamped to its last op)."""
    J, M, ops = _fjsp_shape(inst)
    return np.arange(J) * ops + np.minimum(dyn["next_op"], ops - 1)


def _fjsp_mask(inst, dyn, dist=None):
    J, M, ops = _fjsp_shape(inst)
    elig = fjsp_eligible(inst)
    cur = fjsp_current_ops(inst, dyn)
    open_job = dyn["next_op"] < ops
    return (elig[cur] & open_job[:, None]).reshape(J * M)


def _fjsp_step(inst, dyn, action, dist):
    J, M, ops = _fjsp_shape(inst)
    job, machine = divmod(int(action), M)
    o = job * ops + int(dyn["next_op"][job])
    start = max(dyn["machine_free"][machine], dyn["job_ready"][job])
    end = start + inst["proc_time"][o, machine]
    mf, jr, nx = dyn["machine_free"].copy(), dyn["job_ready"].copy(), dyn["next_op"].copy()
    mf[machine] = end
    jr[job] = end
    nx[job] += 1
    return {"machine_free": mf, "job_ready": jr, "next_op": nx, "makespan": max(dyn["makespan"], end)}


def _fjsp_done(inst, dyn):
    return bool((dyn["next_op"] >= _fjsp_shape(inst)[2]).all())


_RULES = {
    CVRPTW: (_cvrptw_start, _cvrptw_mask, _cvrptw_step, _cvrptw_done),
    OP: (_op_start, _op_mask, _op_step, _op_done),
    FJSP: (_fjsp_start, _fjsp_mask, _fjsp_step, _fjsp_done),
}


def _dist(inst):
    return distance_matrix(inst["coords"]) if "coords" in inst.tensors else None


def _make_state(inst, t, prefix, dyn, dist):
    _, mask_fn, _, done_fn = _RULES[inst.problem]
    done = done_fn(inst, dyn)
    mask = np.zeros(n_actions(inst), dtype=bool) if done else mask_fn(inst, dyn, dist)
    mask.setflags(write=False)
    return PolicyState(inst, t, tuple(prefix), dyn, mask, done)


def n_actions(inst):
    if inst.problem == FJSP:
        J, M, _ = _fjsp_shape(inst)
        return J * M
    return inst.N


def initial_state(instance: Instance) -> PolicyState:
    start = _RULES[instance.problem][0]
    return _make_state(instance, 0, (), start(instance), _dist(instance))


def feasible_mask(state: PolicyState) -> np.ndarray:
    if state.terminal:
        raise TerminalStateError("terminal state has no feasible actions")
    return state.mask


def transition(state: PolicyState, action: int, dist=None) -> PolicyState:
    action = int(action)
    if not (0 <= action < state.n_actions) or not state.mask[action]:
        raise ContractError(f"action {action} is not feasible at step {state.t}")
    inst = state.instance
    dist = _dist(inst) if dist is None else dist
    dyn = _RULES[inst.problem][2](inst, state.dyn, action, dist)
    return _make_state(inst, state.t + 1, state.prefix + (action,), dyn, dist)


def replay(instance: Instance, prefix, strict=True) -> PolicyState:
    """Rebuild the state reached by ``prefix``.

    With ``strict=False`` the dynamics are applied even when an action is not
    feasible in ``instance`` (used on perturbed instances, whose recorded
    prefix may no longer respect the masks); the final mask is recomputed.
    """
    start, mask_fn, step, done_fn = _RULES[instance.problem]
    dist = _dist(instance)
    if strict:
        state = initial_state(instance)
        for a in prefix:
            state = transition(state, a, dist)
        return state
    dyn = start(instance)
    for a in prefix:
        dyn = step(instance, dyn, int(a), dist)
    return _make_state(instance, len(prefix), prefix, dyn, dist)


def rollout(instance, choose, max_steps=None):
    """Run ``choose(state) -> action`` until termination; returns all states visited."""
    states = [initial_state(instance)]
    dist = _dist(instance)
    while not states[-1].terminal and (max_steps is None or len(states) <= max_steps):
        states.append(transition(states[-1], choose(states[-1]), dist))
    return states


def action_kind(instance, action):
    if instance.problem == CVRPTW:
        return "depot" if action == 0 else "customer"
    if instance.problem == OP:
        return "end" if action == 0 else "visit"
    return "schedule"


def objective(instance, prefix):
    """Episode objective: travel length (CVRPTW), prize (OP), makespan (FJSP).

    Larger is better for OP; smaller is better for the other two.
    """
    state = replay(instance, prefix)
    if instance.problem == OP:
        return float(state.dyn["prize"])
    if instance.problem == FJSP:
        return float(state.dyn["makespan"])
    dist = distance_matrix(instance["coords"])
    path = (0,) + tuple(prefix) + (0,)
    return float(sum(dist[a, b] for a, b in zip(path[:-1], path[1:])))


def minimizes(problem):
    return problem != OP
