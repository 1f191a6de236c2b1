import numpy as np
import pytest

from coattr import environments as env
from coattr.errors import ContractError, TerminalStateError
from coattr.instances import CVRPTW, FJSP, OP, fjsp_eligible
from coattr.oracle import validate_witness

from conftest import make


def random_rollout(inst, rng):
    return env.rollout(inst, lambda s: int(rng.choice(np.flatnonzero(s.mask))))


def routes_of(prefix):
    routes, cur = [], []
    for a in prefix:
        if a == 0:
            if cur:
                routes.append(cur)
            cur = []
        else:
            cur.append(a)
    if cur:
        routes.append(cur)
    return routes


def test_cvrptw_random_rollouts_are_valid_route_sets(rng):
    for seed in range(15):
        inst = make(CVRPTW, seed)
        final = random_rollout(inst, rng)[-1]
        assert final.terminal
        assert validate_witness(inst, routes_of(final.prefix))


def test_op_random_rollouts_respect_budget(rng):
    for seed in range(15):
        inst = make(OP, seed)
        final = random_rollout(inst, rng)[-1]
        walk = [a for a in final.prefix if a != 0]
        if walk:
            assert validate_witness(inst, walk)
        assert np.isclose(env.objective(inst, final.prefix), inst["prize"][walk].sum())


def test_fjsp_rollout_schedules_every_operation_once(rng):
    for seed in range(15):
        inst = make(FJSP, seed, jobs=3, machines=3)
        final = random_rollout(inst, rng)[-1]
        assert len(final.prefix) == inst.N
        M = inst.params["machines"]
        elig = fjsp_eligible(inst)
        ops = inst.params["ops_per_job"]
        seen = {j: 0 for j in range(inst.params["jobs"])}
        for a in final.prefix:
            j, m = divmod(a, M)
            assert elig[j * ops + seen[j], m]
            seen[j] += 1
        # makespan is at least the longest job's fastest processing chain
        p = np.where(elig, inst["proc_time"], np.inf).min(axis=1).reshape(-1, ops).sum(axis=1)
        assert env.objective(inst, final.prefix) >= p.max() - 1e-9


def test_transition_rejects_masked_action(problem):
    inst = make(problem)
    st = env.initial_state(inst)
    bad = int(np.flatnonzero(~st.mask)[0]) if (~st.mask).any() else st.n_actions
    with pytest.raises(ContractError):
        env.transition(st, bad)


def test_terminal_state_has_no_mask(problem, rng):
    final = random_rollout(make(problem), rng)[-1]
    with pytest.raises(TerminalStateError):
        env.feasible_mask(final)


def test_replay_reproduces_states(problem, rng):
    inst = make(problem, 2)
    states = random_rollout(inst, rng)
    for s in states:
        assert env.replay(inst, s.prefix).same_as(s)
        assert env.replay(inst, s.prefix, strict=False).same_as(s)


def test_cvrptw_depot_masked_at_depot():
    st = env.initial_state(make(CVRPTW))
    assert not st.mask[0]
    assert st.mask[1:].any()


def test_objective_direction():
    assert env.minimizes(CVRPTW) and env.minimizes(FJSP) and not env.minimizes(OP)
