import numpy as np
import pytest

from coattr import environments as env
from coattr import policy as pol
from coattr.instances import CVRPTW, FJSP, OP, GeneratorConfig, generate

SIZES = {CVRPTW: {"n": 10}, OP: {"n": 8}, FJSP: {"jobs": 3, "machines": 2}}
SMALL = {CVRPTW: {"n": 5}, OP: {"n": 5}, FJSP: {"jobs": 2, "machines": 2}}


def make(problem, seed=0, small=False, **kw):
    sizes = dict((SMALL if small else SIZES)[problem])
    sizes.update(kw)
    return generate(GeneratorConfig(problem=problem, seed=seed, **sizes))


def greedy_states(params, inst, limit=None):
    states, st = [], env.initial_state(inst)
    while not st.terminal and (limit is None or len(states) < limit):
        states.append(st)
        st = env.transition(st, pol.greedy_action(params, st))
    return states


@pytest.fixture(params=[CVRPTW, OP, FJSP])
def problem(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---- acceptance summary ---------------------------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number, name, ok, detail):
    ACCEPTANCE[number] = (name, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
