"""Pointer-style scoring policy with exact input gradients.

Each action gets a row of inputs built from the instance features (distances,
slacks, loads, processing times ...) and the current dynamic scalars. Scores
are ``v . tanh(U W1 + g W2 + b)`` where ``g`` is a context vector; logits are
scores over the temperature, masked to the feasible set.

Gradients flow through the feature tensors only. Dynamic scalars (remaining
capacity, clock, budget, machine free times) enter as constants at each step.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import environments as env
from . import rng as rngs
from .errors import ContractError, TerminalStateError
from .instances import CVRPTW, FJSP, OP, GeneratorConfig, fjsp_eligible, generate

log = logging.getLogger(__name__)

EPS = 1e-12
TIME_SCALE = 10.0


def _expand(x):
    return x.reshape(x.shape + (1,))


def _dist_to(coords, node):
    diff = coords - coords[..., node:node + 1, :]
    return ad.sqrt((diff * diff).sum(-1) + EPS)


def _cvrptw_inputs(f, state):
    dyn, n = state.dyn, state.instance.N
    coords, cap = f["coords"], f["capacity"]
    dc = _dist_to(coords, dyn["node"])
    d0 = _dist_to(coords, 0)
    opening, closing = f["windows"][..., :, 0], f["windows"][..., :, 1]
    arrival = dyn["time"] + dc
    demand = f["demand"]
    depot = np.zeros(n)
    depot[0] = 1.0
    u = ad.stack([coords[..., :, 0], coords[..., :, 1], dc, d0, demand / _expand(cap),
                  (dyn["load_left"] - demand) / _expand(cap), opening, closing,
                  closing - arrival, opening - arrival, f["service_time"], depot])
    cur = coords[..., dyn["node"], :]
    g = ad.stack([cap, dyn["load_left"] / cap, dyn["time"], cur[..., 0], cur[..., 1],
                  dyn["visited"].mean(), float(dyn["node"] == 0)])
    return u, g


def _op_inputs(f, state):
    dyn, n = state.dyn, state.instance.N
    coords, prize = f["coords"], f["prize"]
    dc = _dist_to(coords, dyn["node"])
    d0 = _dist_to(coords, 0)
    depot = np.zeros(n)
    depot[0] = 1.0
    u = ad.stack([coords[..., :, 0], coords[..., :, 1], dc, d0, prize,
                  dyn["budget_left"] - dc - d0, prize / (dc + d0 + 0.1), depot])
    cur = coords[..., dyn["node"], :]
    g = ad.stack([f["budget"], dyn["budget_left"] / f["budget"], cur[..., 0], cur[..., 1],
                  dyn["visited"].mean(), dyn["prize"]])
    return u, g


def _fjsp_inputs(f, state):
    inst, dyn = state.instance, state.dyn
    J, M, ops = inst.params["jobs"], inst.params["machines"], inst.params["ops_per_job"]
    elig = fjsp_eligible(inst)
    cur_ops = env.fjsp_current_ops(inst, dyn)
    o_idx = np.repeat(cur_ops, M)
    m_idx = np.tile(np.arange(M), J)
    j_idx = np.repeat(np.arange(J), M)
    p = f["proc_time"] / TIME_SCALE
    ec = f["elig_count"]
    avg = (p * elig).sum(-1) / ec
    remaining = np.zeros((J * M, inst.N))
    for a in range(J * M):
        j = j_idx[a]
        remaining[a, j * ops + dyn["next_op"][j]:(j + 1) * ops] = 1.0
    start = np.maximum(dyn["machine_free"][m_idx], dyn["job_ready"][j_idx]) / TIME_SCALE
    p_a = p[..., o_idx, m_idx]
    u = ad.stack([p_a, ec[..., o_idx], avg[..., o_idx], avg @ remaining.T, start, start + p_a,
                  dyn["machine_free"][m_idx] / TIME_SCALE, dyn["job_ready"][j_idx] / TIME_SCALE])
    g = ad.stack([avg.sum(-1), dyn["makespan"] / TIME_SCALE, dyn["machine_free"].mean() / TIME_SCALE,
                  float(dyn["next_op"].sum()) / inst.N])
    return u, g


INPUTS = {CVRPTW: _cvrptw_inputs, OP: _op_inputs, FJSP: _fjsp_inputs}
N_INPUTS = {CVRPTW: (12, 7), OP: (8, 6), FJSP: (8, 4)}


@dataclass(frozen=True)
class PolicyParams:
    problem: str
    W1: np.ndarray
    W2: np.ndarray
    b: np.ndarray
    v: np.ndarray
    temperature: float = 1.0
    seed: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractError("temperature must be positive")
        for name in ("W1", "W2", "b", "v"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ContractError(f"non-finite entries in {name}")

    @property
    def arrays(self):
        return {"W1": self.W1, "W2": self.W2, "b": self.b, "v": self.v}

    def with_arrays(self, **arrays):
        return replace(self, **{k: np.array(v, dtype=float) for k, v in arrays.items()})

    def to_json(self):
        doc = {"problem": self.problem, "seed": self.seed, "temperature": self.temperature,
               **{k: v.tolist() for k, v in self.arrays.items()}, "meta": self.meta}
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(doc["problem"], *(np.array(doc[k], dtype=float) for k in ("W1", "W2", "b", "v")),
                   temperature=float(doc["temperature"]), seed=int(doc["seed"]), meta=doc.get("meta", {}))


def init_params(problem, seed=0, hidden=16, scale=1.0, temperature=1.0):
    p, q = N_INPUTS[problem]
    rng = rngs.stream(seed, rngs.INIT)
    return PolicyParams(
        problem,
        W1=rng.normal(0, scale / np.sqrt(p), (p, hidden)),
        W2=rng.normal(0, scale / np.sqrt(q), (q, hidden)),
        b=rng.normal(0, 0.1 * scale, hidden),
        v=rng.normal(0, 2.0 * scale / np.sqrt(hidden), hidden),
        temperature=temperature, seed=seed,
    )


def zero_params(problem, hidden=16):
    p, q = N_INPUTS[problem]
    return PolicyParams(problem, np.zeros((p, hidden)), np.zeros((q, hidden)), np.zeros(hidden), np.zeros(hidden))


def scores(params, state, feats=None, weights=None):
    """Unmasked logits; ``feats`` may carry leading batch dimensions."""
    f = state.instance.features() if feats is None else feats
    w = params.arrays if weights is None else weights
    u, g = INPUTS[state.instance.problem](f, state)
    gw = g @ w["W2"]
    hid = ad.tanh(u @ w["W1"] + gw.reshape(gw.shape[:-1] + (1, gw.shape[-1])) + w["b"])
    return (hid @ _column(w["v"])).reshape(hid.shape[:-1]) / params.temperature


def _column(v):
    return v.reshape((v.shape[0], 1))


@dataclass(frozen=True)
class StepDistribution:
    logits: np.ndarray
    probs: np.ndarray
    argmax: int

    @property
    def margin(self):
        """Top-1 minus top-2 logit among feasible actions (inf if only one)."""
        feas = np.sort(self.logits[np.isfinite(self.logits)])
        return float(feas[-1] - feas[-2]) if feas.size > 1 else float("inf")


def forward(params, state, feats=None) -> StepDistribution:
    if state.terminal:
        raise TerminalStateError("no feasible action at a terminal state")
    s = np.asarray(scores(params, state, feats), dtype=float)
    logits = np.where(state.mask, s, -np.inf)
    z = logits - logits.max()
    e = np.where(state.mask, np.exp(z), 0.0)
    probs = e / e.sum()
    return StepDistribution(logits, probs, int(np.argmax(logits)))


def greedy_action(params, state, feats=None):
    return forward(params, state, feats).argmax


def greedy_batch(params, state, feats):
    """Argmax for a batch of feature dicts with a shared leading axis."""
    s = np.asarray(scores(params, state, feats))
    return np.argmax(np.where(state.mask, s, -np.inf), axis=-1)


def log_prob_var(params, state, action, feats, weights=None):
    s = scores(params, state, feats, weights)
    feasible = np.flatnonzero(state.mask)
    return s[action] - ad.logsumexp(s[feasible])


def grad_log_prob(params, state, action, keys=None):
    """d log pi(action | state) / d x for every entry of each tensor in ``keys``."""
    if state.terminal or not state.mask[action]:
        raise ContractError(f"action {action} has zero probability at step {state.t}")
    inst = state.instance
    keys = tuple(inst.tensors) if keys is None else tuple(keys)
    feats = inst.features()
    leaves = {k: ad.Var(feats[k]) for k in keys}
    feats.update(leaves)
    out = log_prob_var(params, state, action, feats)
    if not np.isfinite(out.value):
        raise ContractError("log-probability is not finite")
    out.backward()
    return {k: (v.grad if v.grad is not None else np.zeros(v.shape)) for k, v in leaves.items()}


# ---- training ---------------------------------------------------------------

def _greedy_objective(params, inst):
    states = env.rollout(inst, lambda s: greedy_action(params, s))
    return env.objective(inst, states[-1].prefix)


def _reward(problem, objective):
    return objective if problem == OP else -objective


def train_reinforce(params: PolicyParams, generator: GeneratorConfig, episodes: int, seed: int,
                    lr=0.01, batch=8, eval_every=100, n_val=16):
    """REINFORCE with a greedy-rollout baseline; returns the best params on a fixed validation set."""
    if episodes <= 0:
        return replace(params, meta={**params.meta, "episodes": 0})
    rng = rngs.stream(seed, rngs.TRAIN)
    val = [generate(replace(generator, seed=rngs.derive_seed(seed, rngs.TRAIN, 1, i))) for i in range(n_val)]

    def validate(p):
        return float(np.mean([_greedy_objective(p, inst) for inst in val]))

    sign = 1.0 if generator.problem == OP else -1.0
    init_val = best_val = validate(params)
    best, cur = params, params
    m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    s2 = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    history = [(0, init_val)]
    step = 0
    for ep in range(1, episodes + 1):
        inst = generate(replace(generator, seed=int(rng.integers(2**62))))
        weights = {k: ad.Var(v) for k, v in cur.arrays.items()}
        state, total = env.initial_state(inst), None
        while not state.terminal:
            a = _sample(cur, state, rng)
            lp = log_prob_var(cur, state, a, None, weights)
            total = lp if total is None else total + lp
            state = env.transition(state, a)
        advantage = _reward(inst.problem, env.objective(inst, state.prefix)) - _reward(
            inst.problem, _greedy_objective(cur, inst))
        if total is not None and advantage != 0.0:
            (total * (-advantage)).backward()
            for k, w in weights.items():
                if w.grad is not None:
                    grads[k] += w.grad
        if ep % batch == 0:
            step += 1
            new = {}
            for k, v in cur.arrays.items():
                g = grads[k] / batch
                m[k] = 0.9 * m[k] + 0.1 * g
                s2[k] = 0.999 * s2[k] + 0.001 * g * g
                mh, vh = m[k] / (1 - 0.9**step), s2[k] / (1 - 0.999**step)
                new[k] = v - lr * mh / (np.sqrt(vh) + 1e-8)
                grads[k][...] = 0.0
            cur = cur.with_arrays(**new)
        if ep % eval_every == 0 or ep == episodes:
            score = validate(cur)
            history.append((ep, score))
            if sign * score > sign * best_val:
                best, best_val = cur, score
            log.info("episode %d validation objective %.4f (best %.4f)", ep, score, best_val)
    meta = {**params.meta, "episodes": episodes, "init_objective": init_val,
            "best_objective": best_val, "history": history, "train_seed": seed}
    return replace(best, seed=params.seed, meta=meta)


def _sample(params, state, rng):
    dist = forward(params, state)
    return int(rng.choice(dist.probs.size, p=dist.probs))
