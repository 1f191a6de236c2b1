"""Counter-based random streams.

Every stream is keyed by a tuple of integers, so a cell's randomness never
depends on the order in which cells are scheduled.
"""
import numpy as np

GENERATE = 1
INIT = 2
TRAIN = 3
COUNTERFACTUAL = 4
PAC = 5
BOOTSTRAP = 6


def stream(*key):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def derive_seed(*key):
    """A 63-bit integer seed derived from ``key``."""
    state = np.random.SeedSequence([int(k) for k in key]).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])
