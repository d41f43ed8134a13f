"""Random tree structures with step cumulative hazards, for property tests."""

import numpy as np

from mscox.cumhaz import HazardBundle
from mscox.dataset import build_structure


def random_tree(rng, n_states):
    """Each state after the first hangs off a uniformly chosen earlier state."""
    pairs = [(int(rng.integers(1, s)), s) for s in range(2, n_states + 1)]
    return build_structure(pairs)


def random_step_bundle(rng, n_states, horizon=5.0, max_jumps=60):
    """Clock-reset bundle with random jump times and sizes on a random tree."""
    structure = random_tree(rng, n_states)
    times, cumhaz = {}, {}
    for k in structure.trans_ids:
        m = int(rng.integers(0, max_jumps + 1))
        t = np.unique(rng.uniform(0, horizon, m))
        h = np.cumsum(rng.exponential(0.05, t.size))
        # a flat final knot keeps the hazards defined up to the horizon
        times[k] = np.r_[0.0, t, horizon]
        cumhaz[k] = np.r_[0.0, h, h[-1] if h.size else 0.0]
    return HazardBundle("clock_reset", structure, times, cumhaz)
