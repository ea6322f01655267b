"""Space-filling designs on the unit hypercube."""

import numpy as np


def as_seed_sequence(seed):
    """Accept ints, None, or an existing SeedSequence interchangeably."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def latin_hypercube(n, d, rng):
    """Plain LHS: one point per stratum in every 1D projection."""
    cells = np.array([rng.permutation(n) for _ in range(d)]).T
    return (cells + rng.uniform(size=(n, d))) / n


def min_interpoint_distance(x):
    if len(x) < 2:
        return np.inf
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(d2.min()))


def maximin_lhs(n, d, rng, n_draws=50):
    """Best-of-``n_draws`` LHS under the maximin interpoint distance."""
    best, best_dist = None, -np.inf
    for _ in range(n_draws):
        x = latin_hypercube(n, d, rng)
        dist = min_interpoint_distance(x)
        if dist > best_dist:
            best, best_dist = x, dist
    return best
