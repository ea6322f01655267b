"""Pareto dominance, a compact NSGA-II, and exact hypervolume for p <= 3.

Everything uses the minimization convention: a dominates b when a <= b
componentwise with strict inequality in at least one coordinate.
"""

from dataclasses import dataclass

import numpy as np

from .sampling import latin_hypercube

SBX_PROB = 0.9
SBX_ETA = 15.0
MUTATION_ETA = 20.0


def dominates(a, b):
    """True iff ``a`` Pareto-dominates ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("objective vectors have different lengths")
    return bool(np.all(a <= b) and np.any(a < b))


def dominance_matrix(values):
    """Boolean matrix D with D[i, j] = row i dominates row j."""
    v = np.atleast_2d(np.asarray(values, dtype=float))
    n, p = v.shape
    # column-wise accumulation; avoids (n, n, p) temporaries on large fronts
    le = np.ones((n, n), dtype=bool)
    lt = np.zeros((n, n), dtype=bool)
    for j in range(p):
        col = v[:, j]
        le &= col[:, None] <= col[None, :]
        lt |= col[:, None] < col[None, :]
    return le & lt


def non_dominated_filter(values):
    """Indices of rows dominated by no other row; duplicates all retained."""
    v = np.atleast_2d(np.asarray(values, dtype=float))
    if len(v) == 0:
        raise ValueError("empty point list")
    dominated = dominance_matrix(v).any(axis=0)
    return np.flatnonzero(~dominated)


@dataclass
class FrontArchive:
    """Mutually non-dominated designs with their objective vectors."""

    designs: np.ndarray   # (n, d)
    values: np.ndarray    # (n, p)

    def __post_init__(self):
        self.designs = np.atleast_2d(np.asarray(self.designs, dtype=float))
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if len(self.designs) != len(self.values):
            raise ValueError("design/value row counts differ")
        if len(self.values) and dominance_matrix(self.values).any():
            raise ValueError("archive contains dominated members")

    def __len__(self):
        return len(self.designs)


def _two_objective_sort(values):
    # lexicographic sweep: every dominator of a point precedes it, and the
    # fronts dominating it always form a prefix, so a staircase of per-front
    # minima supports binary search for the first non-dominating front
    n = len(values)
    order = np.lexsort((values[:, 1], values[:, 0]))
    ranks = np.empty(n, dtype=int)
    best2 = []    # min f2 per front so far
    best1 = []    # min f1 among members attaining best2 (tie handling)
    for i in order:
        f1, f2 = values[i]
        lo, hi = 0, len(best2)
        while lo < hi:
            mid = (lo + hi) // 2
            if best2[mid] < f2 or (best2[mid] == f2 and best1[mid] < f1):
                lo = mid + 1
            else:
                hi = mid
        ranks[i] = lo
        if lo == len(best2):
            best2.append(f2)
            best1.append(f1)
        elif f2 < best2[lo]:
            best2[lo] = f2
            best1[lo] = f1
    fronts = [np.flatnonzero(ranks == k) for k in range(len(best2))]
    return ranks, fronts


def fast_non_dominated_sort(values):
    """Ranks (0 = best front) and the list of fronts, Deb-style peeling."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    if values.shape[1] == 2:
        return _two_objective_sort(values)
    dom = dominance_matrix(values)
    n_dominators = dom.sum(axis=0)
    ranks = np.full(n, -1)
    fronts = []
    remaining = n_dominators.copy()
    assigned = np.zeros(n, dtype=bool)
    rank = 0
    while not assigned.all():
        front = np.flatnonzero((remaining == 0) & ~assigned)
        if len(front) == 0:   # cycles impossible; guard anyway
            front = np.flatnonzero(~assigned)
        ranks[front] = rank
        assigned[front] = True
        remaining = remaining - dom[front].sum(axis=0)
        fronts.append(front)
        rank += 1
    return ranks, fronts


def crowding_distance(values):
    """Deb's crowding distance within one front."""
    n, p = values.shape
    if n <= 2:
        return np.full(n, np.inf)
    dist = np.zeros(n)
    for m in range(p):
        order = np.argsort(values[:, m], kind="stable")
        vm = values[order, m]
        span = vm[-1] - vm[0]
        dist[order[0]] = dist[order[-1]] = np.inf
        if span > 0:
            dist[order[1:-1]] += (vm[2:] - vm[:-2]) / span
    return dist


def _sbx_crossover(parents_a, parents_b, rng):
    u = rng.uniform(size=parents_a.shape)
    beta = np.where(
        u <= 0.5,
        (2 * u) ** (1.0 / (SBX_ETA + 1)),
        (1.0 / (2 * (1 - u))) ** (1.0 / (SBX_ETA + 1)),
    )
    # gene-wise exchange with prob 0.5; whole pair skipped with prob 1 - SBX_PROB
    beta = np.where(rng.uniform(size=beta.shape) < 0.5, beta, 1.0)
    skip = rng.uniform(size=(len(parents_a), 1)) > SBX_PROB
    beta = np.where(skip, 1.0, beta)
    c1 = 0.5 * ((1 + beta) * parents_a + (1 - beta) * parents_b)
    c2 = 0.5 * ((1 - beta) * parents_a + (1 + beta) * parents_b)
    return np.clip(c1, 0.0, 1.0), np.clip(c2, 0.0, 1.0)


def _polynomial_mutation(x, rng):
    d = x.shape[1]
    u = rng.uniform(size=x.shape)
    apply = rng.uniform(size=x.shape) < (1.0 / d)
    exp = 1.0 / (MUTATION_ETA + 1)
    low = (2 * u + (1 - 2 * u) * (1 - x) ** (MUTATION_ETA + 1)) ** exp - 1
    high = 1 - (2 * (1 - u) + 2 * (u - 0.5) * x ** (MUTATION_ETA + 1)) ** exp
    delta = np.where(u <= 0.5, low, high)
    return np.clip(np.where(apply, x + delta, x), 0.0, 1.0)


def _rank_population(values):
    """(rank, -crowding) keys; rows with non-finite objectives get the worst rank."""
    n = len(values)
    good = np.all(np.isfinite(values), axis=1)
    ranks = np.full(n, n, dtype=float)
    crowd = np.zeros(n)
    idx = np.flatnonzero(good)
    if len(idx):
        sub_ranks, fronts = fast_non_dominated_sort(values[idx])
        ranks[idx] = sub_ranks
        for front in fronts:
            crowd[idx[front]] = crowding_distance(values[idx][front])
    return ranks, crowd


def _tournament(ranks, crowd, rng):
    n = len(ranks)
    a, b = rng.integers(0, n, size=(2, n))
    better = (ranks[a] < ranks[b]) | ((ranks[a] == ranks[b]) & (crowd[a] > crowd[b]))
    return np.where(better, a, b)


def nsga2(objective_fn, d, pop_size=100, generations=100, seed=0):
    """Evolve a population on [0, 1]^d and return its final non-dominated set.

    ``objective_fn`` maps an (n, d) array to an (n, p) array (minimized).
    Deterministic given ``seed``; rows with non-finite objectives are
    ranked worst.
    """
    if pop_size < 4 or pop_size % 2:
        raise ValueError("population size must be even and >= 4")
    rng = np.random.default_rng(seed)
    pop = latin_hypercube(pop_size, d, rng)
    values = np.atleast_2d(np.asarray(objective_fn(pop), dtype=float))
    ranks, crowd = _rank_population(values)
    for _ in range(generations):
        parents = _tournament(ranks, crowd, rng)
        half = pop_size // 2
        c1, c2 = _sbx_crossover(pop[parents[:half]], pop[parents[half:]], rng)
        offspring = _polynomial_mutation(np.vstack([c1, c2]), rng)
        off_values = np.atleast_2d(np.asarray(objective_fn(offspring), dtype=float))
        pop = np.vstack([pop, offspring])
        values = np.vstack([values, off_values])
        # survivors keep their combined-population keys for the next tournament
        keep, ranks, crowd = _select_survivors(values, pop_size)
        pop, values = pop[keep], values[keep]
    good = np.all(np.isfinite(values), axis=1)
    if not good.any():
        return FrontArchive(np.empty((0, d)), np.empty((0, values.shape[1])))
    idx = np.flatnonzero(good)
    nd = idx[non_dominated_filter(values[idx])]
    return FrontArchive(pop[nd], values[nd])


def _select_survivors(values, pop_size):
    ranks, crowd = _rank_population(values)
    keep = np.lexsort((-crowd, ranks))[:pop_size]
    return keep, ranks[keep], crowd[keep]


def _hv2(points, ref):
    order = np.argsort(points[:, 0], kind="stable")
    best2 = ref[1]
    hv = 0.0
    for a, b in points[order]:
        if b < best2:
            hv += (ref[0] - a) * (best2 - b)
            best2 = b
    return hv


def hypervolume(front, ref):
    """Lebesgue measure dominated by ``front`` relative to ``ref`` (p in {2, 3}).

    Points not strictly dominating the reference are clipped out; 2
    objectives by sort-and-sweep, 3 by slicing along the last axis.
    """
    pts = np.atleast_2d(np.asarray(front, dtype=float))
    ref = np.asarray(ref, dtype=float)
    if pts.size == 0:
        return 0.0
    p = pts.shape[1]
    if p not in (2, 3):
        raise ValueError("hypervolume implemented for 2 or 3 objectives")
    pts = pts[np.all(pts < ref, axis=1)]
    if len(pts) == 0:
        return 0.0
    if p == 2:
        return _hv2(pts, ref)
    levels = np.unique(pts[:, 2])
    uppers = np.append(levels[1:], ref[2])
    hv = 0.0
    for z, z_next in zip(levels, uppers):
        active = pts[pts[:, 2] <= z, :2]
        hv += _hv2(active, ref[:2]) * (z_next - z)
    return hv
