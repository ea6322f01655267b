"""Batch selection by Sharpe-ratio portfolio allocation.

Trade-off candidates are normalized into a unit box and treated as
assets: the expected return of an asset is the box volume it dominates
under the reference corner, covariances come from jointly dominated
volumes. Maximizing the Sharpe ratio of this market is a convex QP
whose optimal weights decide which designs enter the batch and, under
noise, how many replicates each receives. The riskless return is zero,
so the tangency portfolio solves min w'Qw subject to r'w = 1, w >= 0.
"""

import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .acquisition import (
    probability_improvement_threshold_filter,
    probability_non_domination_filter,
    tradeoff_front_search,
    tradeoff_values,
    KEEP_MAX,
    PI_MIN,
    PND_MIN,
)
from .gp import MERGE_TOL, predict
from .pareto import non_dominated_filter
from .sampling import as_seed_sequence

DEFAULT_MARGIN = 0.2
KKT_TOL = 1e-9
DUPLICATE_DECIMALS = 12


@dataclass
class AssetSet:
    """Normalized assets with hypervolume returns and covariances."""

    assets: np.ndarray        # (r, m) in [0, 1]^m, minimization convention
    returns: np.ndarray       # (r,)
    covariance: np.ndarray    # (r, r)
    riskless_return: float = 0.0

    def __post_init__(self):
        q = self.covariance
        if not np.allclose(q, q.T, atol=1e-10):
            raise ValueError("covariance not symmetric")
        diag = self.returns * (1.0 - self.returns)
        if not np.allclose(np.diag(q), diag, atol=1e-10):
            raise ValueError("covariance diagonal inconsistent with returns")

    def __len__(self):
        return len(self.returns)


@dataclass
class SharpeSolution:
    weights: np.ndarray       # z* on the simplex
    sharpe_value: float


@dataclass
class BatchAllocation:
    counts: np.ndarray        # nonnegative ints per asset, summing to total
    total: int
    gamma: float = None       # scaling found by dichotomy; None in top-q mode
    mode: str = "proportional"


@dataclass
class SelectionResult:
    """Batch proposed by one selection round."""

    designs: np.ndarray       # (k, d)
    counts: np.ndarray        # (k,) replicate counts, summing to q
    seconds: float
    sharpe_value: float
    n_candidates: int
    mode: str
    gamma: float = None


def asset_statistics(assets):
    """Returns and covariance of normalized assets.

    p_i is the volume of the box dominated below the all-ones corner,
    p_ik the jointly dominated volume, Q_ik = p_ik - p_i p_k.
    """
    a = np.atleast_2d(np.asarray(assets, dtype=float))
    returns = np.prod(1.0 - a, axis=1)
    joint = np.ones((len(a), len(a)))
    for j in range(a.shape[1]):
        joint *= 1.0 - np.maximum.outer(a[:, j], a[:, j])
    cov = joint - np.outer(returns, returns)
    return returns, cov


def build_assets(cands, margin=DEFAULT_MARGIN):
    """Normalize candidate trade-off values into an asset market.

    Each kept dimension is mapped so the candidate ideal point sits at 0
    and the reference corner (per-dim max plus ``margin`` times the
    range) at 1. Constant dimensions carry no information and are
    dropped from the volume products.
    """
    values = tradeoff_values(cands)
    lo = values.min(axis=0)
    hi = values.max(axis=0)
    span = hi - lo
    keep = span > 1e-12 * np.maximum(1.0, np.abs(values).max(axis=0))
    if not keep.any():
        raise ValueError("all trade-off dimensions degenerate")
    ref = hi[keep] + margin * span[keep]
    assets = (values[:, keep] - lo[keep]) / (ref - lo[keep])
    returns, cov = asset_statistics(assets)
    return AssetSet(assets=assets, returns=returns, covariance=cov)


def _solve_kkt(q_mat, r, free):
    k = len(free)
    kkt = np.empty((k + 1, k + 1))
    kkt[:k, :k] = q_mat[np.ix_(free, free)]
    kkt[:k, k] = -r[free]
    kkt[k, :k] = r[free]
    kkt[k, k] = 0.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol = np.linalg.solve(kkt, rhs)
    return sol[:k], sol[k]


def _active_set_qp(q_mat, r, w0, max_iter):
    """Primal active-set solve of min w'Qw s.t. r'w = 1, w >= 0.

    Starts from a feasible ``w0``; returns (w, lambda). Finite
    termination for positive definite Q barring degenerate cycling,
    which the iteration cap converts into an error upstream.
    """
    n = len(r)
    w = w0.copy()
    free = w > 1e-14
    for _ in range(max_iter):
        idx = np.flatnonzero(free)
        w_free, lam = _solve_kkt(q_mat, r, idx)
        if w_free.min() >= -1e-14:
            w = np.zeros(n)
            w[idx] = np.maximum(w_free, 0.0)
            mu = q_mat @ w - lam * r
            bound = np.flatnonzero(~free)
            if len(bound) == 0 or mu[bound].min() >= -1e-11:
                return w, lam
            free[bound[np.argmin(mu[bound])]] = True
        else:
            # ratio test toward the equality solution; drop the blocker
            target = np.zeros(n)
            target[idx] = w_free
            step = target - w
            shrink = idx[step[idx] < -1e-16]
            ratios = w[shrink] / -step[shrink]
            j = np.argmin(ratios)
            w = w + min(ratios[j], 1.0) * step
            w[shrink[j]] = 0.0
            free[shrink[j]] = False
    return None, None


def _kkt_residual(q_mat, r, w, lam):
    mu = q_mat @ w - lam * r
    free = w > 1e-12
    scale = max(1.0, np.abs(lam), np.abs(q_mat @ w).max())
    parts = [
        abs(r @ w - 1.0),
        max(0.0, -w.min(initial=0.0)),
        np.abs(mu[free]).max(initial=0.0),
        max(0.0, -mu[~free].min(initial=0.0)),
    ]
    return max(parts) / scale


def solve_sharpe(assets):
    """Tangency portfolio of the asset market.

    Duplicate assets are merged before the QP (their weight is split
    back evenly) and the covariance receives a relative jitter of
    1e-12 * trace / r. Raises on markets with no positive return or on
    QP non-convergence.
    """
    returns = assets.returns
    r_total = len(returns)
    if returns.max(initial=0.0) <= assets.riskless_return:
        raise ValueError("no investable asset: all returns at or below riskless")
    rounded = np.round(assets.assets, DUPLICATE_DECIMALS)
    _, reps, inverse = np.unique(rounded, axis=0, return_index=True,
                                 return_inverse=True)
    investable = returns[reps] > assets.riskless_return
    work = reps[investable]
    q_mat = assets.covariance[np.ix_(work, work)].copy()
    r_vec = returns[work]
    n = len(work)
    jitter = 1e-12 * np.trace(q_mat) / n
    q_mat[np.diag_indices(n)] += jitter

    try:
        w0 = cho_solve(cho_factor(q_mat), r_vec)
    except np.linalg.LinAlgError:
        w0 = np.linalg.lstsq(q_mat, r_vec, rcond=None)[0]
    w0 = np.maximum(w0, 0.0)
    mass = r_vec @ w0
    if mass <= 1e-300:
        w0 = np.zeros(n)
        w0[np.argmax(r_vec / np.sqrt(np.maximum(np.diag(q_mat), 1e-300)))] = 1.0
        mass = r_vec @ w0
    w0 /= mass

    w, lam = _active_set_qp(q_mat, r_vec, w0, max_iter=3 * n + 30)
    if w is None or _kkt_residual(q_mat, r_vec, w, lam) > KKT_TOL:
        res = np.nan if w is None else _kkt_residual(q_mat, r_vec, w, lam)
        raise RuntimeError(f"Sharpe QP did not converge (KKT residual {res:.3e})")

    z_work = w / w.sum()
    z = np.zeros(r_total)
    group_of = inverse           # original index -> group id
    group_weight = np.zeros(len(reps))
    group_weight[investable] = z_work
    group_size = np.bincount(group_of, minlength=len(reps))
    z = group_weight[group_of] / group_size[group_of]
    z = np.maximum(z, 0.0)
    z /= z.sum()
    with np.errstate(divide="ignore"):
        variance = z @ assets.covariance @ z
        sharpe = (returns @ z - assets.riskless_return) / np.sqrt(variance) \
            if variance > 0 else np.inf
    return SharpeSolution(weights=z, sharpe_value=float(sharpe))


def _round_half_away(x):
    return np.floor(x + 0.5)


def _proportional_counts(z, q, rng):
    """Counts round(gamma z_i) summing to q, gamma found by dichotomy."""
    pos = np.flatnonzero(z > 0)
    zp = z[pos]
    hi = q * len(z) / zp.max()
    total = lambda g: int(_round_half_away(g * zp).sum())
    while total(hi) < q:   # defensive; the analytic bound suffices
        hi *= 2
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if total(mid) >= q:
            hi = mid
        else:
            lo = mid
    gamma = hi
    scaled = gamma * zp
    counts = _round_half_away(scaled).astype(int)
    diff = counts.sum() - q
    if diff != 0:
        frac = scaled - np.floor(scaled)
        margin = np.abs(frac - 0.5)
        tiebreak = rng.random(len(zp))
        if diff > 0:
            adjustable = np.flatnonzero((frac >= 0.5) & (counts > 0))
            order = adjustable[np.lexsort((tiebreak[adjustable],
                                           margin[adjustable]))]
            counts[order[:diff]] -= 1
        else:
            adjustable = np.flatnonzero(frac < 0.5)
            order = adjustable[np.lexsort((tiebreak[adjustable],
                                           margin[adjustable]))]
            counts[order[:-diff]] += 1
    full = np.zeros(len(z), dtype=int)
    full[pos] = counts
    return full, gamma


def allocate(sol, q, mode, seed=0):
    """Turn Sharpe weights into replicate counts summing to q.

    top_q marks the q largest weights once each (random tie-breaks);
    zero-weight assets are eligible through the tie-break, so the batch
    stays distinct whenever at least q assets exist. Only with fewer
    assets than q do the remaining slots fall back to proportional
    allocation over the positive weights. proportional finds the
    smallest gamma with sum round(gamma z_i) = q by dichotomy, rounding
    half away from zero; any residual is repaired on the assets whose
    fractional parts sit closest to 0.5, ties random.
    """
    if q < 1:
        raise ValueError("batch size must be >= 1")
    z = sol.weights
    rng = np.random.default_rng(as_seed_sequence(seed))
    if mode == "top_q":
        counts = np.zeros(len(z), dtype=int)
        if len(z) >= q:
            order = np.lexsort((rng.random(len(z)), -z))
            counts[order[:q]] = 1
        else:
            counts[z > 0] = 1
            extra = q - int(counts.sum())
            if extra:
                more, _ = _proportional_counts(z, extra, rng)
                counts += more
        return BatchAllocation(counts=counts, total=q, gamma=None, mode=mode)
    if mode == "proportional":
        counts, gamma = _proportional_counts(z, q, rng)
        return BatchAllocation(counts=counts, total=q, gamma=gamma, mode=mode)
    raise ValueError(f"unknown allocation mode {mode!r}")


def improvement_threshold(model, noise_present):
    """Plug-in T: best posterior mean under noise, else best observation."""
    if noise_present:
        mean, _, _ = predict(model, model.design.unique_points)
        return float(mean.min())
    return float(model.design.obs_means.min())


def _drop_evaluated(cands, evaluated):
    kept = []
    for c in cands:
        if np.abs(evaluated - c.x).max(axis=1).min() > MERGE_TOL:
            kept.append(c)
    return kept if kept else list(cands)


def qhsri_select(models, q, noise_present, seed=0, candidates=None,
                 n_uniform=None, nsga_pop=500, nsga_gens=100, pi_min=PI_MIN,
                 pnd_min=PND_MIN, keep_max=KEEP_MAX, margin=DEFAULT_MARGIN):
    """One batch-selection round: front search, filtering, Sharpe QP, allocation.

    Returns a SelectionResult whose counts sum to q. ``candidates``
    short-circuits the front search with a precomputed list. Wall-clock
    of the whole round is recorded on the result.
    """
    t0 = time.perf_counter()
    ss_front, ss_alloc = as_seed_sequence(seed).spawn(2)
    if candidates is None:
        candidates = tradeoff_front_search(
            models, noise_present, n_uniform=n_uniform, nsga_pop=nsga_pop,
            nsga_gens=nsga_gens, seed=ss_front)
    cands = list(candidates)
    if not noise_present:
        # deterministic runs never revisit an evaluated design
        cands = _drop_evaluated(cands, models[0].design.unique_points)
    if len(models) == 1:
        threshold = improvement_threshold(models[0], noise_present)
        filtered = probability_improvement_threshold_filter(
            cands, threshold, pi_min=pi_min, keep_max=keep_max)
    else:
        evaluated = models[0].design.unique_points
        means = np.column_stack(
            [predict(m, evaluated)[0] for m in models])
        front_values = means[non_dominated_filter(means)]
        filtered = probability_non_domination_filter(
            cands, front_values, pnd_min=pnd_min, keep_max=keep_max)
    if not filtered:
        filtered = cands

    if len(filtered) == 1:
        # degenerate market: everything lands on the lone candidate
        counts = np.array([q])
        result = SelectionResult(
            designs=filtered[0].x[None, :], counts=counts,
            seconds=time.perf_counter() - t0, sharpe_value=np.nan,
            n_candidates=1, mode="degenerate")
        return result

    assets = build_assets(filtered, margin=margin)
    sol = solve_sharpe(assets)
    mode = "proportional" if noise_present else "top_q"
    alloc = allocate(sol, q, mode, seed=ss_alloc)
    chosen = np.flatnonzero(alloc.counts)
    designs = np.array([filtered[i].x for i in chosen])
    counts = alloc.counts[chosen]
    return SelectionResult(
        designs=designs, counts=counts, seconds=time.perf_counter() - t0,
        sharpe_value=sol.sharpe_value, n_candidates=len(filtered),
        mode=mode, gamma=alloc.gamma)
