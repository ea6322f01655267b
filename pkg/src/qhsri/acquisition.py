"""Candidate generation and scoring for batch selection.

Candidates live on the exploration/exploitation trade-off front: GP
posterior means are minimized while the averaged relative standard
deviation (and, under noise, the per-observation variance reduction) is
maximized. Classic improvement criteria and a Monte-Carlo qEI baseline
are provided for reference and benchmarking.
"""

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .gp import GpFitError, _chol_with_jitter, predict, predict_joint, variance_reduction
from .pareto import non_dominated_filter, nsga2
from .sampling import as_seed_sequence

PI_MIN = 1e-6
PND_MIN = 1e-6
KEEP_MAX = 2000
MC_SAMPLES = 10_000
MC_BATCH_MAX = 10


@dataclass
class Candidate:
    """One scored design; trade-off coordinates derive from these fields."""

    x: np.ndarray                       # (d,) in the unit hypercube
    means: np.ndarray                   # (p,) posterior means
    stds: np.ndarray                    # (p,) latent predictive stds
    avg_std: float                      # mean over objectives of std / process std
    var_reduction: np.ndarray = None    # (p,), only when observations are noisy
    pi_or_pnd: float = 1.0


def ei_from_moments(mean, std, threshold):
    """EI = (T - m) Phi(u) + s phi(u), u = (T - m)/s; max(T - m, 0) at s = 0."""
    return gei_from_moments(mean, std, threshold, 1)


def gei_from_moments(mean, std, threshold, g):
    """E[max(0, T - Y)^g] for Y ~ N(mean, std^2) by the Phi/phi recursion.

    g = 0 is the probability of improvement, g = 1 plain EI. Degenerate
    std = 0 reduces to the indicator times (T - mean)^g.
    """
    if g < 0 or g != int(g):
        raise ValueError("power must be a nonnegative integer")
    g = int(g)
    m, s, t = np.broadcast_arrays(
        np.asarray(mean, dtype=float), np.asarray(std, dtype=float), threshold
    )
    out = np.zeros(m.shape)
    degen = s <= 0
    if degen.any():
        gain = t[degen] - m[degen]
        out[degen] = np.where(gain > 0, gain**g, 0.0)
    live = ~degen
    if live.any():
        u = (t[live] - m[live]) / s[live]
        cur = norm.cdf(u)   # order 0
        if g >= 1:
            prev, cur = cur, u * cur + norm.pdf(u)
            for k in range(2, g + 1):
                prev, cur = cur, u * cur + (k - 1) * prev
        out[live] = s[live] ** g * cur
    return out if out.shape else float(out)


def expected_improvement(model, x, threshold):
    mean, var, _ = predict(model, np.atleast_2d(x))
    return ei_from_moments(mean, np.sqrt(var), threshold)


def generalized_ei(model, x, threshold, g):
    mean, var, _ = predict(model, np.atleast_2d(x))
    return gei_from_moments(mean, np.sqrt(var), threshold, g)


def lower_confidence_bound(model, x, beta=2.0):
    """m - beta * s, the minimization-convention confidence bound."""
    mean, var, _ = predict(model, np.atleast_2d(x))
    return mean - beta * np.sqrt(var)


def _score(models, x, noise_present):
    """Posterior summaries for every row of ``x`` under each objective model."""
    x = np.atleast_2d(x)
    p = len(models)
    means = np.empty((len(x), p))
    stds = np.empty((len(x), p))
    for i, model in enumerate(models):
        m, var, _ = predict(model, x)
        means[:, i] = m
        stds[:, i] = np.sqrt(var)
    process_stds = np.array([np.sqrt(m.kernel.process_variance) for m in models])
    avg_std = (stds / process_stds).mean(axis=1)
    vr = None
    if noise_present:
        vr = np.column_stack([variance_reduction(m, x) for m in models])
    return means, stds, avg_std, vr


def tradeoff_values(cands):
    """Stack candidates into the minimized trade-off matrix.

    Columns are the p posterior means, the negated averaged relative
    std, and (when present) the negated per-objective variance
    reductions.
    """
    means = np.array([c.means for c in cands])
    avg = np.array([[-c.avg_std] for c in cands])
    cols = [means, avg]
    if cands[0].var_reduction is not None:
        cols.append(-np.array([c.var_reduction for c in cands]))
    return np.hstack(cols)


def _make_candidates(x, means, stds, avg_std, vr):
    return [
        Candidate(
            x=x[i],
            means=means[i],
            stds=stds[i],
            avg_std=float(avg_std[i]),
            var_reduction=None if vr is None else vr[i],
        )
        for i in range(len(x))
    ]


def tradeoff_front_search(models, noise_present, n_uniform=None, nsga_pop=500,
                          nsga_gens=100, seed=0):
    """Non-dominated candidates of the trade-off objectives.

    Uniform samples (default 100 per input dimension) and the archive of
    an NSGA-II run over the same objectives are unioned and re-filtered.
    Deterministic given ``seed``.
    """
    d = models[0].design.dim
    if n_uniform is None:
        n_uniform = 100 * d
    ss_uniform, ss_nsga = as_seed_sequence(seed).spawn(2)

    def objectives(x):
        means, _, avg_std, vr = _score(models, x, noise_present)
        cols = [means, -avg_std[:, None]]
        if vr is not None:
            cols.append(-vr)
        return np.hstack(cols)

    x = np.random.default_rng(ss_uniform).uniform(size=(n_uniform, d))
    archive = nsga2(objectives, d, pop_size=nsga_pop, generations=nsga_gens,
                    seed=ss_nsga)
    if len(archive):
        x = np.vstack([x, archive.designs])
    # exact duplicates would re-enter as split-weight twin assets downstream
    _, first = np.unique(np.round(x, 12), axis=0, return_index=True)
    x = x[np.sort(first)]
    means, stds, avg_std, vr = _score(models, x, noise_present)
    cols = [means, -avg_std[:, None]]
    if vr is not None:
        cols.append(-vr)
    keep = non_dominated_filter(np.hstack(cols))
    return _make_candidates(
        x[keep], means[keep], stds[keep], avg_std[keep],
        None if vr is None else vr[keep],
    )


def _truncate(cands, scores, score_min, keep_max):
    for c, v in zip(cands, scores):
        c.pi_or_pnd = float(v)
    kept = [c for c in cands if c.pi_or_pnd >= score_min]
    if not kept:   # degenerate: keep the single best rather than nothing
        kept = [cands[int(np.argmax(scores))]]
    if len(kept) > keep_max:
        order = np.argsort([-c.pi_or_pnd for c in kept], kind="stable")
        kept = [kept[i] for i in order[:keep_max]]
    return kept


def probability_improvement_threshold_filter(cands, threshold, pi_min=PI_MIN,
                                             keep_max=KEEP_MAX):
    """Drop mono-objective candidates whose improvement probability is negligible."""
    m = np.array([c.means[0] for c in cands])
    s = np.array([c.stds[0] for c in cands])
    pi = gei_from_moments(m, s, threshold, 0)
    return _truncate(cands, pi, pi_min, keep_max)


def _pnd_values(means, stds, front_values):
    if len(front_values) == 0:
        return np.ones(len(means))
    diff = means[:, None, :] - front_values[None, :, :]
    s = stds[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(s > 0, diff / np.where(s > 0, s, 1.0),
                     np.where(diff >= 0, np.inf, -np.inf))
    dominated_by = norm.cdf(u).prod(axis=2)
    return (1.0 - dominated_by).prod(axis=1)


def probability_non_domination(models, x, front_values):
    """Probability that no front member dominates the prediction at ``x``.

    Independence approximation across objectives and front members;
    front_values is an (f, p) array, empty meaning probability 1.
    """
    means, stds, _, _ = _score(models, np.atleast_2d(x), False)
    front_values = np.asarray(front_values, dtype=float).reshape(-1, len(models))
    return float(_pnd_values(means, stds, front_values)[0])


def probability_non_domination_filter(cands, front_values, pnd_min=PND_MIN,
                                      keep_max=KEEP_MAX):
    means = np.array([c.means for c in cands])
    stds = np.array([c.stds for c in cands])
    pnd = _pnd_values(means, stds, np.asarray(front_values, dtype=float))
    return _truncate(cands, pnd, pnd_min, keep_max)


def mc_qei(model, batch, threshold, n_samples=MC_SAMPLES, seed=0):
    """Monte-Carlo batch EI, E[max(0, T - min_j Y_j)], with standard error.

    Samples the joint latent posterior of the batch using antithetic
    pairs. Intended as a baseline; batches are capped at 10 points.
    """
    x = np.atleast_2d(batch)
    if len(x) > MC_BATCH_MAX:
        raise ValueError("MC batch EI capped at 10 points")
    mean, cov = predict_joint(model, x)
    factor = _chol_with_jitter(cov, model.kernel.process_variance)
    if factor is None:
        raise GpFitError("joint batch covariance not positive definite")
    chol, _ = factor
    half = max(n_samples // 2, 1)
    z = np.random.default_rng(seed).standard_normal((half, len(x)))
    z = np.vstack([z, -z])
    improvement = np.maximum(threshold - (mean + z @ chol.T).min(axis=1), 0.0)
    pair_means = 0.5 * (improvement[:half] + improvement[half:])
    se = pair_means.std(ddof=1) / np.sqrt(half) if half > 1 else np.inf
    return float(improvement.mean()), float(se)


def greedy_mc_qei_batch(model, threshold, q, pool, n_samples=MC_SAMPLES, seed=0):
    """Greedy batch construction maximizing MC qEI one point at a time.

    Every round scores each remaining pool candidate appended to the
    current batch with a shared seed (common random numbers), then
    commits the argmax. Cost grows linearly in q and the pool size.
    """
    pool = np.atleast_2d(pool)
    round_seeds = np.random.SeedSequence(seed).generate_state(q)
    chosen = []
    available = list(range(len(pool)))
    for j in range(q):
        prefix = pool[chosen] if chosen else np.empty((0, pool.shape[1]))
        best_idx, best_val = None, -np.inf
        for i in available:
            val, _ = mc_qei(model, np.vstack([prefix, pool[i][None, :]]),
                            threshold, n_samples=n_samples,
                            seed=int(round_seeds[j]))
            if val > best_val:
                best_idx, best_val = i, val
        chosen.append(best_idx)
        available.remove(best_idx)
    return pool[chosen]
