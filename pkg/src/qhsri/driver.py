"""Outer batch-optimization loop, baseline strategies, metrics, persistence.

A run alternates GP refits (warm-started) with batch selection and
parallel evaluation. Evaluations commit in design order and noisy draws
are counter-based, so traces are bit-identical under any number of
evaluation threads. Metrics follow the two-track convention: the
observed variant uses the noiseless truth of evaluated designs, the
estimated variant re-reads the GP (best posterior mean, or the
posterior-mean front) and scores its choice against the truth.
"""

import csv
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acquisition import KEEP_MAX, MC_SAMPLES, PI_MIN, PND_MIN, greedy_mc_qei_batch
from .gp import DesignSet, GpFitError, MERGE_TOL, fit, predict
from .pareto import hypervolume, non_dominated_filter, nsga2
from .portfolio import DEFAULT_MARGIN, improvement_threshold, qhsri_select
from .problems import get_problem, observe_one, with_noise
from .sampling import as_seed_sequence, maximin_lhs

STRATEGIES = ("qhsri", "random", "mc_qei")
# fields that define the experiment identity; strategy/seed/threads vary
# between runs that must still be comparable under one hash
IDENTITY_FIELDS = ("problem", "noise_source", "noise_scale", "n_init", "q", "n_max")
WALLCLOCK_COLUMNS = ("selection_seconds", "fit_seconds")
REFERENCE_SEED = 20120229


@dataclass
class ExperimentConfig:
    problem: str
    strategy: str = "qhsri"
    n_init: int = 20
    q: int = 10
    n_max: int = 100
    macro_runs: int = 1
    seed: int = 0
    eval_threads: int = 1
    noise_source: str = None      # problem id whose first objective sets the noise std
    noise_scale: float = 1.0
    kernel: str = "matern52"
    fit_starts: int = 5
    n_uniform: int = None         # default 100 per input dimension
    nsga_pop: int = 500
    nsga_gens: int = 100
    pi_min: float = PI_MIN
    pnd_min: float = PND_MIN
    keep_max: int = KEEP_MAX
    margin: float = DEFAULT_MARGIN
    mc_samples: int = MC_SAMPLES
    mc_pool: int = None           # default 100 per input dimension
    ref_pop: int = 500
    ref_gens: int = 500


@dataclass
class IterationRecord:
    iteration: int
    n: int
    selection_seconds: float
    fit_seconds: float
    designs: np.ndarray           # (k, d)
    counts: np.ndarray            # (k,)
    observed: np.ndarray          # (k, p) mean observation per design
    metrics: dict = field(default_factory=dict)


@dataclass
class ExperimentTrace:
    problem: str
    strategy: str
    config_hash: str
    seed: int
    run_index: int
    metric_names: list
    records: list = field(default_factory=list)
    valid: bool = True
    note: str = ""


def config_hash(config):
    ident = {k: getattr(config, k) for k in IDENTITY_FIELDS}
    blob = json.dumps(ident, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def resolve_problem(config):
    problem = get_problem(config.problem)
    if config.noise_source:
        problem = with_noise(problem, get_problem(config.noise_source),
                             scale=config.noise_scale)
    return problem


def validate_config(config):
    """Resolve the problem and check the config against it; returns the problem."""
    problem = resolve_problem(config)
    _validate(config, problem)
    return problem


def _validate(config, problem):
    if config.strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {config.strategy!r}")
    if config.n_init < problem.dim + 2:
        raise ValueError(f"n_init must be >= d+2 = {problem.dim + 2}")
    if config.q < 1:
        raise ValueError("q must be >= 1")
    if config.n_max < config.n_init + config.q:
        raise ValueError("n_max must cover the initial design plus one batch")
    if config.macro_runs < 1 or config.eval_threads < 1:
        raise ValueError("macro_runs and eval_threads must be >= 1")
    if config.strategy == "mc_qei":
        if problem.n_obj != 1:
            raise ValueError("mc_qei strategy is mono-objective only")
        if config.q > 10:
            raise ValueError("mc_qei strategy capped at q = 10")
    if problem.n_obj > 3:
        raise ValueError("hypervolume metrics support at most 3 objectives")


def initial_design(d, n_init, seed):
    """Maximin-improved LHS in the unit cube, deterministic given seed."""
    return maximin_lhs(n_init, d, np.random.default_rng(as_seed_sequence(seed)))


def _evaluate_batch(problem, designs, counts, x_rows, noise_seed, threads):
    """Evaluate a batch; replicate indices continue existing rep counts.

    Returns rows in design order (replicates adjacent), so results do
    not depend on the thread schedule.
    """
    jobs = []
    for i, x in enumerate(designs):
        if len(x_rows):
            base = int((np.abs(x_rows - x).max(axis=1) <= MERGE_TOL).sum())
        else:
            base = 0
        for j in range(int(counts[i])):
            jobs.append((x, base + j))
    work = lambda job: observe_one(problem, job[0], job[1], noise_seed)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            values = list(ex.map(work, jobs))
    else:
        values = [work(job) for job in jobs]
    new_x = np.array([job[0] for job in jobs])
    return new_x, np.array(values)


def _objective_noise(problem, i):
    def variance(x):
        return problem.noise_sd(np.atleast_2d(x))[:, i] ** 2
    return variance


def _fit_models(problem, x_rows, y_rows, config, warm, seed):
    models = []
    seeds = as_seed_sequence(seed).spawn(problem.n_obj)
    for i in range(problem.n_obj):
        design = DesignSet.from_observations(x_rows, y_rows[:, i])
        noise = _objective_noise(problem, i) if problem.noisy else 0.0
        starts = config.fit_starts if warm[i] is None else max(2, config.fit_starts // 2)
        try:
            model = fit(design, family=config.kernel, noise=noise,
                        n_starts=starts, seed=seeds[i], init=warm[i])
        except GpFitError:
            # escalated-jitter path already ran inside fit; floor the nugget
            model = fit(design, family=config.kernel, noise="estimate",
                        n_starts=config.fit_starts, seed=seeds[i],
                        nugget_bounds=(1e-6, 10.0))
        warm[i] = model.kernel
        models.append(model)
    return models


_REFERENCE_CACHE = {}


def reference_front(problem, pop=500, gens=500, seed=REFERENCE_SEED):
    """NSGA-II reference front, its 20%-margin corner, and its hypervolume.

    Cached per (problem, sizes, seed); the fixed seed keeps separate
    processes consistent.
    """
    key = (problem.name, problem.dim, pop, gens, seed)
    if key not in _REFERENCE_CACHE:
        archive = nsga2(problem.evaluate, problem.dim, pop_size=pop,
                        generations=gens, seed=seed)
        values = archive.values
        span = values.max(axis=0) - values.min(axis=0)
        ref_point = values.max(axis=0) + 0.2 * span
        _REFERENCE_CACHE[key] = (values, ref_point,
                                 hypervolume(values, ref_point))
    return _REFERENCE_CACHE[key]


def _observed_metrics(problem, unique_x, ref_point=None, hv_ref=None):
    truth = problem.evaluate(unique_x)
    if problem.n_obj == 1:
        best = float(truth[:, 0].min())
        out = {"best_observed": best}
        if problem.known_optimum is not None:
            out["gap_observed"] = best - problem.known_optimum
        return out
    front = truth[non_dominated_filter(truth)]
    hv = hypervolume(front, ref_point)
    return {"hv_observed": hv, "hv_diff_observed": hv_ref - hv}


def _estimated_metrics(problem, models, unique_x, ref_point=None, hv_ref=None):
    if problem.n_obj == 1:
        mean, _, _ = predict(models[0], unique_x)
        x_hat = unique_x[int(np.argmin(mean))]
        best = float(problem.evaluate(x_hat[None, :])[0, 0])
        out = {"best_estimated": best}
        if problem.known_optimum is not None:
            out["gap_estimated"] = best - problem.known_optimum
        return out
    means = np.column_stack([predict(m, unique_x)[0] for m in models])
    chosen = unique_x[non_dominated_filter(means)]
    truth = problem.evaluate(chosen)
    front = truth[non_dominated_filter(truth)]
    hv = hypervolume(front, ref_point)
    return {"hv_estimated": hv, "hv_diff_estimated": hv_ref - hv}


def _metric_names(problem):
    if problem.n_obj == 1:
        names = ["best_observed", "best_estimated"]
        if problem.known_optimum is not None:
            names += ["gap_observed", "gap_estimated"]
        return names
    return ["hv_observed", "hv_diff_observed", "hv_estimated", "hv_diff_estimated"]


def _select_batch(config, problem, models, noise_present, seed):
    d = problem.dim
    if config.strategy == "qhsri":
        sel = qhsri_select(
            models, config.q, noise_present, seed=seed,
            n_uniform=config.n_uniform, nsga_pop=config.nsga_pop,
            nsga_gens=config.nsga_gens, pi_min=config.pi_min,
            pnd_min=config.pnd_min, keep_max=config.keep_max,
            margin=config.margin)
        return sel.designs, sel.counts, sel.seconds
    if config.strategy == "random":
        t0 = time.perf_counter()
        designs = np.random.default_rng(seed).uniform(size=(config.q, d))
        return designs, np.ones(config.q, dtype=int), time.perf_counter() - t0
    # greedy MC batch EI baseline
    t0 = time.perf_counter()
    ss_pool, ss_mc = as_seed_sequence(seed).spawn(2)
    pool_n = config.mc_pool or 100 * d
    pool = np.random.default_rng(ss_pool).uniform(size=(pool_n, d))
    threshold = improvement_threshold(models[0], noise_present)
    designs = greedy_mc_qei_batch(models[0], threshold, config.q, pool,
                                  n_samples=config.mc_samples,
                                  seed=int(ss_mc.generate_state(1)[0]))
    return designs, np.ones(config.q, dtype=int), time.perf_counter() - t0


def run_experiment(config, run_seed=None, run_index=0, on_iteration=None):
    """One optimization run; see run_macro for repetition."""
    problem = resolve_problem(config)
    _validate(config, problem)
    noise_present = problem.noisy
    chash = config_hash(config)
    trace = ExperimentTrace(
        problem=config.problem, strategy=config.strategy, config_hash=chash,
        seed=config.seed, run_index=run_index, metric_names=_metric_names(problem))

    ss = as_seed_sequence(config.seed if run_seed is None else run_seed)
    s_init, s_noise, s_loop = ss.spawn(3)
    noise_seed = int(s_noise.generate_state(1)[0])

    x_rows = initial_design(problem.dim, config.n_init, s_init)
    _, y_rows = _evaluate_batch(problem, x_rows, np.ones(len(x_rows), dtype=int),
                                np.empty((0, problem.dim)), noise_seed,
                                config.eval_threads)

    ref_point = hv_ref = None
    if problem.n_obj >= 2:
        _, ref_point, hv_ref = reference_front(problem, config.ref_pop,
                                               config.ref_gens)

    warm = [None] * problem.n_obj
    models = None
    while len(x_rows) + config.q <= config.n_max:
        iteration = len(trace.records) + 1
        s_fit, s_sel = s_loop.spawn(1)[0].spawn(2)
        t0 = time.perf_counter()
        try:
            models = _fit_models(problem, x_rows, y_rows, config, warm, s_fit)
        except (GpFitError, ValueError) as exc:
            trace.valid = False
            trace.note = f"fit failed at iteration {iteration}: {exc}"
            break
        fit_seconds = time.perf_counter() - t0
        if trace.records:
            trace.records[-1].metrics.update(_estimated_metrics(
                problem, models, _unique_designs(x_rows), ref_point, hv_ref))

        designs, counts, selection_seconds = _select_batch(
            config, problem, models, noise_present, s_sel)
        new_x, new_y = _evaluate_batch(problem, designs, counts, x_rows,
                                       noise_seed, config.eval_threads)
        x_rows = np.vstack([x_rows, new_x])
        y_rows = np.vstack([y_rows, new_y])

        observed = _per_design_means(new_y, counts)
        record = IterationRecord(
            iteration=iteration, n=len(x_rows),
            selection_seconds=selection_seconds, fit_seconds=fit_seconds,
            designs=designs, counts=np.asarray(counts, dtype=int),
            observed=observed,
            metrics=_observed_metrics(problem, _unique_designs(x_rows),
                                      ref_point, hv_ref))
        trace.records.append(record)
        if on_iteration is not None:
            on_iteration(trace, record)

    if trace.valid and trace.records:
        try:
            models = _fit_models(problem, x_rows, y_rows, config, warm,
                                 s_loop.spawn(1)[0])
            trace.records[-1].metrics.update(_estimated_metrics(
                problem, models, _unique_designs(x_rows), ref_point, hv_ref))
        except (GpFitError, ValueError) as exc:
            trace.note = f"final refit failed: {exc}"
    return trace


def _unique_designs(x_rows):
    return DesignSet.from_observations(x_rows, np.zeros(len(x_rows))).unique_points


def _per_design_means(new_y, counts):
    out = []
    start = 0
    for c in counts:
        out.append(new_y[start:start + int(c)].mean(axis=0))
        start += int(c)
    return np.array(out)


def run_macro(config, on_iteration=None):
    """All macro-runs of a config, each with an independent child seed."""
    children = as_seed_sequence(config.seed).spawn(config.macro_runs)
    return [run_experiment(config, run_seed=child, run_index=idx,
                           on_iteration=on_iteration)
            for idx, child in enumerate(children)]


def optimality_gap(trace, reference_value=None):
    """(observed, estimated) gap series for a mono-objective trace.

    Without a reference the series are relative to the best observed
    value in this trace.
    """
    best = np.array([r.metrics["best_observed"] for r in trace.records])
    est = np.array([r.metrics.get("best_estimated", np.nan)
                    for r in trace.records])
    if reference_value is None:
        reference_value = best.min()
    return best - reference_value, est - reference_value


def hypervolume_difference(trace, reference_hv=None):
    """(observed, estimated) hypervolume-difference series for an MO trace."""
    if reference_hv is None:
        return (np.array([r.metrics["hv_diff_observed"] for r in trace.records]),
                np.array([r.metrics.get("hv_diff_estimated", np.nan)
                          for r in trace.records]))
    obs = np.array([r.metrics["hv_observed"] for r in trace.records])
    est = np.array([r.metrics.get("hv_estimated", np.nan)
                    for r in trace.records])
    return reference_hv - obs, reference_hv - est


def aggregate(traces):
    """Per-strategy, per-iteration quantile summary.

    Returns (rows, columns): median/5%/95% of every metric plus the mean
    selection wall-clock, one row per (strategy, iteration).
    """
    if not traces:
        raise ValueError("no traces to aggregate")
    metric_names = traces[0].metric_names
    columns = ["strategy", "iteration", "n", "n_traces", "mean_selection_seconds"]
    for name in metric_names:
        columns += [f"median_{name}", f"q05_{name}", f"q95_{name}"]
    rows = []
    strategies = sorted({t.strategy for t in traces})
    for strategy in strategies:
        group = [t for t in traces if t.strategy == strategy and t.valid]
        depth = max(len(t.records) for t in group)
        for i in range(depth):
            present = [t.records[i] for t in group if len(t.records) > i]
            row = {
                "strategy": strategy,
                "iteration": present[0].iteration,
                "n": present[0].n,
                "n_traces": len(present),
                "mean_selection_seconds": float(
                    np.mean([r.selection_seconds for r in present])),
            }
            for name in metric_names:
                vals = np.array([r.metrics.get(name, np.nan) for r in present])
                vals = vals[np.isfinite(vals)]
                if len(vals):
                    q05, med, q95 = np.quantile(vals, [0.05, 0.5, 0.95])
                else:
                    q05 = med = q95 = np.nan
                row[f"median_{name}"] = med
                row[f"q05_{name}"] = q05
                row[f"q95_{name}"] = q95
            rows.append(row)
    return rows, columns


def _meta_line(trace):
    return (f"# config_hash={trace.config_hash} seed={trace.seed} "
            f"strategy={trace.strategy} problem={trace.problem} "
            f"run={trace.run_index} valid={int(trace.valid)}")


def write_trace(trace, out_dir):
    """Write the per-iteration CSV and the batch-membership sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{trace.strategy}_{trace.run_index:03d}"
    trace_path = out / f"trace_{stem}.csv"
    columns = ["iteration", "n", "selection_seconds", "fit_seconds"]
    columns += trace.metric_names
    with open(trace_path, "w", newline="") as fh:
        fh.write(_meta_line(trace) + "\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in trace.records:
            row = [r.iteration, r.n, repr(r.selection_seconds),
                   repr(r.fit_seconds)]
            row += [repr(float(r.metrics.get(name, np.nan)))
                    for name in trace.metric_names]
            writer.writerow(row)

    batch_path = out / f"batch_{stem}.csv"
    with open(batch_path, "w", newline="") as fh:
        fh.write(_meta_line(trace) + "\n")
        writer = csv.writer(fh)
        d = trace.records[0].designs.shape[1] if trace.records else 0
        p = trace.records[0].observed.shape[1] if trace.records else 0
        writer.writerow(["iteration"] + [f"x{j + 1}" for j in range(d)]
                        + ["replicates"] + [f"y{j + 1}" for j in range(p)])
        for r in trace.records:
            for i in range(len(r.designs)):
                writer.writerow([r.iteration]
                                + [repr(float(v)) for v in r.designs[i]]
                                + [int(r.counts[i])]
                                + [repr(float(v)) for v in r.observed[i]])
    return trace_path, batch_path


def write_summary(rows, columns, path, meta=None):
    with open(path, "w", newline="") as fh:
        if meta:
            fh.write(meta + "\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row.get(c)) for c in columns])
    return path


def _format_cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def read_trace(path):
    """Parse a trace CSV: (meta dict, column list, float rows)."""
    with open(path) as fh:
        first = fh.readline().strip()
        if not first.startswith("#"):
            raise ValueError(f"{path}: missing metadata line")
        meta = dict(token.split("=", 1) for token in first[1:].split())
        reader = csv.reader(fh)
        columns = next(reader)
        rows = [[float(cell) for cell in row] for row in reader if row]
    return meta, columns, np.array(rows) if rows else np.empty((0, len(columns)))
