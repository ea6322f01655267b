"""Command-line front end: run experiments, suggest one batch, summarize traces.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

import argparse
import csv
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import yaml

from .driver import (
    ExperimentConfig,
    aggregate,
    read_trace,
    run_experiment,
    validate_config,
    write_summary,
    write_trace,
)
from .gp import MERGE_TOL, DesignSet, GpFitError, fit
from .portfolio import qhsri_select
from .sampling import as_seed_sequence


class ConfigError(Exception):
    pass


_NOISE_KEYS = {"source": "noise_source", "scale": "noise_scale"}


def _key_lines(text):
    """Best-effort map from config keys (dotted for nested) to line numbers."""
    lines = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if not isinstance(root, yaml.MappingNode):
        return lines
    for key_node, value_node in root.value:
        lines[key_node.value] = key_node.start_mark.line + 1
        if isinstance(value_node, yaml.MappingNode):
            for sub_key, _ in value_node.value:
                lines[f"{key_node.value}.{sub_key.value}"] = \
                    sub_key.start_mark.line + 1
    return lines


def _flatten(path, data, key_lines):
    """YAML mapping -> ExperimentConfig kwargs, rejecting unknown keys."""
    known = {f.name for f in fields(ExperimentConfig)}
    known -= {"noise_source", "noise_scale"}     # reachable via the noise block
    kwargs = {}
    for key, value in data.items():
        where = f"{path}:{key_lines.get(key, '?')}"
        if key == "noise":
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: noise must be a mapping")
            for sub, sub_value in value.items():
                sub_where = f"{path}:{key_lines.get(f'noise.{sub}', '?')}"
                if sub not in _NOISE_KEYS:
                    raise ConfigError(f"{sub_where}: unknown key noise.{sub}")
                kwargs[_NOISE_KEYS[sub]] = sub_value
        elif key in known:
            kwargs[key] = value
        else:
            raise ConfigError(f"{where}: unknown key {key}")
    return kwargs


def load_config(path, overrides=(), seed=None):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}")
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    kwargs = _flatten(path, data, _key_lines(text))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        value = yaml.safe_load(raw)
        if key.startswith("noise."):
            sub = key[len("noise."):]
            if sub not in _NOISE_KEYS:
                raise ConfigError(f"--set: unknown key {key}")
            kwargs[_NOISE_KEYS[sub]] = value
        elif key in {f.name for f in fields(ExperimentConfig)}:
            kwargs[key] = value
        else:
            raise ConfigError(f"--set: unknown key {key}")
    if "problem" not in kwargs:
        raise ConfigError(f"{path}: missing required key: problem")
    try:
        config = ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}")
    if seed is not None:
        config = replace(config, seed=seed)
    return config


def _progress(trace, record):
    metric = trace.metric_names[0]
    value = record.metrics.get(metric, float("nan"))
    print(f"[{trace.strategy}/{trace.run_index:03d}] iteration {record.iteration} "
          f"n={record.n} {metric}={value:.6g} "
          f"selection={record.selection_seconds:.3f}s", flush=True)


def cmd_run(args):
    config = load_config(args.config, overrides=args.set, seed=args.seed)
    try:
        validate_config(config)
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc))
    if args.set:
        print("# overrides: " + " ".join(args.set))
    print(f"# problem={config.problem} strategy={config.strategy} "
          f"n_init={config.n_init} q={config.q} n_max={config.n_max} "
          f"macro_runs={config.macro_runs} seed={config.seed}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traces = []
    children = as_seed_sequence(config.seed).spawn(config.macro_runs)
    for idx, child in enumerate(children):
        trace = run_experiment(config, run_seed=child, run_index=idx,
                               on_iteration=_progress)
        trace_path, _ = write_trace(trace, out)
        if not trace.valid:
            print(f"run {idx} aborted: {trace.note}; partial trace at "
                  f"{trace_path}", file=sys.stderr)
            return 1
        traces.append(trace)
    rows, columns = aggregate(traces)
    meta = (f"# config_hash={traces[0].config_hash} seed={config.seed} "
            f"problem={config.problem}")
    summary = write_summary(rows, columns, out / "summary.csv", meta=meta)
    print(f"# wrote {len(traces)} traces and {summary}")
    return 0


def _read_data_csv(path, d_hint=None):
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read data: {exc}")
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty file")
        x_cols = [i for i, c in enumerate(header) if c.strip().startswith("x")]
        y_cols = [i for i, c in enumerate(header) if c.strip().startswith("y")]
        if not x_cols or not y_cols:
            raise ConfigError(f"{path}: header must name x1..xd and y1..yp columns")
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                xs.append([float(row[i]) for i in x_cols])
                ys.append([float(row[i]) for i in y_cols])
            except (ValueError, IndexError):
                raise ConfigError(f"{path}: malformed row {lineno}")
    x = np.array(xs)
    y = np.array(ys)
    if len(x) == 0:
        raise ConfigError(f"{path}: no data rows")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ConfigError(f"{path}: inputs must be pre-scaled to [0, 1]")
    return x, y


def cmd_suggest(args):
    if args.q < 1:
        raise ConfigError("--q must be >= 1")
    x, y = _read_data_csv(args.data)
    d = x.shape[1]
    seed = 0 if args.seed is None else args.seed
    noise = "estimate" if args.noisy else 0.0
    models = []
    for i in range(y.shape[1]):
        design = DesignSet.from_observations(x, y[:, i])
        if design.n_unique < d + 2:
            raise ConfigError(
                f"{args.data}: need at least d+2={d + 2} unique designs, "
                f"got {design.n_unique}")
        try:
            models.append(fit(design, noise=noise,
                              seed=as_seed_sequence(seed).spawn(y.shape[1])[i]))
        except GpFitError as exc:
            print(f"model fit failed: {exc}", file=sys.stderr)
            return 1
    sel = qhsri_select(models, args.q, noise_present=bool(args.noisy),
                       seed=as_seed_sequence(seed).spawn(y.shape[1] + 1)[-1])
    out_path = Path(args.out) if args.out else Path("suggested_batch.csv")
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j + 1}" for j in range(d)]
                        + ["replicates", "is_replication"])
        for row, count in zip(sel.designs, sel.counts):
            existing = int(np.any(np.abs(x - row).max(axis=1) <= MERGE_TOL))
            writer.writerow([repr(float(v)) for v in row]
                            + [int(count), existing])
    print(f"# wrote {int(np.sum(sel.counts))} evaluations over "
          f"{len(sel.designs)} designs to {out_path}")
    return 0


def cmd_report(args):
    trace_dir = Path(args.traces)
    paths = sorted(trace_dir.glob("trace_*.csv"))
    if not paths:
        raise ConfigError(f"{trace_dir}: no trace files found")
    parsed = []
    for path in paths:
        try:
            parsed.append(read_trace(path))
        except (ValueError, OSError) as exc:
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
    if not parsed:
        print("no valid traces", file=sys.stderr)
        return 1
    hashes = {meta.get("config_hash") for meta, _, _ in parsed}
    if len(hashes) > 1:
        print(f"warning: mixed config hashes {sorted(hashes)}", file=sys.stderr)

    fixed = ("iteration", "n", "selection_seconds", "fit_seconds")
    metric_names = [c for c in parsed[0][1] if c not in fixed]
    columns = ["strategy", "iteration", "n", "n_traces", "mean_selection_seconds"]
    for name in metric_names:
        columns += [f"median_{name}", f"q05_{name}", f"q95_{name}"]
    rows = []
    strategies = sorted({meta.get("strategy", "?") for meta, _, _ in parsed})
    for strategy in strategies:
        group = [(cols, data) for meta, cols, data in parsed
                 if meta.get("strategy") == strategy]
        depth = max(len(data) for _, data in group)
        for i in range(depth):
            present = [(cols, data[i]) for cols, data in group if len(data) > i]
            cols0, row0 = present[0]
            row = {
                "strategy": strategy,
                "iteration": int(row0[cols0.index("iteration")]),
                "n": int(row0[cols0.index("n")]),
                "n_traces": len(present),
                "mean_selection_seconds": float(np.mean(
                    [r[c.index("selection_seconds")] for c, r in present])),
            }
            for name in metric_names:
                vals = np.array([r[c.index(name)] for c, r in present
                                 if name in c])
                vals = vals[np.isfinite(vals)]
                if len(vals):
                    q05, med, q95 = np.quantile(vals, [0.05, 0.5, 0.95])
                else:
                    q05 = med = q95 = np.nan
                row[f"median_{name}"] = med
                row[f"q05_{name}"] = q05
                row[f"q95_{name}"] = q95
            rows.append(row)
    write_summary(rows, columns, args.out)
    print(f"# wrote {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qhsri",
        description="Batch Bayesian optimization with Sharpe-ratio allocation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run experiments from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p_run.set_defaults(func=cmd_run)

    p_sug = sub.add_parser("suggest", help="suggest one batch from a data CSV")
    p_sug.add_argument("--data", required=True)
    p_sug.add_argument("--q", type=int, required=True)
    p_sug.add_argument("--noisy", action="store_true")
    p_sug.add_argument("--out", default=None)
    p_sug.add_argument("--seed", type=int, default=None)
    p_sug.set_defaults(func=cmd_suggest)

    p_rep = sub.add_parser("report", help="aggregate a directory of traces")
    p_rep.add_argument("--traces", required=True)
    p_rep.add_argument("--out", required=True)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:   # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
