"""Experiment orchestration: configs, seeded runs, sweeps, ablations, output.

A config is a YAML mapping. Every run for a given (scenario point, seed)
replays one materialized stream, so all algorithms see identical rounds.
"""
from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import os
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .datasets import DATASET_KINDS, DatasetSpec, load_stream
from .environments import ConfigError, ScenarioConfig, Stream, generate
from .learners import AlgoConfig, run
from .metrics import (RunTrace, aggregate, detection_stats, hindsight_optimum,
                      scaling_exponent, static_regret, true_edges)

log = logging.getLogger(__name__)

SCENARIO_AXES = ("delta_c", "period", "K", "T", "d", "noise_sigma", "B0", "drop_width")
ALGO_AXES = ("window", "gamma", "rho", "c1", "eps", "theta_period")
SWEEP_AXES = SCENARIO_AXES + ALGO_AXES
MECHANISMS = ("adaptive_beta", "reset", "periodic")
DEFAULT_ALGORITHMS = ("pd_fixed", "vq_oco", "sapd")


@dataclass
class OutputConfig:
    dir: Optional[str] = None
    write_table: bool = True
    write_traces: bool = False
    write_manifest: bool = True


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    ``scenarios`` lists scenario mappings (synthetic keys of
    :class:`ScenarioConfig`, or dataset keys of :class:`DatasetSpec` with
    ``kind`` in electricity/traffic/ett). ``sweep`` maps an axis to a list of
    values and is crossed with every scenario.
    """

    name: str = "experiment"
    scenarios: List[dict] = field(default_factory=lambda: [{"kind": "smooth"}])
    algorithms: List[dict] = field(default_factory=lambda: [{"name": n} for n in DEFAULT_ALGORITHMS])
    seeds: List[int] = field(default_factory=lambda: list(range(10)))
    master_seed: int = 0
    sweep: Dict[str, list] = field(default_factory=dict)
    horizons: List[int] = field(default_factory=lambda: [1000, 3000, 10000, 30000])
    ablations: List[str] = field(default_factory=lambda: list(MECHANISMS))
    regret: bool = True
    workers: int = 1
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        if isinstance(self.output, dict):
            self.output = _build(OutputConfig, self.output, "output")
        if isinstance(self.scenarios, dict):
            self.scenarios = [self.scenarios]
        self.validate()

    def validate(self) -> None:
        if not self.algorithms:
            raise ConfigError("at least one algorithm is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.scenarios:
            raise ConfigError("at least one scenario is required")
        for axis, values in self.sweep.items():
            if axis not in SWEEP_AXES:
                raise ConfigError(f"unknown sweep axis {axis!r}; valid axes: {list(SWEEP_AXES)}")
            if not isinstance(values, (list, tuple)) or not values:
                raise ConfigError(f"sweep axis {axis!r} needs a non-empty list")
        for m in self.ablations:
            if m not in MECHANISMS:
                raise ConfigError(f"unknown ablation {m!r}; valid: {list(MECHANISMS)}")
        for sc in self.scenarios:
            scenario_from_dict(sc)
        for a in self.algorithms:
            AlgoConfig.from_dict(a)

    def to_dict(self) -> dict:
        out = {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}
        out["output"] = {f.name: getattr(self.output, f.name) for f in fields(OutputConfig)}
        return out


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys {sorted(unknown)}; valid keys: {sorted(known)}")
    return cls(**data)


def scenario_from_dict(data: dict):
    data = dict(data)
    kind = data.get("kind", data.get("class", "smooth"))
    if kind in DATASET_KINDS:
        data.pop("class", None)
        data["kind"] = kind
        return DatasetSpec.from_dict(data)
    return ScenarioConfig.from_dict(data)


# ------------------------------------------------------------ config files

def config_keys() -> Dict[str, object]:
    """Every dotted config key with its default, for help text."""
    keys: Dict[str, object] = {}
    base = ExperimentConfig()
    for f in fields(ExperimentConfig):
        if f.name in ("output", "scenarios", "algorithms"):
            continue
        keys[f.name] = getattr(base, f.name)
    for f in fields(OutputConfig):
        keys[f"output.{f.name}"] = getattr(base.output, f.name)
    for f in fields(ScenarioConfig):
        keys[f"scenarios[].{f.name}"] = f.default
    for f in fields(DatasetSpec):
        default = f.default if f.default is not f.default_factory else None
        keys[f"scenarios[].{f.name} (datasets)"] = default
    for f in fields(AlgoConfig):
        keys[f"algorithms[].{f.name}"] = f.default
    return keys


def parse_override(text: str):
    """Split ``dotted.key=value``; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in override {text!r}: {exc}") from None
    return key, value


def apply_override(data: dict, key: str, value) -> None:
    """Set a dotted key. A list element is addressed by index
    (``algorithms.0.c1``); a field name applied to a list sets it on every
    element (``scenarios.T=1000``)."""
    parts = key.split(".")
    node = data
    for i, part in enumerate(parts[:-1]):
        if isinstance(node, list):
            if part.isdigit():
                node = node[int(part)]
                continue
            rest = ".".join(parts[i:])
            for item in node:
                apply_override(item, rest, value)
            return
        if part not in node or node[part] is None:
            node[part] = {}
        node = node[part]
    last = parts[-1]
    if isinstance(node, list):
        if last.isdigit():
            node[int(last)] = value
        else:
            for item in node:
                item[last] = value
    else:
        node[last] = value


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                loaded = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = loaded or {}
    for text in overrides:
        key, value = parse_override(text)
        top = key.split(".")[0]
        if top in ("scenarios", "algorithms") and top not in data:
            data[top] = copy.deepcopy(getattr(ExperimentConfig(), top))
        apply_override(data, key, value)
    return config_from_dict(data)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    if "scenario" in data:
        data["scenarios"] = [data.pop("scenario")]
    try:
        return _build(ExperimentConfig, data, "experiment")
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ------------------------------------------------------------ seeding / streams

def make_stream(scenario, seed_index: int, master_seed: int = 0) -> Stream:
    """Materialize the stream for one (scenario, seed) pair."""
    if isinstance(scenario, DatasetSpec):
        stream, _ = load_stream(scenario)
        return stream
    return generate(scenario, master_seed=master_seed, seed_index=seed_index)


def expand_points(cfg: ExperimentConfig) -> List[dict]:
    """Cartesian product of scenarios and sweep axes.

    Each point is ``{"scenario": obj, "algo_overrides": {...}, "params": {...}}``.
    """
    axes = sorted(cfg.sweep)
    grid = list(itertools.product(*(cfg.sweep[a] for a in axes))) if axes else [()]
    points = []
    for sc in cfg.scenarios:
        for combo in grid:
            sc_data = dict(sc)
            algo_over = {}
            params = {}
            for axis, value in zip(axes, combo):
                params[axis] = value
                if axis in SCENARIO_AXES:
                    sc_data[axis] = value
                else:
                    algo_over[axis] = value
            scenario = scenario_from_dict(sc_data)
            points.append({"scenario": scenario, "algo_overrides": algo_over, "params": params})
    return points


def scenario_label(scenario) -> str:
    if isinstance(scenario, DatasetSpec):
        return f"{scenario.kind}-T{scenario.T}-d{scenario.d}"
    return scenario.scenario_id()


# ------------------------------------------------------------ results

@dataclass
class RunResult:
    point: int
    seed: int
    algorithm: str
    loss: float = float("nan")
    violation: float = float("nan")
    regret: Optional[float] = None
    runtime: float = 0.0
    K_hat: Optional[int] = None
    P_hat: Optional[int] = None
    false_positives: Optional[int] = None
    mean_delay: Optional[float] = None
    entries: Optional[int] = None
    exits: Optional[int] = None
    fingerprint: str = ""
    error: Optional[str] = None
    trace: Optional[RunTrace] = None


TABLE_COLUMNS = ("scenario", "algorithm", "params", "n", "loss_mean", "loss_se",
                 "violation_mean", "violation_se", "regret_mean", "regret_se",
                 "K_hat", "P_hat", "false_positives", "mean_delay", "runtime", "errors")


@dataclass
class ResultTable:
    rows: List[dict] = field(default_factory=list)
    columns: Sequence[str] = TABLE_COLUMNS

    def __len__(self):
        return len(self.rows)

    def lookup(self, scenario: Optional[str] = None, algorithm: Optional[str] = None) -> List[dict]:
        return [r for r in self.rows
                if (scenario is None or r["scenario"] == scenario)
                and (algorithm is None or r["algorithm"] == algorithm)]

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.columns), extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt_cell(r.get(k)) for k in self.columns})

    def format_text(self) -> str:
        """Aligned text table; ``*`` marks the lowest mean violation per scenario point."""
        best = {}
        for r in self.rows:
            key = (r["scenario"], r["params"])
            v = r["violation_mean"]
            if v == v and (key not in best or v < best[key]):
                best[key] = v
        head = ["scenario", "params", "algorithm", "n", "violation", "loss", "K_hat", "P_hat"]
        lines = []
        for r in self.rows:
            key = (r["scenario"], r["params"])
            mark = "*" if r["violation_mean"] == best.get(key) else " "
            lines.append([
                r["scenario"], r["params"] or "-", r["algorithm"], str(r["n"]),
                _pm(r["violation_mean"], r["violation_se"]) + mark,
                _pm(r["loss_mean"], r["loss_se"]),
                str(_fmt_cell(r.get("K_hat"))) or "-", str(_fmt_cell(r.get("P_hat"))) or "-",
            ])
        widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h) for i, h in enumerate(head)]
        out = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
        out.append("  ".join("-" * w for w in widths))
        out += ["  ".join(c.ljust(w) for c, w in zip(l, widths)) for l in lines]
        return "\n".join(out)


def _pm(mean, se) -> str:
    if mean != mean:
        return "nan"
    return f"{mean:.1f}" if se is None else f"{mean:.1f} ± {se:.1f}"


def _fmt_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


@dataclass
class ExperimentResult:
    table: ResultTable
    runs: List[RunResult]
    points: List[dict]
    config: ExperimentConfig

    def traces(self, point: int = 0, algorithm: Optional[str] = None) -> Dict[tuple, RunTrace]:
        return {(r.seed, r.algorithm): r.trace for r in self.runs
                if r.point == point and r.trace is not None
                and (algorithm is None or r.algorithm == algorithm)}

    @property
    def errors(self) -> List[RunResult]:
        return [r for r in self.runs if r.error]


# ------------------------------------------------------------ execution

def _algo_configs(cfg: ExperimentConfig, overrides: dict) -> List[AlgoConfig]:
    # swept algorithm knobs belong to SA-PD; the baselines keep their own c1
    out = []
    for a in cfg.algorithms:
        data = dict(a)
        if data.get("name", "sapd") == "sapd":
            data.update(overrides)
        else:
            data.update({k: v for k, v in overrides.items() if k != "c1"})
        out.append(AlgoConfig.from_dict(data))
    return out


def _run_task(task) -> List[RunResult]:
    """Run every algorithm on one (point, seed) stream."""
    point_idx, seed, scenario, algos, master_seed, want_regret, keep_traces = task
    results = []
    try:
        stream = make_stream(scenario, seed, master_seed)
    except Exception as exc:  # record and continue
        return [RunResult(point_idx, seed, a.display_name, error=f"stream: {exc!r}") for a in algos]
    comparator = None
    if want_regret:
        try:
            comparator = hindsight_optimum(stream)
        except Exception as exc:
            log.warning("comparator failed for %s: %s", stream.name, exc)
    edges = true_edges(stream)
    fp = stream.fingerprint()
    for algo in algos:
        res = RunResult(point_idx, seed, algo.display_name, fingerprint=fp)
        t0 = time.perf_counter()
        try:
            trace = run(stream, algo)
        except Exception as exc:
            res.error = f"{type(exc).__name__}: {exc}"
            res.runtime = time.perf_counter() - t0
            results.append(res)
            continue
        res.runtime = time.perf_counter() - t0
        res.loss = trace.total_loss
        res.violation = trace.total_violation
        if comparator is not None:
            res.regret = static_regret(trace, stream, comparator)
        if algo.name == "sapd":
            res.K_hat = trace.info["K_hat"]
            res.P_hat = trace.info["P_hat"]
            st = detection_stats(trace.flagged, edges)
            res.false_positives = st.false_positives
            res.mean_delay = st.mean_delay
            res.entries, res.exits = st.entries, st.exits
        if keep_traces:
            res.trace = trace
        results.append(res)
    return results


def _aggregate_rows(points: List[dict], runs: List[RunResult], algo_names: List[str]) -> ResultTable:
    table = ResultTable()
    for pi, point in enumerate(points):
        label = scenario_label(point["scenario"])
        params = ";".join(f"{k}={v}" for k, v in sorted(point["params"].items()))
        for name in algo_names:
            sel = sorted((r for r in runs if r.point == pi and r.algorithm == name), key=lambda r: r.seed)
            ok = [r for r in sel if r.error is None]
            row = {"scenario": label, "algorithm": name, "params": params, "n": len(ok),
                   "errors": len(sel) - len(ok)}
            if ok:
                row["loss_mean"], row["loss_se"] = aggregate(r.loss for r in ok)
                row["violation_mean"], row["violation_se"] = aggregate(r.violation for r in ok)
                reg = [r.regret for r in ok if r.regret is not None]
                row["regret_mean"], row["regret_se"] = aggregate(reg) if reg else (None, None)
                row["runtime"] = float(sum(r.runtime for r in ok))
                ks = [r.K_hat for r in ok if r.K_hat is not None]
                row["K_hat"] = float(np.mean(ks)) if ks else None
                ps = [r.P_hat for r in ok]
                row["P_hat"] = Counter(ps).most_common(1)[0][0] if any(p is not None for p in ps) else None
                fps = [r.false_positives for r in ok if r.false_positives is not None]
                row["false_positives"] = int(sum(fps)) if fps else None
                ds = [r.mean_delay for r in ok if r.mean_delay is not None]
                row["mean_delay"] = float(np.mean(ds)) if ds else None
            else:
                row.update(loss_mean=float("nan"), loss_se=None, violation_mean=float("nan"),
                           violation_se=None, regret_mean=None, regret_se=None, runtime=0.0)
            table.rows.append(row)
    return table


def _workers(n: int) -> int:
    return (os.cpu_count() or 1) if n <= 0 else n


def execute(tasks: list, workers: int = 1) -> List[RunResult]:
    """Run tasks, in a process pool when ``workers > 1``; results are returned
    in task order regardless of completion order."""
    w = _workers(workers)
    if w <= 1 or len(tasks) <= 1:
        out = [_run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=w) as pool:
            out = list(pool.map(_run_task, tasks))
    return [r for group in out for r in group]


def run_experiment(cfg: ExperimentConfig, keep_traces: bool = False) -> ExperimentResult:
    """Every (scenario point, algorithm, seed) run plus aggregated rows."""
    points = expand_points(cfg)
    tasks = []
    names: List[str] = []
    for pi, point in enumerate(points):
        algos = _algo_configs(cfg, point["algo_overrides"])
        for a in algos:
            if a.display_name not in names:
                names.append(a.display_name)
        for seed in cfg.seeds:
            tasks.append((pi, seed, point["scenario"], algos, cfg.master_seed, cfg.regret,
                          keep_traces or cfg.output.write_traces))
    runs = execute(tasks, cfg.workers)
    for r in runs:
        if r.error:
            log.error("run failed: point %d seed %d %s: %s", r.point, r.seed, r.algorithm, r.error)
    table = _aggregate_rows(points, runs, names)
    result = ExperimentResult(table, runs, points, cfg)
    if cfg.output.dir:
        write_outputs(result, cfg.output.dir)
    return result


# ------------------------------------------------------------ scaling / ablation

@dataclass
class ScalingResult:
    rows: List[dict]
    violations: Dict[tuple, List[float]]
    horizons: List[int]

    def exponent(self, scenario_kind: str, algorithm: str) -> float:
        for r in self.rows:
            if r["kind"] == scenario_kind and r["algorithm"] == algorithm:
                return r["exponent"]
        raise KeyError((scenario_kind, algorithm))


def run_scaling(cfg: ExperimentConfig, horizons: Optional[Sequence[int]] = None) -> ScalingResult:
    """Mean violation at each horizon and the fitted log-log slope."""
    hs = list(horizons or cfg.horizons)
    if len(hs) < 3:
        raise ConfigError("scaling needs at least 3 horizons")
    viol: Dict[tuple, List[float]] = {}
    rows = []
    for sc in cfg.scenarios:
        kind = sc.get("kind", sc.get("class", "smooth"))
        for T in hs:
            sub = copy.deepcopy(cfg)
            sub.scenarios = [dict(sc, T=T)]
            sub.sweep = {}
            sub.regret = False
            sub.output = OutputConfig()
            res = run_experiment(sub)
            for row in res.table.rows:
                viol.setdefault((kind, row["algorithm"]), []).append(row["violation_mean"])
    for (kind, algo), vs in viol.items():
        rows.append({"kind": kind, "algorithm": algo, "exponent": scaling_exponent(hs, vs),
                     **{f"V@{T}": v for T, v in zip(hs, vs)}})
    return ScalingResult(rows, viol, hs)


def run_ablation(cfg: ExperimentConfig) -> ResultTable:
    """SA-PD with each mechanism switched off, against the full method.

    Rows carry ``violation_mean`` and ``change_pct`` relative to full SA-PD on
    the same streams.
    """
    base = next((dict(a) for a in cfg.algorithms if a.get("name", "sapd") == "sapd"), {"name": "sapd"})
    variants = [dict(base, label="SA-PD")]
    for m in cfg.ablations:
        variants.append(dict(base, label=f"SA-PD w/o {m}", **{m: False}))
    sub = copy.deepcopy(cfg)
    sub.algorithms = variants
    sub.regret = False
    res = run_experiment(sub)
    table = ResultTable(columns=TABLE_COLUMNS + ("mechanism", "change_pct"))
    for row in res.table.rows:
        full = next(r for r in res.table.rows if r["scenario"] == row["scenario"]
                    and r["params"] == row["params"] and r["algorithm"] == "SA-PD")
        row = dict(row)
        row["mechanism"] = row["algorithm"].replace("SA-PD w/o ", "") if row["algorithm"] != "SA-PD" else "none"
        row["change_pct"] = 100.0 * (row["violation_mean"] / full["violation_mean"] - 1.0)
        table.rows.append(row)
    return table


# ------------------------------------------------------------ writers

def write_trace_csv(trace: RunTrace, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "loss", "g", "violation", "beta", "mu", "branch"])
        for row in trace.rows():
            w.writerow([row[0], *(repr(v) for v in row[1:6]), row[6]])


def manifest(cfg: ExperimentConfig) -> dict:
    return {"library_version": __version__, "config": cfg.to_dict(), "seeds": list(cfg.seeds),
            "master_seed": cfg.master_seed,
            "seed_rule": "Philox(SeedSequence([master_seed, crc32(rng_key), seed, lane]))"}


def write_outputs(result: ExperimentResult, out_dir: str) -> Dict[str, str]:
    cfg = result.config
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    if cfg.output.write_table:
        p = os.path.join(out_dir, f"{cfg.name}_results.csv")
        result.table.to_csv(p)
        paths["table"] = p
    if cfg.output.write_manifest:
        p = os.path.join(out_dir, f"{cfg.name}_manifest.json")
        with open(p, "w", encoding="utf-8") as fh:
            json.dump(manifest(cfg), fh, indent=2, default=str)
        paths["manifest"] = p
    if cfg.output.write_traces:
        tdir = os.path.join(out_dir, "traces")
        os.makedirs(tdir, exist_ok=True)
        for r in result.runs:
            if r.trace is None:
                continue
            safe = r.algorithm.replace(" ", "_").replace("/", "_")
            p = os.path.join(tdir, f"p{r.point}_s{r.seed}_{safe}.csv")
            write_trace_csv(r.trace, p)
    return paths
