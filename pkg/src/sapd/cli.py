"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 runtime failure. The default
output directory comes from ``$SAPD_OUTPUT_DIR`` (else ``./results``).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from .environments import ConfigError
from .estimators import run_detection
from .harness import (ExperimentConfig, config_keys, load_config, make_stream, run_ablation,
                      run_experiment, run_scaling, scenario_from_dict, scenario_label)
from .learners import AlgoConfig
from .metrics import detection_stats, true_edges

OUTPUT_ENV = "SAPD_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _keys_epilog() -> str:
    lines = ["configuration keys (YAML; override with --set dotted.key=value):"]
    for k, v in config_keys().items():
        lines.append(f"  {k} = {v!r}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sapd",
        description="Constrained online optimization experiments.",
        epilog=_keys_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", "-c", help="YAML experiment file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./results)")
        sp.add_argument("--workers", type=int, help="worker processes (0 = all cores)")
        return sp

    for name, text in (("run", "run every scenario x algorithm x seed and print the table"),
                       ("sweep", "like run, with sweep axes given as --axis name=v1,v2"),
                       ("scaling", "fit violation growth exponents over horizons"),
                       ("ablate", "switch off one SA-PD mechanism at a time")):
        sp = common(sub.add_parser(name, help=text, epilog=_keys_epilog(),
                                   formatter_class=argparse.RawDescriptionHelpFormatter))
        if name == "sweep":
            sp.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2",
                            help="sweep axis values")
        if name == "scaling":
            sp.add_argument("--horizons", help="comma-separated horizons")

    sp = common(sub.add_parser("detect", help="run only the structure estimators on a scenario"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--every", type=int, default=0,
                    help="print per-round estimator values every N rounds (0 = summary only)")

    sp = common(sub.add_parser("gen", help="write a generated stream as CSV"))
    sp.add_argument("--seed", type=int, default=0)

    sp = common(sub.add_parser("plot-data", help="emit plot-ready CSV series"))
    sp.add_argument("--figure", choices=("fig1", "fig2", "fig3", "fig4", "all"), default="all")
    return p


def _out_dir(args) -> str:
    return args.out or os.environ.get(OUTPUT_ENV) or "results"


def _load(args, extra: Optional[List[str]] = None) -> ExperimentConfig:
    overrides = list(args.overrides) + list(extra or [])
    if getattr(args, "workers", None) is not None:
        overrides.append(f"workers={args.workers}")
    cfg = load_config(args.config, overrides)
    return cfg


def _write_rows(path: str, header: List[str], rows) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ------------------------------------------------------------ commands

def cmd_run(args, extra: Optional[List[str]] = None) -> int:
    cfg = _load(args, extra)
    cfg.output.dir = _out_dir(args)
    res = run_experiment(cfg)
    print(res.table.format_text())
    for r in res.errors:
        print(f"error: point {r.point} seed {r.seed} {r.algorithm}: {r.error}", file=sys.stderr)
    if res.runs and all(r.error for r in res.runs):
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_sweep(args) -> int:
    extra = []
    for spec in args.axis:
        if "=" not in spec:
            raise ConfigError(f"--axis {spec!r} must look like name=v1,v2")
        name, vals = spec.split("=", 1)
        extra.append(f"sweep.{name}=[{vals}]")
    return cmd_run(args, extra)


def cmd_scaling(args) -> int:
    cfg = _load(args)
    horizons = [int(float(h)) for h in args.horizons.split(",")] if args.horizons else None
    res = run_scaling(cfg, horizons)
    hs = res.horizons
    header = ["kind", "algorithm", "exponent"] + [f"V@{T}" for T in hs]
    rows = [[r["kind"], r["algorithm"], f"{r['exponent']:.4f}"] + [f"{r[f'V@{T}']:.2f}" for T in hs]
            for r in res.rows]
    print("  ".join(header))
    for r in rows:
        print("  ".join(r))
    _write_rows(os.path.join(_out_dir(args), f"{cfg.name}_scaling.csv"), header, rows)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args)
    table = run_ablation(cfg)
    print(f"{'scenario':32s} {'variant':28s} {'violation':>12s} {'change%':>9s}")
    for r in table.rows:
        print(f"{r['scenario']:32s} {r['algorithm']:28s} {r['violation_mean']:12.2f} {r['change_pct']:9.1f}")
    os.makedirs(_out_dir(args), exist_ok=True)
    table.to_csv(os.path.join(_out_dir(args), f"{cfg.name}_ablation.csv"))
    return EXIT_OK


def _sapd_config(cfg: ExperimentConfig) -> AlgoConfig:
    data = next((dict(a) for a in cfg.algorithms if a.get("name", "sapd") == "sapd"), {})
    return AlgoConfig.from_dict(dict(data, name="sapd"))


def cmd_detect(args) -> int:
    cfg = _load(args)
    algo = _sapd_config(cfg)
    for sc in cfg.scenarios:
        scenario = scenario_from_dict(sc)
        stream = make_stream(scenario, args.seed, cfg.master_seed)
        summary = run_detection(stream, algo.estimator_config(), reset=algo.reset)
        st = detection_stats(summary.flags, true_edges(stream))
        print(f"# {scenario_label(scenario)} seed={args.seed}")
        if args.every:
            print("t,delta,delta_max,delta_mean,flag")
            for i in range(0, stream.T, args.every):
                print(f"{i + 1},{summary.deltas[i]:.6g},{summary.delta_max[i]:.6g},"
                      f"{summary.delta_mean[i]:.6g},{int(summary.flags[i])}")
        if st.n_edges > stream.T // 2:
            # a drifting stream changes every round; edge matching says nothing there
            print(f"K_hat={summary.K_hat} changing_rounds={st.n_edges}")
        else:
            delay = "n/a" if st.mean_delay is None else f"{st.mean_delay:.2f}"
            print(f"K_hat={summary.K_hat} entries={st.entries} exits={st.exits} "
                  f"false_positives={st.false_positives} missed={st.missed} mean_delay={delay}")
        print(f"P_hat={summary.P_hat} found_at={summary.period_round} "
              f"max_delta_max={float(summary.delta_max.max()):.3g}")
    return EXIT_OK


def cmd_gen(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    for sc in cfg.scenarios:
        scenario = scenario_from_dict(sc)
        stream = make_stream(scenario, args.seed, cfg.master_seed)
        d = stream.d
        header = ["t", "b", "b_true"] + [f"a{i}" for i in range(d)] + [f"target{i}" for i in range(d)]
        rows = ([i + 1, repr(float(stream.b[i])), repr(float(stream.b_true[i]))]
                + [repr(float(v)) for v in stream.A[i]] + [repr(float(v)) for v in stream.loss_params[i]]
                for i in range(stream.T))
        path = os.path.join(out, f"stream_{scenario_label(scenario)}_seed{args.seed}.csv")
        _write_rows(path, header, rows)
        print(path)
    return EXIT_OK


def cmd_plot_data(args) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    figs = ("fig1", "fig2", "fig3", "fig4") if args.figure == "all" else (args.figure,)
    if "fig1" in figs or "fig2" in figs:
        res = run_experiment(cfg, keep_traces="fig2" in figs)
        if "fig1" in figs:
            rows = [[r["scenario"], r["algorithm"], r["violation_mean"], r["violation_se"] or ""]
                    for r in res.table.rows]
            _write_rows(os.path.join(out, "fig1.csv"),
                        ["scenario", "algorithm", "violation_mean", "violation_se"], rows)
        if "fig2" in figs:
            rows = []
            seed = cfg.seeds[0]
            for pi, point in enumerate(res.points):
                stream = make_stream(point["scenario"], seed, cfg.master_seed)
                marks = np.zeros(stream.T, dtype=int)
                for s, _ in true_edges(stream):
                    if s < stream.T:
                        marks[s] = 1  # first round of the new regime
                for (sd, algo), tr in res.traces(pi).items():
                    if sd != seed:
                        continue
                    cv = tr.cum_violation
                    label = scenario_label(point["scenario"])
                    rows += [[label, algo, i + 1, repr(float(cv[i])), int(marks[i])] for i in range(tr.T)]
            _write_rows(os.path.join(out, "fig2.csv"),
                        ["scenario", "algorithm", "t", "cum_violation", "change_point"], rows)
    if "fig3" in figs:
        sc = run_scaling(cfg)
        rows = []
        T0 = sc.horizons[0]
        for (kind, algo), vs in sc.violations.items():
            c75 = vs[0] / T0 ** 0.75
            c50 = vs[0] / T0 ** 0.5
            for T, v in zip(sc.horizons, vs):
                rows.append([kind, algo, T, np.log(T), np.log(v), c75 * T ** 0.75, c50 * T ** 0.5])
        _write_rows(os.path.join(out, "fig3.csv"),
                    ["kind", "algorithm", "T", "log_T", "log_V", "ref_T075", "ref_T050"], rows)
    if "fig4" in figs:
        table = run_ablation(cfg)
        rows = [[r["scenario"], r["mechanism"], r["violation_mean"], r["change_pct"]]
                for r in table.rows if r["mechanism"] != "none"]
        _write_rows(os.path.join(out, "fig4.csv"),
                    ["scenario", "mechanism", "violation_mean", "change_pct"], rows)
    print(out)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "scaling": cmd_scaling, "ablate": cmd_ablate,
            "detect": cmd_detect, "gen": cmd_gen, "plot-data": cmd_plot_data}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
