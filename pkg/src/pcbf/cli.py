"""Command-line experiment runner.

    pcbf simulate        --config scen.toml --out DIR
    pcbf tabulate-delta  --config scen.toml --out DIR [--svg]
    pcbf train           --config scen.toml --out DIR [--timing]
    pcbf verify          --config scen.toml --out DIR [--trajectory traj.csv]
    pcbf compare         --config scen.toml --out DIR [--timing] [--svg]

Exit codes: 0 ok, 2 config error, 3 divergence, 4 infeasible filter.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys as _sys
import time

import numpy as np

from . import certificates as cert_mod
from .errors import ConfigError, DivergenceError, FormatError, InfeasibleFilterError
from .dynamics import Trajectory
from .learner import METRIC_FIELDS, save_model, train
from .predictor import resolve_threads, simulate, tabulate_delta
from .scenario import load_scenario

log = logging.getLogger("pcbf")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_INFEASIBLE = 0, 2, 3, 4
VIOLATION_TOL = 1e-6


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.9g}"
    return str(v)


def write_rows(path, fields, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in fields])


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def _provenance(args, sc, out, command):
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, f"{command}.config.json"),
               {"command": command, "config_path": sc.path, "threads": resolve_threads(args.threads),
                "scenario": sc.resolved()})


def trajectory_summary(tr: Trajectory, sys, k, n_infeasible=0):
    z = sys.project_state(tr.states)
    dev = np.linalg.norm(tr.inputs - np.asarray(k(z)), axis=-1)
    return {
        "min_h": float(np.min(tr.h)),
        "violations": int(np.sum(tr.h < -VIOLATION_TOL)),
        "mean_input_deviation": float(np.mean(dev)),
        "mean_delta": float(np.mean(tr.deltas)),
        "max_delta": float(np.max(tr.deltas)),
        "n_infeasible": int(n_infeasible),
    }


def _run(sc, mode, x0, warm_start=False, sys=None, b=None, k=None):
    sys = sys or sc.system()
    b = b or sc.barrier()
    k = k or sc.controller()
    provider = sc.delta_provider(mode, sys, b, k, warm_start=warm_start)
    period = int(sc["delta_period"]) if mode in ("optimized", "realtime") else 1
    start = time.perf_counter()
    tr = simulate(sys, b, k, x0, provider, float(sc["duration"]), float(sc["dt"]), delta_period=period)
    wall = time.perf_counter() - start
    n_evals = -(-max(len(tr) - 1, 1) // period)
    return tr, trajectory_summary(tr, sys, k, getattr(provider, "n_infeasible", 0)), wall, n_evals


def cmd_simulate(args, sc, out):
    summaries = []
    for i, x0 in enumerate(sc.initial_states()):
        tr, summary, _, _ = _run(sc, sc["mode"], x0)
        tr.to_csv(os.path.join(out, f"traj_{i}.csv"))
        summary["start"] = i
        summaries.append(summary)
        if args.svg:
            from .plotting import plot_trajectories
            plot_trajectories({sc["mode"]: tr}, sc, os.path.join(out, f"traj_{i}.svg"))
    write_json(os.path.join(out, "summary.json"), {
        "mode": sc["mode"],
        "min_h": min(s["min_h"] for s in summaries),
        "violations": sum(s["violations"] for s in summaries),
        "mean_input_deviation": float(np.mean([s["mean_input_deviation"] for s in summaries])),
        "trajectories": summaries,
    })
    return EXIT_OK


def cmd_tabulate_delta(args, sc, out):
    sys, b, k = sc.system(), sc.barrier(), sc.controller()
    table = tabulate_delta(sys, b, k, sc.grid_axes(), sc.predictor_config(), threads=args.threads)
    table.to_csv(os.path.join(out, "delta_table.csv"))
    if args.svg:
        from .plotting import plot_delta_table
        plot_delta_table(table, os.path.join(out, "delta_table.svg"))
    d = table.deltas
    fin = np.isfinite(d)
    write_json(os.path.join(out, "tabulate_summary.json"), {
        "nodes": int(len(d)),
        "infeasible": int((~fin).sum()),
        "max_finite_delta": float(d[fin].max()) if fin.any() else None,
    })
    return EXIT_OK


def cmd_train(args, sc, out):
    history = []
    model = train(sc.distribution(), sc.barrier(), sc.controller(), sc.train_config(),
                  history=history, threads=args.threads, record_time=args.timing)
    save_model(model, os.path.join(out, "model.json"))
    write_rows(os.path.join(out, "metrics.csv"), METRIC_FIELDS, history)
    return EXIT_OK


def _certificate(sc, sys, b, k):
    c = sc["certificate"]
    N = sys.N
    lo, hi = np.asarray(c["x0_low"], dtype=float), np.asarray(c["x0_high"], dtype=float)
    if lo.shape != (N,) or hi.shape != (N,):
        raise ConfigError(f"certificate.x0_low/x0_high must be {N}-vectors")
    rng = np.random.default_rng(sc.seed)
    cand = rng.uniform(lo, hi, size=(20 * int(c["n_samples"]), N))
    X0 = cand[b.eval(sys.project_state(cand)) >= 0][: int(c["n_samples"])]
    if len(X0) == 0:
        raise ConfigError("certificate sampling box has no safe states")
    ecfg = sc.estimation_config()
    if int(c["fixed_point_iters"]) > 0:
        return cert_mod.self_consistent_delta0(sys, b, k, X0, ecfg, int(c["fixed_point_iters"]))
    cert = cert_mod.estimate_tracking_constants(sys, b, k, X0, ecfg)
    return cert, float(sc["delta0"])


def cmd_verify(args, sc, out):
    sys, b, k = sc.system(), sc.barrier(), sc.controller()
    cert, delta0 = _certificate(sc, sys, b, k)
    if args.trajectory:
        tr = Trajectory.from_csv(args.trajectory)
    else:
        tr = simulate(sys, b, k, sc.initial_states()[0], delta0, float(sc["duration"]), float(sc["dt"]))
        tr.to_csv(os.path.join(out, "verify_traj.csv"))
    report = cert_mod.verify_barrier_condition(tr, b, cert, delta0, sys=sys)
    cert.save(os.path.join(out, "certificate.json"))
    d = report.to_dict()
    d["delta0"] = delta0
    d["delta0_lower_bound"] = cert_mod.delta0_lower_bound(cert, b.alpha_x)
    write_json(os.path.join(out, "report.json"), d)
    return EXIT_OK


COMPARE_FIELDS = ("mode", "start", "min_h", "violations", "mean_delta", "max_delta",
                  "mean_input_deviation", "n_infeasible", "solve_rate_hz")


def cmd_compare(args, sc, out):
    sys, b, k = sc.system(), sc.barrier(), sc.controller()
    cmp = sc["compare"]
    rows, sups, trajs_all = [], [], []
    for i, x0 in enumerate(sc.initial_states()):
        trajs = {}
        for mode in cmp["modes"]:
            tr, summary, wall, n_evals = _run(sc, mode, x0, cmp["warm_start"], sys, b, k)
            trajs[mode] = tr
            tr.to_csv(os.path.join(out, f"compare_{mode}_{i}.csv"))
            rate = n_evals / wall if args.timing and wall > 0 else None
            rows.append({"mode": mode, "start": i, "solve_rate_hz": rate, **summary})
        if "optimized" in trajs and "learned" in trajs:
            gap = sys.project_state(trajs["optimized"].states) - sys.project_state(trajs["learned"].states)
            sups.append(float(np.max(np.linalg.norm(gap, axis=-1))))
        trajs_all.append(trajs)
        if args.svg:
            from .plotting import plot_trajectories
            plot_trajectories(trajs, sc, os.path.join(out, f"compare_{i}.svg"))
    write_rows(os.path.join(out, "compare.csv"), COMPARE_FIELDS, rows)
    radius = sc.obstacle_radius()
    threshold = cmp.get("sup_threshold")
    if threshold is None and radius is not None:
        threshold = 0.1 * radius
    summary = {"sup_distance_optimized_learned": sups, "sup_threshold": threshold}
    if sups and threshold is not None:
        summary["sup_within_threshold"] = bool(max(sups) < threshold)
    write_json(os.path.join(out, "compare_summary.json"), summary)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "tabulate-delta": cmd_tabulate_delta,
    "train": cmd_train,
    "verify": cmd_verify,
    "compare": cmd_compare,
}


def build_parser():
    p = argparse.ArgumentParser(prog="pcbf", description="Predictive CBF experiment runner")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="scenario TOML file")
        sp.add_argument("--out", default=None, help="output directory (default out/<name>)")
        sp.add_argument("--seed", type=int, default=None, help="override scenario and training seed")
        sp.add_argument("--threads", type=int, default=None, help="worker threads (fallback: PCBF_THREADS)")
        sp.add_argument("--model", default=None, help="model JSON for learned mode")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("simulate", "tabulate-delta", "compare"):
            sp.add_argument("--svg", action="store_true", help="also write SVG figures")
        if name in ("train", "compare"):
            sp.add_argument("--timing", action="store_true",
                            help="record wall-clock columns (makes output non-reproducible)")
        if name == "verify":
            sp.add_argument("--trajectory", default=None, help="trajectory CSV to check")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        sc = load_scenario(args.config, seed=args.seed)
        if args.model is not None:
            sc.config["model"] = os.path.abspath(args.model)
        out = args.out or os.path.join("out", sc["name"])
        _provenance(args, sc, out, args.command)
        return COMMANDS[args.command](args, sc, out)
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"simulation diverged at step {exc.step}", file=_sys.stderr)
        return EXIT_DIVERGENCE
    except InfeasibleFilterError as exc:
        print(f"infeasible filter: {exc}", file=_sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    _sys.exit(main())
