"""Scalar layered example: plain vs buffered filter, optimized and learned delta fields.

Writes CSVs (and SVGs with --svg) to out/scalar_example.

    python scripts/scalar_example.py [--grid 50] [--threads 4] [--svg]
"""
import argparse
import json
import os

import numpy as np

from pcbf.learner import save_model, train
from pcbf.predictor import optimize_delta_many, simulate, tabulate_delta
from pcbf.scenario import load_scenario

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=os.path.join(HERE, "..", "scenarios", "scalar.toml"))
    ap.add_argument("--out", default="out/scalar_example")
    ap.add_argument("--grid", type=int, default=50)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--svg", action="store_true")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    sc = load_scenario(args.config)
    sys, b, k = sc.system(), sc.barrier(), sc.controller()
    x0 = sc.initial_states()[0]
    summary = {}
    for label, delta in (("delta0_0", 0.0), ("delta0_1", 1.0)):
        tr = simulate(sys, b, k, x0, delta, sc["duration"], sc["dt"])
        tr.to_csv(os.path.join(args.out, f"traj_{label}.csv"))
        summary[label] = {"min_h": float(tr.h.min())}

    axes = [np.linspace(0, 4, args.grid), np.linspace(-4, 4, args.grid)]
    table = tabulate_delta(sys, b, k, axes, sc.predictor_config(), threads=args.threads)
    table.to_csv(os.path.join(args.out, "delta_optimized.csv"))

    history = []
    model = train(sc.distribution(), b, k, sc.train_config(), history=history, threads=args.threads)
    save_model(model, os.path.join(args.out, "model.json"))
    learned = model(table.nodes)
    feasible = np.isfinite(table.deltas)
    np.savetxt(os.path.join(args.out, "delta_learned.csv"),
               np.column_stack([table.nodes, learned]), delimiter=",",
               header="x_0,x_1,delta", comments="", fmt="%.9g")
    summary["learned_minus_optimized_on_feasible"] = {
        "mean": float(np.mean(learned[feasible] - table.deltas[feasible])),
        "max_abs": float(np.max(np.abs(learned[feasible] - table.deltas[feasible]))),
    }
    # closed-loop check from starts where a finite delta exists
    rng = np.random.default_rng(1)
    cand = rng.uniform([0, -4], [4, 4], size=(500, 2))
    ok = np.array([o.feasible for o in optimize_delta_many(sys, b, k, cand, sc.predictor_config())])
    safe = [simulate(sys, b, k, x, model, sc["duration"], sc["dt"]).h.min() >= 0 for x in cand[ok]]
    summary["learned_safe_fraction"] = float(np.mean(safe))
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    print(json.dumps(summary, indent=2))

    if args.svg:
        from pcbf.plotting import plot_delta_table
        plot_delta_table(table, os.path.join(args.out, "delta_optimized.svg"))


if __name__ == "__main__":
    main()
