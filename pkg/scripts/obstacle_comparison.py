"""Obstacle avoidance: plain filter vs online-optimized vs learned delta.

Trains a model if none exists at the scenario's model path, then compares the
three filters from the scenario's initial state and reports the largest
planar distance between the optimized and learned trajectories.

    python scripts/obstacle_comparison.py [--retrain] [--svg]
"""
import argparse
import json
import os
import time

import numpy as np

from pcbf.learner import save_model, train
from pcbf.predictor import OptimizedDelta, rollout_margin, simulate
from pcbf.scenario import load_scenario

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=os.path.join(HERE, "..", "scenarios", "obstacle.toml"))
    ap.add_argument("--out", default="out/obstacle_comparison")
    ap.add_argument("--retrain", action="store_true")
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--svg", action="store_true")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    sc = load_scenario(args.config)
    sys, b, k = sc.system(), sc.barrier(), sc.controller()
    path = sc.model_path() or os.path.join(args.out, "model.json")
    if args.retrain or not os.path.exists(path):
        t0 = time.perf_counter()
        model = train(sc.distribution(), b, k, sc.train_config(), threads=args.threads)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_model(model, path)
        print(f"trained in {time.perf_counter() - t0:.1f} s -> {path}")
        sc.config["model"] = os.path.abspath(path)
    model = sc.load_model()

    x0 = sc.initial_states()[0]
    cfg = sc.predictor_config()
    trajs, rows = {}, []
    for mode in ("nominal", "optimized", "learned"):
        provider = {"nominal": 0.0, "optimized": OptimizedDelta(sys, b, k, cfg, warm_start=True),
                    "learned": model}[mode]
        period = int(sc["delta_period"]) if mode == "optimized" else 1
        t0 = time.perf_counter()
        tr = simulate(sys, b, k, x0, provider, sc["duration"], sc["dt"], delta_period=period)
        wall = time.perf_counter() - t0
        tr.to_csv(os.path.join(args.out, f"traj_{mode}.csv"))
        trajs[mode] = tr
        rows.append((mode, tr.h.min(), tr.deltas.mean(), wall))

    gap = np.linalg.norm(trajs["optimized"].states[:, :2] - trajs["learned"].states[:, :2], axis=1)
    # throughput: learned delta evaluations vs single optimize-style rollouts
    X = trajs["optimized"].states
    t0 = time.perf_counter()
    for x in X:
        model(x)
    learned_rate = len(X) / (time.perf_counter() - t0)
    n = 20
    t0 = time.perf_counter()
    for x in X[:n]:
        rollout_margin(sys, b, k, x, 0.0, cfg)
    rollout_rate = n / (time.perf_counter() - t0)

    print(f"{'mode':<10} {'min h':>10} {'mean delta':>11} {'wall s':>8}")
    for mode, mh, md, wall in rows:
        print(f"{mode:<10} {mh:>10.4f} {md:>11.4f} {wall:>8.2f}")
    r = sc.obstacle_radius()
    print(f"sup |optimized - learned| = {gap.max():.4f} (obstacle radius {r})")
    print(f"learned evals/s {learned_rate:.0f}, single rollouts/s {rollout_rate:.1f}")
    summary = {
        "rows": [{"mode": m, "min_h": float(mh), "mean_delta": float(md), "wall_s": w} for m, mh, md, w in rows],
        "sup_distance": float(gap.max()),
        "radius": r,
        "learned_evals_per_s": learned_rate,
        "rollouts_per_s": rollout_rate,
    }
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    if args.svg:
        from pcbf.plotting import plot_trajectories
        plot_trajectories(trajs, sc, os.path.join(args.out, "trajectories.svg"))


if __name__ == "__main__":
    main()
