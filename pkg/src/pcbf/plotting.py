"""Optional SVG figures (matplotlib). CSV outputs are the actual contract."""
from __future__ import annotations

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_delta_table(table, path):
    plt = _pyplot()
    d = table.grid_deltas()
    if d.ndim != 2:
        raise ValueError("heatmap needs a 2D grid")
    fig, ax = plt.subplots(figsize=(5, 4))
    masked = np.ma.masked_invalid(np.where(np.isinf(d), np.nan, d))
    a0, a1 = table.axes
    mesh = ax.pcolormesh(a0, a1, masked.T, shading="nearest")
    inf = np.isinf(d)
    if inf.any():
        g0, g1 = np.meshgrid(a0, a1, indexing="ij")
        ax.scatter(g0[inf], g1[inf], s=2, c="k", label="infeasible")
        ax.legend(loc="upper right")
    fig.colorbar(mesh, ax=ax, label="delta")
    ax.set_xlabel("x_0")
    ax.set_ylabel("x_1")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_trajectories(trajs: dict, sc, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    n = int(sc["system"]["n"])
    for mode, tr in trajs.items():
        if n == 2:
            ax.plot(tr.states[:, 0], tr.states[:, 1], label=mode)
        else:
            ax.plot(tr.times, tr.states[:, 0], label=mode)
    if n == 2:
        for o in sc["barrier"]["obstacles"]:
            ax.add_patch(plt.Circle(o["c"], o["r"], color="0.6", alpha=0.5))
        ax.set_aspect("equal")
        ax.set_xlabel("x_0")
        ax.set_ylabel("x_1")
    else:
        ax.axhline(0.0, color="k", lw=0.8)
        ax.set_xlabel("t")
        ax.set_ylabel("x_0")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
