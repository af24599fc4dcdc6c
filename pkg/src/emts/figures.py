"""Matplotlib figure rendering for the report paths.

Every CLI stage that writes delimited output drops a PNG next to it:
library overviews, training curves, and evaluation summaries.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FAMILY_COLORS = {"constant": "tab:blue", "quintic": "tab:orange", "spline": "tab:green"}


def save_library_figure(lib, path, max_per_family=120):
    """Trajectory fan in the ego frame, colored by generator family."""
    fig, ax = plt.subplots(figsize=(7, 5))
    counts = {}
    for entry in lib.entries:
        counts[entry.family] = counts.get(entry.family, 0) + 1
        if counts[entry.family] > max_per_family:
            continue
        xs = [0.0] + [s.x for s in entry.trajectory.states]
        ys = [0.0] + [s.y for s in entry.trajectory.states]
        ax.plot(xs, ys, color=FAMILY_COLORS.get(entry.family, "gray"),
                alpha=0.25, linewidth=0.8)
    for family, color in FAMILY_COLORS.items():
        if family in counts:
            ax.plot([], [], color=color, label=f"{family} ({counts[family]})")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"trajectory library ({len(lib)} primitives)")
    ax.legend(loc="upper left", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_figure(history, path, title="training loss"):
    """Loss curve from (step, loss, ...) tuples."""
    hist = np.asarray([(h[0], h[1]) for h in history])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(hist[:, 0], hist[:, 1], linewidth=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_figure(rows, path):
    """Success/completion and loss curves from training metrics rows."""
    if not rows:
        return
    steps = [r["step"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 7), sharex=True)
    ax1.plot(steps, [r["success_rate"] for r in rows], label="success rate", marker="o")
    ax1.plot(steps, [r["completion_ratio"] for r in rows], label="completion", marker=".")
    ax1.set_ylabel("rate")
    ax1.set_ylim(-0.05, 1.05)
    ax1.legend()
    ax1.grid(True, alpha=0.3)
    for key in ("loss_r", "loss_v", "loss_p"):
        ax2.plot(steps, [max(r[key], 1e-12) for r in rows], label=key)
    ax2.set_yscale("log")
    ax2.set_xlabel("environment steps")
    ax2.set_ylabel("loss")
    ax2.legend()
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_figure(traces, scene, path):
    """Driven paths over the route centerline, colored by outcome."""
    fig, ax = plt.subplots(figsize=(8, 5))
    route = scene.route.pts
    ax.plot(route[:, 0], route[:, 1], "k--", alpha=0.5, label="route")
    colors = {"success": "tab:green", "collision": "tab:red",
              "offroad": "tab:orange", "timeout": "tab:purple"}
    seen = set()
    for trace in traces:
        xs = [out.state.x for out in trace["steps"]]
        ys = [out.state.y for out in trace["steps"]]
        cause = trace["cause"]
        label = cause if cause not in seen else None
        seen.add(cause)
        ax.plot(xs, ys, color=colors.get(cause, "gray"), alpha=0.7,
                linewidth=1.0, label=label)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title("evaluation episodes")
    ax.axis("equal")
    if seen:
        ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
