"""Figures for runs and reports (matplotlib, Agg backend, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _finish(fig, ax, path, xlabel, ylabel, title=None, legend=True):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if legend and ax.get_legend_handles_labels()[0]:
        ax.legend(frameon=False, fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_curves(curves, path, xlabel="iteration", ylabel="loss", title=None, log=False):
    """``curves``: ``{label: array or list of arrays}``; several arrays under one
    label are drawn as mean with a min-max band."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for k, (label, ys) in enumerate(curves.items()):
        c = COLORS[k % len(COLORS)]
        if isinstance(ys, np.ndarray) and ys.ndim == 1:
            ys = [ys]
        ys = [np.asarray(y, dtype=np.float64) for y in ys if len(y)]
        if not ys:
            continue
        n = min(len(y) for y in ys)
        stack = np.stack([y[:n] for y in ys])
        x = np.arange(n)
        ax.plot(x, stack.mean(axis=0), color=c, lw=1.5, label=label)
        if len(ys) > 1:
            ax.fill_between(x, stack.min(axis=0), stack.max(axis=0), color=c, alpha=0.2, lw=0)
    if log:
        ax.set_yscale("log")
    return _finish(fig, ax, path, xlabel, ylabel, title)


def plot_trajectories(trajs, path, column="task_loss", best=True, title=None):
    """Best-so-far (or raw) ``column`` of several trajectories per label."""
    curves = {}
    for label, group in trajs.items():
        group = group if isinstance(group, (list, tuple)) else [group]
        curves[label] = [t.best_so_far(column) if best else t.column(column) for t in group]
    return plot_curves(curves, path, "budget", column.replace("_", " "), title)


def plot_rule_curves(traj, names, path, title=None):
    curves = {n: traj.rule_curve(i) for i, n in enumerate(names)}
    return plot_curves(curves, path, "iteration", "knowledge loss", title)


def plot_training(log_rows, path):
    """Per-epoch totals from the trainer log."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    ep = [r["epoch"] for r in log_rows]
    for key, c in (("l_c", COLORS[0]), ("l_r", COLORS[1]), ("kl", COLORS[2])):
        axes[0].plot(ep, [r[key] for r in log_rows], color=c, label=key)
    axes[0].set_yscale("log")
    axes[0].legend(frameon=False, fontsize=8)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].grid(alpha=0.3)
    axes[1].plot(ep, [r["tf_accuracy"] for r in log_rows], color=COLORS[3])
    return _finish(fig, axes[1], path, "epoch", "teacher-forced accuracy", legend=False)


def plot_transfer(table, path, title="vehicle IoU"):
    """Heat map of ``table[source][target]`` with the diagonal outlined."""
    names = list(table)
    a = np.array([[table[s][t] for t in names] for s in names])
    fig, ax = plt.subplots(figsize=(4, 3.6))
    im = ax.imshow(a, vmin=0.0, vmax=1.0, cmap="viridis")
    for i in range(len(names)):
        for j in range(len(names)):
            ax.text(j, i, f"{a[i, j]:.2f}", ha="center", va="center", fontsize=8,
                    color="w" if a[i, j] < 0.5 else "k")
        ax.add_patch(plt.Rectangle((i - 0.5, i - 0.5), 1, 1, fill=False, ec="r", lw=1.5))
    ax.set_xticks(range(len(names)), names)
    ax.set_yticks(range(len(names)), names)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _finish(fig, ax, path, "target victim", "source victim", title, legend=False)


def save_image(img, path):
    """An ``(H, W, 3)`` image in [0, 1] as PNG."""
    plt.imsave(path, np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0))
    return path


def plot_cloud(cloud, path, max_points=20000, seed=0):
    """Top view of a labeled cloud, vehicles highlighted."""
    pts, lab = cloud.points, cloud.labels
    if len(pts) > max_points:
        idx = np.random.default_rng(seed).choice(len(pts), max_points, replace=False)
        pts, lab = pts[idx], lab[idx]
    fig, ax = plt.subplots(figsize=(5, 5))
    veh = lab > 0
    ax.scatter(pts[~veh, 0], pts[~veh, 1], s=0.2, c="0.6")
    ax.scatter(pts[veh, 0], pts[veh, 1], s=0.6, c=COLORS[1], label="vehicle")
    ax.set_aspect("equal")
    return _finish(fig, ax, path, "x [m]", "y [m]")


__all__ = ["plot_curves", "plot_trajectories", "plot_rule_curves", "plot_training",
           "plot_transfer", "save_image", "plot_cloud"]
