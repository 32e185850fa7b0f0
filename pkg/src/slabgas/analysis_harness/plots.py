"""Static PNG figures written next to the CSV/JSON outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_marginals(centers, curves: dict, path, title: str = ""):
    """curves: label -> (mean, stderr) arrays over bins."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (m, se) in curves.items():
        ax.errorbar(centers, m, yerr=se, marker=".", capsize=2, label=label)
    ax.set_xlabel("x1")
    ax.set_title(title)
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_gaps(report, path):
    obs = report.observables
    fig, axes = plt.subplots(1, len(obs), figsize=(4 * len(obs), 3.5), squeeze=False)
    for ax, o in zip(axes[0], obs):
        for t in report.times:
            g = [report.gap(N, t, o) for N in report.N]
            ax.errorbar(report.N, [a for a, _ in g], yerr=[b for _, b in g], marker="o", capsize=2,
                        label=f"t={t:g}")
        ax.set_xscale("log")
        ax.set_xlabel("N")
        ax.set_ylabel("RMS gap")
        ax.set_title(o)
        ax.legend(fontsize=7)
    _save(fig, path)


def plot_badsets(tables, path):
    classes = [c for c in ("SHIFT", "RECOLLISION", "OVERLAP", "NEAR_BOUNDARY_CREATION", "GRAZING", "CLEAN")]
    fig, axes = plt.subplots(1, len(tables), figsize=(5 * len(tables), 3.5), squeeze=False)
    for ax, tab in zip(axes[0], tables):
        eps = np.array(tab.epsilons, dtype=float)
        for c in classes:
            f = np.array([tab.frequency(e, c) for e in tab.epsilons])
            ax.errorbar(eps, f[:, 0], yerr=f[:, 1], marker="o", capsize=2, label=c.lower())
        ax.set_xscale("log")
        ax.set_xlabel("epsilon")
        ax.set_ylabel("frequency")
        ax.set_title(f"s={tab.s}, r={tab.r}")
        ax.legend(fontsize=6)
    _save(fig, path)


def plot_profiles(x1, profiles: dict, path, title: str = ""):
    """profiles: label -> values on x1."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, y in profiles.items():
        ax.plot(x1, y, label=label)
    ax.set_xlabel("x1")
    ax.set_title(title)
    ax.legend(fontsize=7)
    _save(fig, path)
