"""Render training and diagnostic records to figure files.

Every function takes the in-memory records produced elsewhere in the
package and writes a single PNG.  Nothing here opens a window: the Agg
backend is forced before pyplot is imported so the module works in
headless runs and keeps output byte-stable across machines.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .diagnostics import AlphaBetaRecord, ConditioningReport
from .training import EpochRecord

DPI = 120


def _finite(values):
    return [v for v in values if math.isfinite(v)]


def training_curves(history: list[EpochRecord], path: str) -> None:
    """Loss, validation metric, and gate scalars against the global epoch.

    Stage boundaries are drawn as vertical lines so the effect of the
    sparsification and frozen-support phases is visible at a glance.
    """
    if not history:
        raise ValueError("empty history")
    epochs = [r.epoch for r in history]
    stages = [r.stage for r in history]
    bounds = [epochs[i] for i in range(1, len(history)) if stages[i] != stages[i - 1]]

    have_scalars = any(math.isfinite(r.alpha) for r in history)
    n_rows = 2 if have_scalars else 1
    fig, axes = plt.subplots(n_rows, 1, figsize=(7.0, 3.0 * n_rows), sharex=True, squeeze=False)

    ax = axes[0][0]
    ax.plot(epochs, [r.train_loss for r in history], label="train loss", color="tab:blue")
    ax.set_ylabel("train loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r.val_metric for r in history], label="val metric", color="tab:orange")
    ax2.set_ylabel("val metric")
    for b in bounds:
        ax.axvline(b - 0.5, color="gray", linestyle=":", linewidth=0.8)
    handles = ax.get_lines() + ax2.get_lines()
    ax.legend(handles, [h.get_label() for h in handles], loc="best", fontsize=8)

    if have_scalars:
        ax = axes[1][0]
        for name in ("alpha", "beta", "zeta", "nu"):
            series = [getattr(r, name) for r in history]
            if any(math.isfinite(v) for v in series):
                ax.plot(epochs, series, label=name)
        for b in bounds:
            ax.axvline(b - 0.5, color="gray", linestyle=":", linewidth=0.8)
        ax.set_ylabel("gate scalars")
        ax.legend(loc="best", fontsize=8)

    axes[-1][0].set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def conditioning_figure(reports: list[ConditioningReport], path: str) -> None:
    """Scatter of the measured condition number against its upper bound.

    Both axes are logarithmic; the dashed diagonal marks equality, so a
    sound bound puts every finite point on or below it.  Instances with a
    vacuous (infinite) bound are counted in the title rather than drawn.
    """
    if not reports:
        raise ValueError("no reports")
    finite = [r for r in reports if not r.vacuous() and math.isfinite(r.kappa)]
    skipped = len(reports) - len(finite)

    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    if finite:
        xs = [r.bound for r in finite]
        ys = [r.kappa for r in finite]
        ax.scatter(xs, ys, s=18, alpha=0.7, edgecolors="none")
        lo = min(_finite(xs + ys) + [1.0])
        hi = max(_finite(xs + ys) + [1.0])
        ax.plot([lo, hi], [lo, hi], linestyle="--", color="gray", linewidth=1.0, label="y = x")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.legend(loc="best", fontsize=8)
    ax.set_xlabel("bound")
    ax.set_ylabel("measured condition number")
    title = f"{len(finite)} instances"
    if skipped:
        title += f" ({skipped} vacuous omitted)"
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def spectrum_figure(spectra: dict[str, list[float]], path: str) -> None:
    """Gradient norm per time step on a log scale, one line per label."""
    if not spectra:
        raise ValueError("no spectra")
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    floor = None
    for label, norms in spectra.items():
        vals = np.asarray(norms, dtype=float)
        positive = vals[vals > 0]
        if positive.size:
            floor = positive.min() if floor is None else min(floor, positive.min())
        ax.semilogy(np.arange(len(vals)), np.maximum(vals, 1e-300), label=label)
    ax.set_xlabel("time step")
    ax.set_ylabel("gradient norm")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def alphabeta_figure(records: list[AlphaBetaRecord], path: str) -> None:
    """Learnt gate scalars against the horizon, one marker per seed.

    The left panel shows alpha with a 1/T reference curve; the right
    panel shows the relative gap between beta and 1 - alpha.  Diverged
    runs are skipped.
    """
    usable = [r for r in records if not r.diverged]
    if not usable:
        raise ValueError("no usable records")
    seeds = sorted({r.seed for r in usable})
    horizons = sorted({r.horizon for r in usable})

    fig, (ax_a, ax_e) = plt.subplots(1, 2, figsize=(9.0, 4.0))
    for seed in seeds:
        rows = sorted((r for r in usable if r.seed == seed), key=lambda r: r.horizon)
        ts = [r.horizon for r in rows]
        ax_a.plot(ts, [r.alpha for r in rows], marker="o", label=f"seed {seed}")
        ax_e.plot(ts, [r.rel_err for r in rows], marker="o", label=f"seed {seed}")
    ref_t = np.linspace(min(horizons), max(horizons), 64)
    ax_a.plot(ref_t, 1.0 / ref_t, linestyle="--", color="gray", linewidth=1.0, label="1/T")
    ax_a.set_xlabel("horizon T")
    ax_a.set_ylabel("learnt alpha")
    ax_a.legend(loc="best", fontsize=8)
    ax_e.set_xlabel("horizon T")
    ax_e.set_ylabel("|beta - (1 - alpha)| / beta")
    ax_e.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
