"""Deterministic SVG figures: per-target optimal-cost panels and a CPU histogram."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .loop import ClosedLoopTrace  # noqa: E402

HIST_BINS = 30
_STYLE = {"full": "-", "no_derivative": "--", "nominal": ":"}


def _save(fig, path: Path) -> Path:
    # fixed hash salt and no date keep the SVG bytes reproducible
    with matplotlib.rc_context({"svg.hashsalt": "nmpclab", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def panel_name(d: float) -> str:
    return f"fig1_d{d:g}.svg"


def plot_target_panel(traces: Sequence[ClosedLoopTrace], d: float, path: str | Path, log_y: bool = False) -> Path:
    """Optimal cost versus step for every trace of one target."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    gammas = sorted({float(t.metadata["gamma"]) for t in traces if t.metadata["variant"] != "nominal"})
    cmap = plt.get_cmap("viridis")
    colors = {g: cmap(i / max(1, len(gammas) - 1)) for i, g in enumerate(gammas)}
    order = sorted(traces, key=lambda t: (t.metadata["variant"], float(t.metadata["gamma"])))
    for t in order:
        v = t.metadata["variant"]
        g = float(t.metadata["gamma"])
        J = t.J_star
        k = t.column("k")
        if log_y:
            J = np.where(J > 0, J, np.nan)
        label = "nominal" if v == "nominal" else f"{v} $\\gamma$={g:g}"
        ax.plot(k, J, _STYLE.get(v, "-"), color="k" if v == "nominal" else colors[g], lw=1.2, label=label)
    if log_y:
        ax.set_yscale("log")
    ax.set_xlabel("step k")
    ax.set_ylabel("J*(z_k)")
    ax.set_title(f"target d = {d:g}")
    ax.grid(True, alpha=0.3)
    if order:
        ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_cpu_histogram(cpu_seconds: Sequence[float], path: str | Path, bins: int = HIST_BINS) -> Path:
    """Fixed-width histogram of per-solve times in milliseconds."""
    ms = 1e3 * np.asarray([c for c in cpu_seconds if np.isfinite(c)], dtype=float)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    if ms.size:
        ax.hist(ms, bins=bins, range=(ms.min(), ms.max()) if ms.max() > ms.min() else None, color="0.4")
    ax.set_xlabel("solve time [ms]")
    ax.set_ylabel("count")
    ax.set_title(f"{ms.size} solves")
    fig.tight_layout()
    return _save(fig, Path(path))
