"""Learning curves: seed aggregation, CSV export and SVG rendering."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .training import Metrics, read_metrics_csv  # noqa: E402

# fixed ids and no timestamp, so identical data renders to identical bytes
plt.rcParams["svg.hashsalt"] = "idrl"
plt.rcParams["svg.fonttype"] = "none"


@dataclass
class Curve:
    label: str
    steps: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_runs: int


def aggregate(label: str, runs: Sequence[Metrics]) -> Curve:
    """Mean and population std across runs on their shared eval steps.

    A single run keeps its own across-episode std as the band.
    """
    if not runs:
        raise ValueError(f"no runs for curve {label!r}")
    if len(runs) == 1:
        m = runs[0]
        return Curve(label, m.column("step"), m.column("eval_return_mean"), m.column("eval_return_std"), 1)
    common = set(runs[0].column("step").tolist())
    for m in runs[1:]:
        common &= set(m.column("step").tolist())
    steps = np.array(sorted(common))
    vals = []
    for m in runs:
        lookup = dict(zip(m.column("step").tolist(), m.column("eval_return_mean").tolist()))
        vals.append([lookup[s] for s in steps])
    vals = np.array(vals)
    return Curve(label, steps, vals.mean(axis=0), vals.std(axis=0), len(runs))


def write_curves_csv(curves: Sequence[Curve], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "step", "return_mean", "return_std", "n_runs"])
        for c in curves:
            for s, m, sd in zip(c.steps, c.mean, c.std):
                w.writerow([c.label, int(s), repr(float(m)), repr(float(sd)), c.n_runs])


def render_svg(curves: Sequence[Curve], path, title: str = "", xlabel: str = "environment steps"):
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for c in curves:
        line, = ax.plot(c.steps, c.mean, marker="o" if len(c.steps) == 1 else None, lw=1.6, label=c.label)
        ax.fill_between(c.steps, c.mean - c.std, c.mean + c.std, color=line.get_color(), alpha=0.2, lw=0)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("evaluation return")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    if len(curves) > 1:
        ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_runs(groups: dict[str, list], out_dir, title: str = "") -> list[Curve]:
    """``groups`` maps a label to metrics.csv paths (one per seed); writes curves.svg and curves.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = [aggregate(label, [read_metrics_csv(p) for p in paths]) for label, paths in groups.items()]
    write_curves_csv(curves, out_dir / "curves.csv")
    render_svg(curves, out_dir / "curves.svg", title)
    return curves
