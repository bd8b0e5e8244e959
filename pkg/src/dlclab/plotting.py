"""SVG figures drawn from emitted CSVs.

Each function reads only the CSV it is given, so a figure can always be
rebuilt from the data next to it. Output is deterministic: fixed hash salt,
no timestamp metadata.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .checkpoint import atomic_write  # noqa: E402

STYLE = {
    "svg.hashsalt": "dlclab",
    "svg.fonttype": "none",
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def read_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _num(s):
    try:
        return float(s)
    except (TypeError, ValueError):
        return math.nan


def _save(fig, path):
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def kld_vs_modes(csv_path, svg_path):
    """KL against mode count, one line per conditioning regime."""
    series = defaultdict(list)
    for r in read_rows(csv_path):
        series[r["regime"]].append((int(r["n_modes"]), _num(r["kld"])))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for regime in sorted(series):
            pts = sorted(series[regime])
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=regime)
        ax.set_xscale("log")
        ax.set_xlabel("number of modes")
        ax.set_ylabel("KL(data || model) [nats]")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, svg_path)


def scatter(csv_path, svg_path, group: str = "method", limit: int = 2000):
    """Side-by-side point clouds, one panel per value of ``group``."""
    groups = defaultdict(list)
    for r in read_rows(csv_path):
        if len(groups[r[group]]) < limit:
            groups[r[group]].append((_num(r["x0"]), _num(r["x1"])))
    names = sorted(groups)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(len(names), 1), figsize=(3.2 * max(len(names), 1), 3.2),
                                 squeeze=False, sharex=True, sharey=True)
        for ax, name in zip(axes[0], names):
            pts = groups[name]
            ax.scatter([p[0] for p in pts], [p[1] for p in pts], s=1.5, alpha=0.5, linewidths=0)
            ax.set_title(name)
            ax.set_aspect("equal")
        fig.tight_layout()
        _save(fig, svg_path)


def remask_sweep(csv_path, svg_path):
    rows = sorted(read_rows(csv_path), key=lambda r: _num(r["eta"]))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot([_num(r["eta"]) for r in rows], [_num(r["kld"]) for r in rows], marker="o")
        ax.set_xscale("symlog", linthresh=0.01)
        ax.set_xlabel("remask ratio eta")
        ax.set_ylabel("KL(data || model) [nats]")
        fig.tight_layout()
        _save(fig, svg_path)


def mode_histogram(csv_path, svg_path):
    rows = read_rows(csv_path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3))
        colors = ["C1" if r["is_target"] == "1" else "C0" for r in rows]
        ax.bar([int(r["mode"]) for r in rows], [_num(r["fraction"]) for r in rows], color=colors)
        ax.set_xlabel("mode index")
        ax.set_ylabel("fraction of samples")
        fig.tight_layout()
        _save(fig, svg_path)
