"""Comparison tables and static training plots."""
from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ContractError, DataError  # noqa: E402
from .metrics import MetricReport, format_table  # noqa: E402
from .proto_bank import momentum  # noqa: E402

LOSS_FIELDS = ("l_seg", "l_s", "l_t", "l_c1", "l_c2", "l_b1", "l_b2", "total")


def load_reports(paths) -> list[MetricReport]:
    reports = []
    for p in paths:
        try:
            rep = MetricReport.from_json(Path(p).read_text(encoding="utf-8"))
        except (OSError, ValueError, TypeError, KeyError) as exc:
            raise DataError(f"cannot read metric record {p}: {exc}") from exc
        if not rep.name:
            rep.name = Path(p).stem
        reports.append(rep)
    return reports


def comparison_table(reports, title=None) -> str:
    """Rows ordered by run name; class lists must agree."""
    if not reports:
        raise ContractError("need at least one metric record")
    return format_table(sorted(reports, key=lambda r: r.name), title)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.png")
    fig.savefig(tmp, dpi=100)
    plt.close(fig)
    os.replace(tmp, path)


def plot_losses(logs: dict, path, fields=LOSS_FIELDS) -> dict:
    """One panel per phase; returns {phase: {field: (iterations, values)}}."""
    logs = {k: v for k, v in logs.items() if v}
    if not logs:
        raise ContractError("no log rows to plot")
    fig, axes = plt.subplots(1, len(logs), figsize=(5 * len(logs), 3.5), squeeze=False)
    plotted = {}
    for ax, (phase, rows) in zip(axes[0], logs.items()):
        it = np.array([r["iteration"] for r in rows], dtype=float)
        series = {}
        for f in fields:
            vals = np.array([r.get(f, 0.0) for r in rows], dtype=float)
            if np.any(vals != 0):
                ax.plot(it, vals, label=f, linewidth=1)
                series[f] = (it, vals)
        ax.set_title(phase)
        ax.set_xlabel("iteration")
        if series:
            ax.legend(fontsize=7)
        plotted[phase] = series
    fig.tight_layout()
    _save(fig, path)
    return plotted


def plot_momentum(T: int, path, m0=0.9, alpha=0.9, points: int = 200):
    """Plot the prototype momentum schedule; returns the plotted (t, m_t) arrays."""
    t = np.unique(np.linspace(0, T, min(points, T + 1)).round().astype(int))
    m = np.array([momentum(int(s), T, m0, alpha) for s in t])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(t, m)
    ax.set_xlabel("iteration")
    ax.set_ylabel("m_t")
    ax.set_title(f"prototype momentum (m0={m0}, alpha={alpha})")
    fig.tight_layout()
    _save(fig, path)
    return t, m
