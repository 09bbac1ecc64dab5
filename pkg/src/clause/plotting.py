"""Figures written next to the CSV/JSON outputs of the CLI (Agg backend, PNG files)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}
RESOURCE_LABELS = {"edge": "edges", "lat": "steps (latency proxy)", "tok": "tokens"}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def training_curves(rows: Sequence[Mapping[str, float]], path: str | Path,
                    budgets: Sequence[float] | None = None) -> Path:
    """EM, mean costs and duals per iteration; one panel per resource."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 3, figsize=(10, 5.5))
        it = [r["iter"] for r in rows]
        axes[0, 0].plot(it, [r["em"] for r in rows], color="k")
        axes[0, 0].set_ylabel("EM (batch)")
        axes[0, 0].set_ylim(-0.02, 1.02)
        axes[0, 1].plot(it, [r["feasibility"] for r in rows], color="tab:green")
        axes[0, 1].set_ylabel("feasibility")
        axes[0, 1].set_ylim(-0.02, 1.02)
        axes[0, 2].plot(it, [r["entropy"] for r in rows], color="tab:gray", label="entropy")
        axes[0, 2].plot(it, [r["loss_v"] for r in rows], color="tab:purple", label="critic loss")
        axes[0, 2].legend()
        for j, k in enumerate(("edge", "lat", "tok")):
            ax = axes[1, j]
            ax.plot(it, [r[f"c_{k}"] for r in rows], color="tab:blue")
            if budgets is not None:
                ax.axhline(budgets[j], color="tab:blue", ls="--", lw=0.8)
            ax.set_ylabel(f"mean {RESOURCE_LABELS[k]}", color="tab:blue")
            ax.set_xlabel("iteration")
            tw = ax.twinx()
            tw.plot(it, [r[f"lambda_{k}"] for r in rows], color="tab:red", lw=0.9)
            tw.set_ylabel(f"lambda_{k}", color="tab:red")
        return _save(fig, path)


def frontier(rows: Sequence[Mapping[str, float]], axis: str, path: str | Path) -> Path:
    """EM (mean with std band) and the swept resource's spend against the swept value."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        x = [r["value"] for r in rows]
        em = [r["em_mean"] for r in rows]
        sd = [r["em_std"] for r in rows]
        ax.errorbar(x, em, yerr=sd, marker="o", color="k", capsize=3)
        ax.set_xlabel(axis)
        ax.set_ylabel("EM")
        ax.set_ylim(-0.02, 1.02)
        res = axis.split("_", 1)[1]
        if f"c_{res}" in rows[0]:
            tw = ax.twinx()
            tw.plot(x, [r[f"c_{res}"] for r in rows], marker="s", color="tab:orange", lw=0.9)
            tw.set_ylabel(f"mean {RESOURCE_LABELS.get(res, res)}", color="tab:orange")
        if all(v > 0 for v in x):
            ax.set_xscale("log", base=2)
        return _save(fig, path)


def constraint_comparison(reports: Mapping[str, Mapping[str, float]], path: str | Path) -> Path:
    """Grouped bars of feasibility and per-resource violation for several runs."""
    keys = ["feasibility", "viol_edge", "viol_lat", "viol_tok", "em"]
    names = list(reports)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.5, 3.5))
        width = 0.8 / max(len(names), 1)
        for i, name in enumerate(names):
            xs = [k + (i - (len(names) - 1) / 2) * width for k in range(len(keys))]
            ax.bar(xs, [reports[name].get(k, 0.0) for k in keys], width, label=name)
        ax.set_xticks(range(len(keys)))
        ax.set_xticklabels(keys)
        ax.legend()
        return _save(fig, path)
