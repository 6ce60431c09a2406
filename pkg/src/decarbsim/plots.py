"""Static SVG charts for a scenario run."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _setup():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "decarbsim"  # stable element ids
    return plt


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    return path


def render_charts(results, cost_rows, importance, out: Path) -> dict:
    """GHG bars per CAV level, the feature-importance Pareto chart and the scorecard."""
    plt = _setup()
    paths = {}
    mixes = list(dict.fromkeys(r.scenario.mix for r in results))
    for mpr in sorted({r.scenario.cav_mpr for r in results}):
        sel = [r for r in results if r.scenario.cav_mpr == mpr]
        series = sorted({(r.scenario.routing, r.scenario.eco_driving) for r in sel})
        fig, ax = plt.subplots(figsize=(max(6, 0.7 * len(mixes) * max(1, len(series)) / 2), 4))
        width = 0.8 / max(1, len(series))
        x = np.arange(len(mixes))
        for k, (routing, eco) in enumerate(series):
            vals = {r.scenario.mix: r.mean["wtw_ghg_kg"] for r in sel
                    if (r.scenario.routing, r.scenario.eco_driving) == (routing, eco)}
            ax.bar(x + k * width, [vals.get(m, np.nan) for m in mixes], width, label=f"{routing}/{eco}")
        ax.set_xticks(x + width * (len(series) - 1) / 2, mixes, rotation=45, ha="right")
        ax.set_ylabel("WTW GHG (kg CO2eq)")
        ax.set_title(f"{int(round(mpr * 100))}% CAV")
        ax.legend(fontsize=8)
        paths[f"ghg_cav{int(round(mpr * 100))}"] = _save(fig, out / f"ghg_cav{int(round(mpr * 100))}.svg")
        plt.close(fig)

    if importance is not None:
        ranked = importance.ranked()
        fig, ax = plt.subplots(figsize=(7, 4))
        names = [f for f, _, _ in ranked]
        ax.bar(names, [i for _, i, _ in ranked], color="tab:blue")
        ax2 = ax.twinx()
        ax2.plot(names, [100 * c for _, _, c in ranked], color="tab:red", marker="o")
        ax2.set_ylim(0, 105)
        ax2.set_ylabel("cumulative %")
        ax.set_ylabel("importance")
        ax.tick_params(axis="x", rotation=45)
        ax.set_title("Emission-cost feature importance")
        paths["pareto_chart"] = _save(fig, out / "pareto.svg")
        plt.close(fig)

    # scorecard for the richest CAV cell available, default cost basis
    rows = [r for r in cost_rows if r[5] == "default"]
    if rows:
        cell = max({(r[2], r[3], r[4]) for r in rows}, key=lambda c: (c[0], c[1] == "A", c[2] == "ED"))
        rows = [r for r in rows if (r[2], r[3], r[4]) == cell]
        fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(rows)), 4))
        x = np.arange(len(rows))
        ax.bar(x - 0.2, [r[-2] for r in rows], 0.4, label="emission")
        ax.bar(x + 0.2, [r[-1] for r in rows], 0.4, label="non-emission")
        ax.set_xticks(x, [r[1] for r in rows], rotation=45, ha="right")
        ax.set_ylim(0, 55)
        ax.set_ylabel("score (best = 50)")
        ax.set_title(f"Cost scorecard, {int(round(cell[0] * 100))}% CAV {cell[1]}/{cell[2]}")
        ax.legend(fontsize=8)
        paths["scorecard_chart"] = _save(fig, out / "scorecard.svg")
        plt.close(fig)
    return paths
