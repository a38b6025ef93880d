"""Static figures of report tables (PNG, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (7.0, 3.6),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def _hours(rows, step_minutes: float) -> list[float]:
    return [r["step"] * step_minutes / 60.0 for r in rows]


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_schedule(rows: list[dict], step_minutes: float, path) -> Path:
    """Substation demand and the min/avg/max voltage band over the horizon."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(7.0, 5.0))
        h = _hours(rows, step_minutes)
        ax1.plot(h, [r["p_sub_kw"] for r in rows], color="C0")
        ax1.set_ylabel("substation P (kW)")
        ax2.fill_between(h, [r["v_min"] for r in rows], [r["v_max"] for r in rows], color="C1", alpha=0.25,
                         label="min to max")
        ax2.plot(h, [r["v_avg"] for r in rows], color="C1", label="average")
        ax2.set_ylabel("|V| (pu)")
        ax2.set_xlabel("hour")
        ax2.legend(loc="best")
        return _save(fig, path)


def plot_comparison(rows: list[dict], step_minutes: float, path) -> Path:
    """Optimised against baseline substation demand, with per-step savings."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(7.0, 5.0))
        h = _hours(rows, step_minutes)
        ax1.plot(h, [r["p_baseline_kw"] for r in rows], color="0.4", label="baseline")
        ax1.plot(h, [r["p_vvo_kw"] for r in rows], color="C0", label="VVO")
        ax1.set_ylabel("substation P (kW)")
        ax1.legend(loc="best")
        ax2.bar(h, [r["savings_pct"] for r in rows], width=step_minutes / 60.0 * 0.8, color="C2")
        ax2.set_ylabel("savings (%)")
        ax2.set_xlabel("hour")
        return _save(fig, path)


def plot_profiles(bus_rows: dict[str, list[dict]], path, title: str = "") -> Path:
    """Node voltage magnitudes of several solutions of one loading level."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(8.0, 3.6))
        base = next(iter(bus_rows.values()))
        labels = [f"{r['bus']}.{r['phase']}" for r in base]
        x = range(len(labels))
        for k, (name, rows) in enumerate(bus_rows.items()):
            ax.plot(x, [r["v_pu"] for r in rows], marker="o", ms=3, lw=0.8, color=f"C{k}", label=name)
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, rotation=90, fontsize=6)
        ax.set_ylabel("|V| (pu)")
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        return _save(fig, path)
