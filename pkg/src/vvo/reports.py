"""CSV report tables.

Floats are written with ``repr`` so a written table reads back bit-identical.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

from .bilevel import ControlSchedule, StepRecord
from .feeder import FeederGraph


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ";".join(str(x) for x in v)
    return str(v)


def _parse(s: str):
    if s == "":
        return ""
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def write_rows(path, rows: list[dict], fieldnames: list[str] | None = None) -> Path:
    """Write ``rows`` to ``path``; columns follow the first row unless given."""
    path = Path(path)
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fieldnames)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in fieldnames])
    return path


def read_rows(path) -> list[dict]:
    """Read a table written by :func:`write_rows`, restoring int/float cells."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [{k: _parse(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def timestamp(step: int, step_minutes: float) -> str:
    minutes = int(round(step * step_minutes))
    return f"{minutes // 60:02d}:{minutes % 60:02d}"


def record_row(g: FeederGraph, rec: StepRecord, step_minutes: float) -> dict:
    """Flat schedule row with powers in kW/kVAr per phase."""
    kw = g.s_base_phase / 1e3
    sp = rec.setpoints
    row = {"step": rec.step, "time": timestamp(rec.step, step_minutes)}
    for reg in g.regulators:
        for p in reg.phases:
            row[f"tap_{reg.id}_{p.value}"] = sp.tap(reg.id, p)
    for cap in g.capacitors:
        for p in cap.phases:
            row[f"cap_{cap.id}_{p.value}"] = int(sp.cap_on(cap.id, p))
    for dg in g.dgs:
        for p in dg.phases:
            row[f"q_{dg.id}_{p.value}_kvar"] = sp.dg[dg.id][p][1] * kw
    row["l1_objective_kw"] = rec.l1_objective * kw
    row["l2_objective_kw"] = rec.l2_objective * kw
    ver = rec.verification
    for k, ph in enumerate("abc"):
        row[f"p_sub_{ph}_kw"] = ver.p_substation[k] * kw
    for k, ph in enumerate("abc"):
        row[f"q_sub_{ph}_kvar"] = ver.q_substation[k] * kw
    row["p_sub_kw"] = ver.p_total * kw
    row["v_min"] = ver.v_min
    row["v_avg"] = ver.v_avg
    row["v_max"] = ver.v_max
    row["flags"] = ";".join(rec.flags)
    return row


def schedule_rows(g: FeederGraph, sched: ControlSchedule) -> list[dict]:
    return [record_row(g, r, sched.step_minutes) for r in sched.records]


def comparison_rows(vvo: list[dict], base: list[dict]) -> list[dict]:
    """Per-step substation demand of both runs and the saving (kW and percent)."""
    if [r["step"] for r in vvo] != [r["step"] for r in base]:
        raise ValueError("schedules cover different steps")
    out = []
    for a, b in zip(vvo, base):
        save = b["p_sub_kw"] - a["p_sub_kw"]
        pct = save / b["p_sub_kw"] * 100.0 if b["p_sub_kw"] != 0 else math.nan
        out.append({"step": a["step"], "time": a["time"], "p_vvo_kw": a["p_sub_kw"],
                    "p_baseline_kw": b["p_sub_kw"], "savings_kw": save, "savings_pct": pct})
    return out


def energy_summary(rows: list[dict], step_minutes: float, key: str = "p_sub_kw") -> float:
    """Energy in kWh of a per-step power column."""
    return sum(r[key] for r in rows) * step_minutes / 60.0
