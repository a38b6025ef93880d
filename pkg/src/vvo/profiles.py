"""Daily load and PV multiplier series."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .feeder import FeederGraph
from .loads import CvrFactors, mix_cvr

MULT_MAX = 1.5
LOAD_CLASS_PREFIX = "load_mult_"


class ProfileError(ValueError):
    """Malformed or inconsistent profile data."""


@dataclass(frozen=True)
class ProfileSeries:
    """Per-step multipliers of nominal load and of rated DG output.

    ``class_mult`` optionally holds a separate load multiplier for each load
    class; it is combined with a load mix by :meth:`load_for`.
    """

    load_mult: tuple[float, ...]
    pv_mult: tuple[float, ...]
    class_mult: dict | None = None

    def __post_init__(self) -> None:
        n = len(self.load_mult)
        if n == 0:
            raise ProfileError("profile has no steps")
        series = {"load_mult": self.load_mult, "pv_mult": self.pv_mult}
        for k, v in (self.class_mult or {}).items():
            series[LOAD_CLASS_PREFIX + k] = v
        for name, vals in series.items():
            if len(vals) != n:
                raise ProfileError(f"series {name} has {len(vals)} steps, expected {n}")
            for k, x in enumerate(vals):
                if not math.isfinite(x) or x < 0 or x > MULT_MAX:
                    raise ProfileError(f"{name}[{k}] = {x!r} outside [0, {MULT_MAX}]")

    def __len__(self) -> int:
        return len(self.load_mult)

    def head(self, n: int) -> ProfileSeries:
        if n > len(self):
            raise ProfileError(f"requested {n} steps but the profile has {len(self)}")
        cm = {k: v[:n] for k, v in self.class_mult.items()} if self.class_mult else None
        return ProfileSeries(self.load_mult[:n], self.pv_mult[:n], cm)

    def load_for(self, step: int, mix: dict[str, float] | None = None) -> float:
        """Load multiplier of ``step``; per-class series are weighted by ``mix``."""
        if self.class_mult and mix:
            total = sum(mix.values())
            missing = set(mix) - set(self.class_mult)
            if missing:
                raise ProfileError(f"profile lacks load classes {sorted(missing)}")
            return sum(w * self.class_mult[k][step] for k, w in mix.items()) / total
        return self.load_mult[step]

    def min_load_step(self) -> int:
        return int(np.argmin(self.load_mult))

    def max_load_step(self) -> int:
        return int(np.argmax(self.load_mult))


def synthetic_day(steps: int = 96, load_min: float = 0.15, load_max: float = 0.65,
                  seed: int | None = None, noise: float = 0.02) -> ProfileSeries:
    """Residential-style day: overnight valley, morning shoulder, evening peak.

    PV follows a clear-sky bell between 06:00 and 18:00. With ``seed`` set,
    multiplicative noise of relative size ``noise`` is added to the load.
    """
    h = np.arange(steps) * 24.0 / steps
    shape = (
        0.35 * np.exp(-0.5 * ((h - 8.0) / 1.8) ** 2)
        + 0.25 * np.exp(-0.5 * ((h - 13.5) / 3.0) ** 2)
        + 1.0 * np.exp(-0.5 * ((h - 19.5) / 2.0) ** 2)
        + 0.9 * np.exp(-0.5 * ((h + 4.5) / 2.0) ** 2)
    )
    shape = (shape - shape.min()) / (shape.max() - shape.min())
    load = load_min + (load_max - load_min) * shape
    if seed is not None:
        rng = np.random.default_rng(seed)
        load = load * (1.0 + noise * rng.standard_normal(steps))
        load = np.clip(load, 0.0, MULT_MAX)
    pv = np.where((h > 6.0) & (h < 18.0), np.sin(np.pi * (h - 6.0) / 12.0) ** 2, 0.0)
    return ProfileSeries(tuple(float(x) for x in load), tuple(float(x) for x in pv))


def load_profiles(path) -> ProfileSeries:
    """Read a ``step,load_mult,pv_mult[,load_mult_<class>...]`` CSV."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for need in ("step", "load_mult", "pv_mult"):
            if need not in cols:
                raise ProfileError(f"{path}: missing column {need!r}")
        rows = list(reader)
    classes = [c[len(LOAD_CLASS_PREFIX):] for c in cols if c.startswith(LOAD_CLASS_PREFIX)]
    try:
        steps = [int(r["step"]) for r in rows]
        load = tuple(float(r["load_mult"]) for r in rows)
        pv = tuple(float(r["pv_mult"]) for r in rows)
        cm = {c: tuple(float(r[LOAD_CLASS_PREFIX + c]) for r in rows) for c in classes} or None
    except (TypeError, ValueError) as exc:
        raise ProfileError(f"{path}: non-numeric entry ({exc})") from None
    if steps != list(range(len(steps))):
        raise ProfileError(f"{path}: steps must run 0, 1, 2, ... without gaps")
    return ProfileSeries(load, pv, cm)


def save_profiles(p: ProfileSeries, path) -> None:
    classes = sorted(p.class_mult) if p.class_mult else []
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "load_mult", "pv_mult"] + [LOAD_CLASS_PREFIX + c for c in classes])
        for k in range(len(p)):
            w.writerow([k, repr(p.load_mult[k]), repr(p.pv_mult[k])] + [repr(p.class_mult[c][k]) for c in classes])


def bundled_profile() -> ProfileSeries:
    """The shipped 96-step synthetic day."""
    with resources.as_file(resources.files("vvo") / "data" / "daily_profile.csv") as f:
        return load_profiles(f)


@dataclass(frozen=True)
class StepInputs:
    """Feeder data of one time step."""

    step: int
    graph: FeederGraph
    dg_p: dict


def step_inputs(g: FeederGraph, prof: ProfileSeries, step: int, cvr: CvrFactors | None = None,
                mix: dict[str, float] | None = None) -> StepInputs:
    """Scaled feeder and DG forecast for ``step``.

    ``mix`` both weights per-class load series (if any) and, when ``cvr`` is
    not given, sets uniform CVR factors from the class composition.
    """
    if cvr is None and mix:
        cvr = mix_cvr(mix)
    gs = g.scaled(prof.load_for(step, mix), cvr)
    dg_p = {dg.id: prof.pv_mult[step] * dg.p_rated for dg in g.dgs}
    return StepInputs(step, gs, dg_p)
