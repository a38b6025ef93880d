"""Command-line front end for validation studies and daily VVO runs.

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import reports
from .approx import (angle_error_deg, build_linear_model, build_quadratic_model, model_error_report,
                     solve_linear_pf, solve_quadratic_pf)
from .bilevel import DispatchError, StepRecord, ControlSchedule, Verification, orchestrate_timestep
from .feeder import FeederError, FeederGraph, bundled_feeder, load_feeder, reduce_network
from .loads import CvrFactors
from .powerflow import (DeviceSetpoints, HuntingError, PowerFlowError, estimate_current_angles,
                        run_autonomous_baseline, solution_rows, solve_reference_pf, unbalance_by_bus)
from .profiles import ProfileError, ProfileSeries, bundled_profile, load_profiles, step_inputs, synthetic_day

log = logging.getLogger("vvo")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
MODES = ("pf-validate", "vvo-day", "baseline-day", "compare")
HORIZON_MINUTES = 24 * 60


class InputError(ValueError):
    """Inconsistent command-line configuration."""


@dataclass(frozen=True)
class RunConfig:
    """Resolved inputs of one CLI invocation."""

    graph: FeederGraph
    profile: ProfileSeries | None
    mode: str
    out: Path
    step_minutes: float = 15.0
    levels: tuple[float, ...] = (75.0, 100.0)
    cvr: CvrFactors | None = None
    mix: dict | None = None
    rel_gap: float = 1e-6
    time_limit: float | None = None
    workers: int = 1
    plots: bool = True


def parse_mix(text: str) -> dict[str, float]:
    """``residential=0.8,large_commercial=0.2`` to a weight map."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, sep, val = part.partition("=")
        if not sep:
            raise InputError(f"load-mix entry {part!r} is not name=weight")
        try:
            out[name.strip()] = float(val)
        except ValueError:
            raise InputError(f"load-mix weight {val!r} is not a number") from None
    if not out or any(w < 0 for w in out.values()) or sum(out.values()) <= 0:
        raise InputError("load-mix weights must be nonnegative with a positive sum")
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vvo", description="Bi-level volt-var optimisation of unbalanced feeders.")
    ap.add_argument("--feeder", type=Path, help="feeder JSON (default: bundled IEEE 13-bus)")
    ap.add_argument("--profiles", type=Path, help="CSV with step,load_mult,pv_mult (default: bundled day)")
    ap.add_argument("--dg-profiles", type=Path, help="CSV whose pv_mult column overrides the load profile's")
    ap.add_argument("--mode", choices=MODES, required=True)
    ap.add_argument("--steps", type=int, help="run only the first N steps")
    ap.add_argument("--step-minutes", type=float, default=15.0)
    ap.add_argument("--out", type=Path, default=Path("out"))
    ap.add_argument("--reduce", action="store_true", help="merge bare series buses before solving")
    ap.add_argument("--vmin", type=float)
    ap.add_argument("--vmax", type=float)
    ap.add_argument("--cvr-p", type=float, help="uniform active-power CVR factor for every load")
    ap.add_argument("--cvr-q", type=float, help="uniform reactive-power CVR factor for every load")
    ap.add_argument("--load-mix", help="class fractions, e.g. residential=0.8,large_commercial=0.2")
    ap.add_argument("--seed", type=int, help="noise seed for the synthetic profile (used without --profiles)")
    ap.add_argument("--levels", default="75,100", help="pf-validate loading levels in percent")
    ap.add_argument("--rel-gap", type=float, default=1e-6)
    ap.add_argument("--time-limit", type=float, help="Level-1 branch-and-bound time limit per step (s)")
    ap.add_argument("--workers", type=int, default=1, help="parallel step workers")
    ap.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    g = load_feeder(args.feeder) if args.feeder else bundled_feeder()
    if args.vmin is not None or args.vmax is not None:
        lo = g.v_min if args.vmin is None else args.vmin
        hi = g.v_max if args.vmax is None else args.vmax
        if not 0 < lo < hi:
            raise InputError(f"voltage limits must satisfy 0 < vmin < vmax, got {lo}, {hi}")
        g = g.with_limits(lo, hi)
    if args.reduce:
        g, _ = reduce_network(g)
    if (args.cvr_p is None) != (args.cvr_q is None):
        raise InputError("--cvr-p and --cvr-q must be given together")
    if args.cvr_p is not None and args.load_mix:
        raise InputError("--load-mix and --cvr-p/--cvr-q are mutually exclusive")
    cvr = CvrFactors(args.cvr_p, args.cvr_q) if args.cvr_p is not None else None
    mix = parse_mix(args.load_mix) if args.load_mix else None
    if args.step_minutes <= 0:
        raise InputError("--step-minutes must be positive")
    if args.workers < 1:
        raise InputError("--workers must be at least 1")
    try:
        levels = tuple(float(x) for x in args.levels.split(",") if x.strip())
    except ValueError:
        raise InputError(f"--levels {args.levels!r} is not a comma-separated list of numbers") from None
    if not levels or any(lv < 0 for lv in levels):
        raise InputError("--levels needs at least one nonnegative loading level")

    prof = None
    if args.mode != "pf-validate":
        if args.profiles:
            prof = load_profiles(args.profiles)
        elif args.seed is not None:
            prof = synthetic_day(seed=args.seed)
        else:
            prof = bundled_profile()
        if args.dg_profiles:
            pv = load_profiles(args.dg_profiles)
            if len(pv) != len(prof):
                raise InputError(f"DG profile has {len(pv)} steps, load profile {len(prof)}")
            prof = replace(prof, pv_mult=pv.pv_mult)
        span = len(prof) * args.step_minutes
        if not math.isclose(span, HORIZON_MINUTES):
            raise InputError(f"{len(prof)} steps of {args.step_minutes} min span {span} min, not one day")
        if args.steps is not None:
            if args.steps < 1:
                raise InputError("--steps must be positive")
            prof = prof.head(args.steps)
    return RunConfig(g, prof, args.mode, args.out, args.step_minutes, levels, cvr, mix,
                     args.rel_gap, args.time_limit, args.workers, not args.no_plots)


# ------------------------------------------------------------------ modes


def cmd_pf_validate(cfg: RunConfig) -> dict[str, Path]:
    """Reference, linear and quadratic power flow at each loading level."""
    g0 = cfg.graph
    err_rows, ang_rows, paths = [], [], {}
    for level in cfg.levels:
        g = g0.scaled(level / 100.0, cfg.cvr)
        sp = DeviceSetpoints.nominal(g)
        ref = solve_reference_pf(g, sp)
        angles = estimate_current_angles(g, sp)
        unb_ref = unbalance_by_bus(ref.topology, ref.vmag)
        buses = {"reference": solution_rows(ref)[0]}
        for name, build, solve in (("linear", build_linear_model, solve_linear_pf),
                                   ("quadratic", build_quadratic_model, solve_quadratic_pf)):
            spec = build(g, angles=angles, setpoints=sp)
            sol = solve(spec)
            rep = model_error_report(spec, sol, ref)
            unb = unbalance_by_bus(ref.topology, sol.vmag)
            row = rep.row(g.name, level, name)
            row["substation_p_err_pct"] = rep.substation_p_pct
            row["unbalance_ref_pct"] = max(unb_ref.values(), default=0.0)
            row["unbalance_err_pct"] = max((abs(unb[b] - unb_ref[b]) for b in unb_ref), default=0.0)
            err_rows.append(row)
            buses[name] = [dict(r, v_pu=float(sol.vmag[ref.topology.bus_index[r["bus"]], "abc".index(r["phase"])]))
                           for r in buses["reference"]]
        ang_rows.append({"feeder": g.name, "loading_pct": level,
                         "max_angle_err_deg": angle_error_deg(angles, ref)})
        tag = _level_tag(level)
        bus_rows, line_rows = solution_rows(ref)
        paths[f"buses_{tag}"] = reports.write_rows(cfg.out / f"pf_buses_{tag}.csv", bus_rows)
        paths[f"lines_{tag}"] = reports.write_rows(cfg.out / f"pf_lines_{tag}.csv", line_rows)
        if cfg.plots:
            from .plotting import plot_profiles
            paths[f"profile_{tag}"] = plot_profiles(buses, cfg.out / f"pf_voltage_{tag}.png",
                                                    title=f"{g.name} at {level:g}% load")
    paths["errors"] = reports.write_rows(cfg.out / "pf_errors.csv", err_rows)
    paths["angles"] = reports.write_rows(cfg.out / "angle_errors.csv", ang_rows)
    return paths


def _level_tag(level: float) -> str:
    return f"{level:g}".replace(".", "p")


def _vvo_step(task) -> StepRecord:
    g, prof, k, cvr, mix, rel_gap, time_limit = task
    inp = step_inputs(g, prof, k, cvr, mix)
    return orchestrate_timestep(inp.graph, inp.dg_p, k, rel_gap=rel_gap, time_limit=time_limit)


def _baseline_step(task) -> StepRecord:
    g, prof, k, cvr, mix = task[:5]
    inp = step_inputs(g, prof, k, cvr, mix)
    flags: tuple[str, ...] = ()
    try:
        sp, sol = run_autonomous_baseline(inp.graph, inp.dg_p)
    except HuntingError as exc:
        log.warning("step %d: %s; reporting the last visited state", k, exc)
        sp = DeviceSetpoints.build(inp.graph, dg_p=inp.dg_p)
        sol = solve_reference_pf(inp.graph, sp)
        flags = ("baseline-hunting",)
    nan = float("nan")
    return StepRecord(k, sp, nan, nan, Verification.of(sol), flags)


def _run_steps(cfg: RunConfig, fn) -> ControlSchedule:
    tasks = [(cfg.graph, cfg.profile, k, cfg.cvr, cfg.mix, cfg.rel_gap, cfg.time_limit)
             for k in range(len(cfg.profile))]
    sched = ControlSchedule(step_minutes=cfg.step_minutes)
    if cfg.workers == 1:
        results = map(fn, tasks)
    else:
        pool = ProcessPoolExecutor(max_workers=cfg.workers)
        results = pool.map(fn, tasks)
    try:
        for rec in results:
            sched.add(rec)
            log.info("step %d: P=%.4f pu v_min=%.4f %s", rec.step, rec.verification.p_total,
                     rec.verification.v_min, ",".join(rec.flags))
    finally:
        if cfg.workers != 1:
            pool.shutdown()
    return sched


def _summary(rows: list[dict], step_minutes: float) -> list[dict]:
    flagged = sum(1 for r in rows if r["flags"])
    return [
        {"metric": "energy_kwh", "value": reports.energy_summary(rows, step_minutes)},
        {"metric": "steps", "value": len(rows)},
        {"metric": "flagged_steps", "value": flagged},
        {"metric": "v_min", "value": min(r["v_min"] for r in rows)},
        {"metric": "v_avg_mean", "value": float(np.mean([r["v_avg"] for r in rows]))},
        {"metric": "v_max", "value": max(r["v_max"] for r in rows)},
    ]


def _day(cfg: RunConfig, fn, stem: str) -> tuple[list[dict], dict[str, Path]]:
    sched = _run_steps(cfg, fn)
    rows = reports.schedule_rows(cfg.graph, sched)
    paths = {
        stem: reports.write_rows(cfg.out / f"{stem}.csv", rows),
        f"{stem}_summary": reports.write_rows(cfg.out / f"{stem}_summary.csv", _summary(rows, cfg.step_minutes)),
    }
    if cfg.plots:
        from .plotting import plot_schedule
        paths[f"{stem}_figure"] = plot_schedule(rows, cfg.step_minutes, cfg.out / f"{stem}.png")
    return rows, paths


def cmd_vvo_day(cfg: RunConfig) -> dict[str, Path]:
    return _day(cfg, _vvo_step, "schedule")[1]


def cmd_baseline_day(cfg: RunConfig) -> dict[str, Path]:
    return _day(cfg, _baseline_step, "baseline")[1]


def cmd_compare(cfg: RunConfig) -> dict[str, Path]:
    vvo, paths = _day(cfg, _vvo_step, "schedule")
    base, more = _day(cfg, _baseline_step, "baseline")
    paths.update(more)
    rows = reports.comparison_rows(vvo, base)
    e_vvo = reports.energy_summary(rows, cfg.step_minutes, "p_vvo_kw")
    e_base = reports.energy_summary(rows, cfg.step_minutes, "p_baseline_kw")
    best = max(rows, key=lambda r: r["savings_pct"])
    summary = [
        {"metric": "energy_vvo_kwh", "value": e_vvo},
        {"metric": "energy_baseline_kwh", "value": e_base},
        {"metric": "savings_kwh", "value": e_base - e_vvo},
        {"metric": "savings_pct", "value": (e_base - e_vvo) / e_base * 100.0 if e_base else float("nan")},
        {"metric": "max_savings_step", "value": best["step"]},
    ]
    paths["comparison"] = reports.write_rows(cfg.out / "comparison.csv", rows)
    paths["comparison_summary"] = reports.write_rows(cfg.out / "comparison_summary.csv", summary)
    if cfg.plots:
        from .plotting import plot_comparison
        paths["comparison_figure"] = plot_comparison(rows, cfg.step_minutes, cfg.out / "comparison.png")
    return paths


COMMANDS = {"pf-validate": cmd_pf_validate, "vvo-day": cmd_vvo_day,
            "baseline-day": cmd_baseline_day, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (InputError, FeederError, ProfileError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: cannot read input: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
        paths = COMMANDS[cfg.mode](cfg)
    except (PowerFlowError, DispatchError) as exc:
        print(f"error: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_IO
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
