"""Two-level Volt-VAR dispatch for one time step.

Level 1 chooses regulator taps, capacitor states and inverter vars on the
lossless linear model (a MILP). Level 2 freezes the discrete choices and
re-optimises inverter vars on the quadratic model by SLP. The outcome is
then checked with the reference power flow.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .approx import (
    LinearSystemSpec,
    ModelSolution,
    build_linear_model,
    build_quadratic_model,
    extract_solution,
    reference_as_vector,
)
from .feeder import PHASES, FeederGraph, Phase, tap_positions, tap_ratio
from .model import ModelBuilder
from .powerflow import (
    AngleConstants,
    BaselineConfig,
    DeviceSetpoints,
    PowerFlowError,
    PowerFlowSolution,
    estimate_current_angles,
    run_autonomous_baseline,
    solve_reference_pf,
)
from .solvers import LpProblem, MipProblem, SolveOutcome, solve_lp, solve_mip, solve_slp

log = logging.getLogger(__name__)

VERIFY_MARGIN = 0.002
RETIGHTEN_STEP = 0.005
# cost per tap step away from neutral and per capacitor switched on; breaks
# exact ties (e.g. an unloaded feeder) without moving any real trade-off
TIE_BREAK = 1e-7


class DispatchError(RuntimeError):
    """A level of the dispatch could not produce a usable answer."""


class Level1Infeasible(DispatchError):
    """No discrete setting satisfies the voltage limits on the linear model."""

    def __init__(self, message: str, violations: list[dict]):
        super().__init__(message)
        self.violations = violations


# ------------------------------------------------------------------ helpers


def _dg_p(g: FeederGraph, dg_p) -> dict[str, dict[Phase, float]]:
    out = {}
    for dg in g.dgs:
        val = (dg_p or {}).get(dg.id, 0.0)
        out[dg.id] = {p: float(val.get(p, 0.0) if isinstance(val, dict) else val) for p in dg.phases}
    return out


def _sub_p_cols(spec: LinearSystemSpec) -> list[int]:
    topo = spec.graph.topology
    return [spec.index.P[(bi, p)] for bi in topo.children[topo.substation] for p in topo.branches[bi].phases]


def _envelope(b: ModelBuilder, w: int, u: int, v: int, lo: float, hi: float, tag: str) -> None:
    """Rows making ``w == u*v`` exact for binary ``u`` and ``lo <= v <= hi``."""
    b.row([(w, 1.0), (u, -hi)], "<", 0.0, f"env1[{tag}]")
    b.row([(w, 1.0), (u, -lo)], ">", 0.0, f"env2[{tag}]")
    b.row([(w, 1.0), (v, -1.0), (u, -lo)], "<", -lo, f"env3[{tag}]")
    b.row([(w, 1.0), (v, -1.0), (u, -hi)], ">", -hi, f"env4[{tag}]")


def _add_dg_columns(g: FeederGraph, spec: LinearSystemSpec, dgp) -> dict:
    b, ix, topo = spec.builder, spec.index, g.topology
    cols = {}
    for dg in g.dgs:
        j = topo.bus_index[dg.bus]
        for ph in dg.phases:
            qmax = dg.q_limit(dgp[dg.id][ph])
            col = b.var(f"qdg[{dg.id}.{ph.value}]", -qmax, qmax)
            b.add_to_row(ix.q_balance[(j, ph.index)], col, 1.0)
            cols[(dg.id, ph)] = col
    return cols


# ------------------------------------------------------------------ level 1


@dataclass
class Level1Instance:
    """MILP for one step plus handles needed to decode it."""

    graph: FeederGraph
    spec: LinearSystemSpec
    mip: MipProblem
    tap_u: dict  # (reg id, phases tuple) -> list of u columns ordered by tap
    tap_w: dict  # (reg id, phase) -> list of w columns
    cap_u: dict  # (cap id, phases tuple) -> u column
    cap_w: dict  # (cap id, phase) -> w column
    q_dg: dict  # (dg id, phase) -> column
    dg_p: dict
    v_limits: tuple[float, float]


def build_level1(g: FeederGraph, dg_p=None, angles: AngleConstants | None = None,
                 v_limits: tuple[float, float] | None = None) -> Level1Instance:
    """Assemble the step MILP.

    Tap selection is a one-hot vector over every tap position; the products
    ``u_k * v_i`` and ``u_cap * v_j`` become auxiliary columns with exact
    envelope rows built from the bounds of the voltage column involved.
    """
    v_limits = (g.v_min, g.v_max) if v_limits is None else v_limits
    if v_limits[0] > v_limits[1]:
        raise ValueError("v_min must not exceed v_max")
    dgp = _dg_p(g, dg_p)
    setp = DeviceSetpoints.build(g, dg_p=dgp)
    spec = build_linear_model(g, angles, setp, free_devices=True, v_limits=v_limits)
    b, ix, topo = spec.builder, spec.index, g.topology
    integer: set[int] = set()
    sos1 = []
    taps = tap_positions()
    B = np.array([tap_ratio(int(t)) ** 2 for t in taps])

    tap_u, tap_w = {}, {}
    for br in topo.branches:
        if br.kind != "regulator":
            continue
        reg = next(r for r in g.regulators if r.id == br.regulator)
        i, j = br.from_idx, br.to_idx
        regulated = [PHASES[p] for p in br.regulated]
        groups = [tuple(regulated)] if reg.ganged else [(p,) for p in regulated]
        for grp in groups:
            key = "".join(p.value for p in grp)
            us = [b.var(f"utap[{reg.id}.{key}.{int(t)}]", 0.0, 1.0, TIE_BREAK * abs(int(t))) for t in taps]
            integer.update(us)
            sos1.append(tuple(us))
            b.row([(u, 1.0) for u in us], "=", 1.0, f"onehot[{reg.id}.{key}]")
            tap_u[(reg.id, grp)] = us
            for ph in grp:
                vi = ix.v[(i, ph.index)]
                lo, hi = b.lb[vi], b.ub[vi]
                if not (math.isfinite(lo) and math.isfinite(hi)):
                    raise ValueError("regulator input voltage needs finite bounds")
                ws = []
                for k, (t, u) in enumerate(zip(taps, us)):
                    w = b.var(f"wtap[{reg.id}.{ph.value}.{int(t)}]", min(0.0, lo), max(0.0, hi))
                    _envelope(b, w, u, vi, lo, hi, f"{reg.id}.{ph.value}.{int(t)}")
                    ws.append(w)
                b.row([(w, 1.0) for w in ws] + [(vi, -1.0)], "=", 0.0, f"wsum[{reg.id}.{ph.value}]")
                b.row([(ix.v[(j, ph.index)], 1.0)] + [(w, -B[k]) for k, w in enumerate(ws)], "=", 0.0,
                      f"reg[{reg.id}.{ph.value}]")
                tap_w[(reg.id, ph)] = ws
        for p in br.phases:
            if p not in br.regulated:
                b.row([(ix.v[(j, p)], 1.0), (ix.v[(i, p)], -1.0)], "=", 0.0, f"reg[{br.id}.{PHASES[p].value}]")

    cap_u, cap_w = {}, {}
    for cap in g.capacitors:
        j = topo.bus_index[cap.bus]
        groups = [tuple(cap.phases)] if cap.common_switch else [(p,) for p in cap.phases]
        for grp in groups:
            key = "".join(p.value for p in grp)
            u = b.var(f"ucap[{cap.id}.{key}]", 0.0, 1.0, TIE_BREAK)
            integer.add(u)
            cap_u[(cap.id, grp)] = u
            for ph in grp:
                vj = ix.v[(j, ph.index)]
                lo, hi = b.lb[vj], b.ub[vj]
                w = b.var(f"wcap[{cap.id}.{ph.value}]", 0.0, hi)
                _envelope(b, w, u, vj, lo, hi, f"{cap.id}.{ph.value}")
                b.add_to_row(ix.q_balance[(j, ph.index)], w, cap.q_rated_per_phase)
                cap_w[(cap.id, ph)] = w

    q_dg = _add_dg_columns(g, spec, dgp)
    for col in _sub_p_cols(spec):
        b.cost[col] += 1.0
    lp = b.to_lp()
    mask = np.zeros(lp.n, dtype=bool)
    mask[list(integer)] = True
    mip = MipProblem(lp, mask, tuple(sos1))
    return Level1Instance(g, spec, mip, tap_u, tap_w, cap_u, cap_w, q_dg, dgp, tuple(v_limits))


@dataclass
class LevelResult:
    """Setpoints and model solution produced by one level."""

    setpoints: DeviceSetpoints
    solution: ModelSolution
    objective: float
    outcome: SolveOutcome


def decode_level1(inst: Level1Instance, x: np.ndarray) -> DeviceSetpoints:
    taps_pos = tap_positions()
    taps = {}
    for (reg, grp), us in inst.tap_u.items():
        t = int(taps_pos[int(np.argmax(x[us]))])
        for ph in grp:
            taps.setdefault(reg, {})[ph] = t
    caps = {}
    for (cap, grp), u in inst.cap_u.items():
        for ph in grp:
            caps.setdefault(cap, {})[ph] = bool(x[u] > 0.5)
    dg_q = {}
    for (dg, ph), col in inst.q_dg.items():
        dg_q.setdefault(dg, {})[ph] = float(x[col])
    return DeviceSetpoints.build(inst.graph, taps=taps, caps=caps, dg_p=inst.dg_p, dg_q=dg_q)


def solve_level1(inst: Level1Instance, rel_gap: float = 1e-6, time_limit: float | None = None) -> LevelResult:
    """Solve the step MILP and decode taps, capacitor states and DG vars.

    Raises:
        Level1Infeasible: with the voltage bounds that cannot be met.
        DispatchError: on any other non-optimal outcome.
    """
    out = solve_mip(inst.mip, rel_gap=rel_gap, time_limit=time_limit)
    if out.status == "infeasible":
        viol = infeasibility_analysis(inst)
        worst = ", ".join(f"{d['bound']} at {d['node']} by {d['shortfall_pu']:.4g} pu" for d in viol[:3])
        raise Level1Infeasible(f"Level-1 infeasible: voltage limits unattainable ({worst or 'no single bound'})",
                               viol)
    if out.x is None:
        raise DispatchError(f"Level-1 solve ended with status {out.status}")
    sp = decode_level1(inst, out.x)
    sol = extract_solution(inst.spec, out.x)
    return LevelResult(sp, sol, sol.substation_p(inst.spec), out)


def infeasibility_analysis(inst: Level1Instance) -> list[dict]:
    """Elastic LP on the voltage bounds of the relaxed MILP.

    Returns the nodes whose limits must be violated, largest shortfall first.
    """
    lp = inst.mip.lp
    ix = inst.spec.index
    topo = inst.graph.topology
    lo2, hi2 = inst.v_limits[0] ** 2, inst.v_limits[1] ** 2
    vcols = [(key, col) for key, col in ix.v.items() if key[0] != topo.substation]
    lb, ub = lp.lb.copy(), lp.ub.copy()
    extra = len(vcols) * 2
    import scipy.sparse as sp

    rows, cols, vals, rhs, senses = [], [], [], [], []
    for k, (_, col) in enumerate(vcols):
        lb[col], ub[col] = 0.0, np.inf
        rows += [2 * k, 2 * k, 2 * k + 1, 2 * k + 1]
        cols += [col, lp.n + 2 * k, col, lp.n + 2 * k + 1]
        vals += [1.0, 1.0, 1.0, -1.0]
        rhs += [lo2, hi2]
        senses += [">", "<"]
    A_extra = sp.csr_matrix((vals, (rows, cols)), shape=(2 * len(vcols), lp.n + extra))
    A = sp.vstack([sp.hstack([lp.A, sp.csr_matrix((lp.m, extra))]), A_extra]).tocsr()
    c = np.concatenate([np.zeros(lp.n), np.ones(extra)])
    elastic = LpProblem(c, A, lp.senses + tuple(senses), np.concatenate([lp.rhs, rhs]),
                        np.concatenate([lb, np.zeros(extra)]), np.concatenate([ub, np.full(extra, np.inf)]))
    out = solve_lp(elastic)
    if not out.ok:
        return []
    res = []
    for k, ((j, p), _) in enumerate(vcols):
        s_lo, s_hi = out.x[lp.n + 2 * k], out.x[lp.n + 2 * k + 1]
        node = f"{topo.bus_ids[j]}.{PHASES[p].value}"
        if s_lo > 1e-9:
            res.append({"node": node, "bound": "v_min", "shortfall_pu": math.sqrt(lo2) - math.sqrt(max(lo2 - s_lo, 0))})
        if s_hi > 1e-9:
            res.append({"node": node, "bound": "v_max", "shortfall_pu": math.sqrt(hi2 + s_hi) - math.sqrt(hi2)})
    return sorted(res, key=lambda d: -d["shortfall_pu"])


# ------------------------------------------------------------------ level 2


def build_and_solve_level2(g: FeederGraph, level1: LevelResult, angles: AngleConstants | None = None,
                           v_limits: tuple[float, float] | None = None, tol: float = 1e-8,
                           max_outer: int = 300) -> LevelResult:
    """Refine DG vars on the quadratic model with taps and capacitors frozen.

    The SLP starts from a reference sweep at the Level-1 setpoints.
    """
    v_limits = (g.v_min, g.v_max) if v_limits is None else v_limits
    sp1 = level1.setpoints
    spec = build_quadratic_model(g, angles, sp1, free_devices=False, free_dg=True, v_limits=v_limits)
    dgp = {dg: {ph: pq[0] for ph, pq in per.items()} for dg, per in sp1.dg.items()}
    q_cols = _add_dg_columns(g, spec, dgp)
    for col in _sub_p_cols(spec):
        spec.builder.cost[col] = 1.0
    nlp = spec.nlp()
    ref = solve_reference_pf(g, sp1)
    x0 = reference_as_vector(spec, ref)
    for (dg, ph), col in q_cols.items():
        x0[col] = sp1.dg[dg][ph][1]
    out = solve_slp(nlp, x0, tol=tol, max_outer=max_outer)
    if out.x is None:
        raise DispatchError(f"Level-2 solve ended with status {out.status}")
    q = {}
    for (dg, ph), col in q_cols.items():
        q.setdefault(dg, {})[ph] = float(out.x[col])
    sp2 = sp1.with_dg_q(q)
    return LevelResult(sp2, extract_solution(spec, out.x, out.iterations), out.objective, out)


# ------------------------------------------------------------ orchestration


@dataclass(frozen=True)
class Verification:
    """Reference power-flow check of a dispatch."""

    p_substation: tuple[float, float, float]
    q_substation: tuple[float, float, float]
    v_min: float
    v_avg: float
    v_max: float

    @classmethod
    def of(cls, sol: PowerFlowSolution) -> Verification:
        st = sol.voltage_stats()
        return cls(tuple(float(x) for x in sol.s_substation.real), tuple(float(x) for x in sol.s_substation.imag),
                   st["v_min"], st["v_avg"], st["v_max"])

    @property
    def p_total(self) -> float:
        return float(sum(self.p_substation))


@dataclass(frozen=True)
class StepRecord:
    """One entry of a :class:`ControlSchedule`."""

    step: int
    setpoints: DeviceSetpoints
    l1_objective: float
    l2_objective: float
    verification: Verification
    flags: tuple[str, ...] = ()


@dataclass
class ControlSchedule:
    """Per-step dispatch over a horizon, ordered by step index."""

    records: list[StepRecord] = field(default_factory=list)
    step_minutes: float = 15.0

    def add(self, rec: StepRecord) -> None:
        self.records.append(rec)
        self.records.sort(key=lambda r: r.step)

    def energy_kwh(self, s_base_phase_va: float) -> float:
        """Substation energy over the horizon from verified per-step demand."""
        hours = self.step_minutes / 60.0
        return sum(r.verification.p_total for r in self.records) * s_base_phase_va / 1e3 * hours


def orchestrate_timestep(g: FeederGraph, dg_p=None, step: int = 0, v_limits=None, rel_gap: float = 1e-6,
                         time_limit: float | None = None, baseline: BaselineConfig | None = None) -> StepRecord:
    """Angles, Level 1, Level 2 and reference verification for one step.

    If the verified minimum voltage falls more than ``VERIFY_MARGIN`` below
    ``v_min``, Level 1 is re-run once with ``v_min`` raised by
    ``RETIGHTEN_STEP``. Failures fall back to the autonomous baseline and
    are flagged, so a horizon run never aborts on one bad step.
    """
    v_limits = (g.v_min, g.v_max) if v_limits is None else tuple(v_limits)
    dgp = _dg_p(g, dg_p)
    flags: list[str] = []
    try:
        angles = estimate_current_angles(g, DeviceSetpoints.build(g, dg_p=dgp))
        limits = v_limits
        for attempt in range(2):
            inst = build_level1(g, dgp, angles, limits)
            l1 = solve_level1(inst, rel_gap=rel_gap, time_limit=time_limit)
            try:
                l2 = build_and_solve_level2(g, l1, angles, v_limits)
                final, l2_obj = l2.setpoints, l2.objective
                if l2.outcome.status != "optimal":
                    flags.append(f"level2-{l2.outcome.status}")
                    final, l2_obj = l1.setpoints, float("nan")
            except (DispatchError, PowerFlowError) as exc:
                log.warning("step %d: Level-2 failed (%s); keeping Level-1 setpoints", step, exc)
                flags.append("level2-failed")
                final, l2_obj = l1.setpoints, float("nan")
            sol = solve_reference_pf(g, final)
            ver = Verification.of(sol)
            if ver.v_min >= v_limits[0] - VERIFY_MARGIN or attempt == 1:
                break
            flags.append("retightened")
            limits = (v_limits[0] + RETIGHTEN_STEP, v_limits[1])
        if ver.v_min < v_limits[0] - VERIFY_MARGIN:
            flags.append("verify-low-voltage")
        return StepRecord(step, final, l1.objective, l2_obj, ver, tuple(flags))
    except (DispatchError, PowerFlowError, ValueError) as exc:
        log.warning("step %d: dispatch failed (%s); using autonomous baseline", step, exc)
        sp, sol = run_autonomous_baseline(g, dgp, baseline)
        return StepRecord(step, sp, float("nan"), float("nan"), Verification.of(sol),
                          tuple(flags) + ("failed",))
