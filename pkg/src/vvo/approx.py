"""Linear and quadratic three-phase branch-flow approximations.

Both models work in squared voltage magnitudes ``v``, per-phase branch
flows ``P``, ``Q`` and (quadratic model only) current products ``l``.
Off-diagonal complex flows are eliminated with the nominal phase rotation
``S^pq = exp(j(th_p - th_q)) S^qq`` and branch-current angle differences are
frozen constants (:class:`~vvo.powerflow.AngleConstants`).

Sign conventions: ``S^pq = V^p conj(I^q)`` at the sending end and
``delta^pq = angle(I^p) - angle(I^q)``. Per-phase series losses are then
``sum_q z^pq l^pq exp(-j delta^pq)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .feeder import PHASES, SOURCE_ANGLES, FeederGraph, tap_ratio
from .loads import cvr_affine, zip_to_cvr
from .model import ModelBuilder, solve_square
from .powerflow import AngleConstants, DeviceSetpoints, PowerFlowSolution

__all__ = [
    "AngleConstants",
    "ErrorReport",
    "LinearSystemSpec",
    "ModelSolution",
    "QuadraticSystemSpec",
    "angle_error_deg",
    "build_linear_model",
    "build_quadratic_model",
    "extract_solution",
    "model_error_report",
    "reference_as_vector",
    "solve_linear_pf",
    "solve_quadratic_pf",
]

FLOW_FLOOR = 1e-4


@dataclass
class NetworkIndex:
    """Column and row handles of the network part of a model."""

    v: dict = field(default_factory=dict)  # (bus, phase) -> col
    P: dict = field(default_factory=dict)  # (branch, phase) -> col
    Q: dict = field(default_factory=dict)
    l: dict = field(default_factory=dict)  # (branch, p, q) p <= q -> col
    p_balance: dict = field(default_factory=dict)  # (bus, phase) -> row
    q_balance: dict = field(default_factory=dict)
    drop: dict = field(default_factory=dict)  # (branch, phase) -> row
    regulator: dict = field(default_factory=dict)  # (branch, phase) -> row

    def l_col(self, br: int, p: int, q: int) -> int:
        return self.l[(br, min(p, q), max(p, q))]


@dataclass
class LinearSystemSpec:
    """Lossless branch-flow model rows plus handles into them."""

    graph: FeederGraph
    builder: ModelBuilder
    index: NetworkIndex
    angles: AngleConstants
    free_devices: bool
    free_dg: bool = False

    def lp(self, minimize: bool = True):
        return self.builder.to_lp(minimize)


@dataclass
class QuadraticSystemSpec(LinearSystemSpec):
    """Branch-flow model with loss terms and the two quadratic row families."""

    def nlp(self):
        from .solvers import NlpProblem

        return NlpProblem(self.builder.to_lp(), self.builder.to_quadratic_rows())


def affine_load(ld) -> tuple[float, float, float, float]:
    """``(p_off, p_slope, q_off, q_slope)`` of a load in the squared voltage.

    ZIP loads are represented through their equivalent CVR factors.
    """
    f = ld.cvr if ld.model == "cvr" else zip_to_cvr(ld.zip)
    return cvr_affine(ld.state, f)


def _bus_data(g: FeederGraph, setpoints: DeviceSetpoints, loads, free_devices: bool, free_dg: bool):
    topo = g.topology
    n = topo.n_bus
    p_off = np.zeros((n, 3))
    p_slope = np.zeros((n, 3))
    q_off = np.zeros((n, 3))
    q_slope = np.zeros((n, 3))
    for ld in loads:
        j, p = topo.bus_index[ld.bus], ld.phase.index
        a, b, c, d = affine_load(ld)
        p_off[j, p] += a
        p_slope[j, p] += b
        q_off[j, p] += c
        q_slope[j, p] += d
    p_dg = np.zeros((n, 3))
    q_dg = np.zeros((n, 3))
    q_cap = np.zeros((n, 3))
    for dg in g.dgs:
        j = topo.bus_index[dg.bus]
        for ph in dg.phases:
            pq = setpoints.dg.get(dg.id, {}).get(ph, (0.0, 0.0))
            p_dg[j, ph.index] += pq[0]
            if not free_dg:
                q_dg[j, ph.index] += pq[1]
    if not free_devices:
        for cap in g.capacitors:
            j = topo.bus_index[cap.bus]
            for ph in cap.phases:
                if setpoints.cap_on(cap.id, ph):
                    q_cap[j, ph.index] += cap.q_rated_per_phase
    return p_off, p_slope, q_off, q_slope, p_dg, q_dg, q_cap


def _energised_branches(g: FeederGraph, setpoints: DeviceSetpoints, free_devices: bool,
                        free_dg: bool) -> set[int]:
    """Branches with any load, capacitor or DG downstream.

    All other branches carry exactly zero current, so their current products
    are pinned at zero instead of entering degenerate quadratic rows.
    """
    topo = g.topology
    has = np.zeros(topo.n_bus, dtype=bool)
    for ld in g.loads:
        if ld.p0 != 0.0 or ld.q0 != 0.0:
            has[topo.bus_index[ld.bus]] = True
    for cap in g.capacitors:
        if free_devices or any(setpoints.cap_on(cap.id, p) for p in cap.phases):
            has[topo.bus_index[cap.bus]] = True
    for dg in g.dgs:
        out = setpoints.dg.get(dg.id, {})
        if free_dg or any(abs(pq[0]) + abs(pq[1]) > 0.0 for pq in out.values()):
            has[topo.bus_index[dg.bus]] = True
    live = set()
    for j in reversed(topo.order):
        for ci in topo.children[j]:
            if has[topo.branches[ci].to_idx]:
                has[j] = True
        bi = topo.parent[j]
        if bi is not None and has[j]:
            live.add(bi)
    return live


def _build(g, angles, setpoints, loads, free_devices, v_limits, quadratic, free_dg=None):
    free_dg = free_devices if free_dg is None else free_dg
    topo = g.topology
    loads = g.loads if loads is None else loads
    setpoints = DeviceSetpoints.build(g) if setpoints is None else setpoints
    angles = AngleConstants.ideal(topo) if angles is None else angles
    if angles.delta.shape != (len(topo.branches), 3, 3):
        raise ValueError("angle constants do not match the feeder's branches")
    b = ModelBuilder()
    ix = NetworkIndex()
    p_off, p_slope, q_off, q_slope, p_dg, q_dg, q_cap = _bus_data(g, setpoints, loads, free_devices, free_dg)

    lo, hi = (-math.inf, math.inf) if v_limits is None else (v_limits[0] ** 2, v_limits[1] ** 2)
    live = _energised_branches(g, setpoints, free_devices, free_dg)
    for j in topo.order:
        for p in topo.bus_phases[j]:
            name = f"v[{topo.bus_ids[j]}.{PHASES[p].value}]"
            if j == topo.substation:
                ix.v[(j, p)] = b.var(name, 1.0, 1.0)
            else:
                ix.v[(j, p)] = b.var(name, lo, hi)
    for br in topo.branches:
        for p in br.phases:
            ix.P[(br.index, p)] = b.var(f"P[{br.id}.{PHASES[p].value}]")
            ix.Q[(br.index, p)] = b.var(f"Q[{br.id}.{PHASES[p].value}]")
        if quadratic and br.kind == "line":
            for a_, p in enumerate(br.phases):
                for q in br.phases[a_:]:
                    tag = PHASES[p].value + PHASES[q].value
                    ub = math.inf if br.index in live else 0.0
                    ix.l[(br.index, p, q)] = b.var(f"l[{br.id}.{tag}]", 0.0, ub)

    # power balance at the receiving bus of every branch
    for br in topo.branches:
        j = br.to_idx
        cos, sin = angles.cos[br.index], angles.sin[br.index]
        for p in br.phases:
            tp = [(ix.P[(br.index, p)], 1.0)]
            tq = [(ix.Q[(br.index, p)], 1.0)]
            for ci in topo.children[j]:
                if p in topo.branches[ci].phases:
                    tp.append((ix.P[(ci, p)], -1.0))
                    tq.append((ix.Q[(ci, p)], -1.0))
            vcol = ix.v[(j, p)]
            tp.append((vcol, -p_slope[j, p]))
            tq.append((vcol, -(q_slope[j, p] - q_cap[j, p])))
            if quadratic and br.kind == "line":
                for q in br.phases:
                    z = br.z[p, q]
                    col = ix.l_col(br.index, p, q)
                    tp.append((col, -(z.real * cos[p, q] + z.imag * sin[p, q])))
                    tq.append((col, -(z.imag * cos[p, q] - z.real * sin[p, q])))
            name = f"{topo.bus_ids[j]}.{PHASES[p].value}"
            ix.p_balance[(j, p)] = b.row(tp, "=", p_off[j, p] - p_dg[j, p], f"pbal[{name}]")
            ix.q_balance[(j, p)] = b.row(tq, "=", q_off[j, p] - q_dg[j, p], f"qbal[{name}]")

    # voltage relations
    for br in topo.branches:
        i, j = br.from_idx, br.to_idx
        if br.kind == "regulator":
            if free_devices:
                continue
            for p in br.phases:
                a2 = tap_ratio(setpoints.tap(br.regulator, PHASES[p])) ** 2 if p in br.regulated else 1.0
                ix.regulator[(br.index, p)] = b.row(
                    [(ix.v[(j, p)], 1.0), (ix.v[(i, p)], -a2)], "=", 0.0, f"reg[{br.id}.{PHASES[p].value}]"
                )
            continue
        for p in br.phases:
            terms = [(ix.v[(j, p)], 1.0), (ix.v[(i, p)], -1.0)]
            for q in br.phases:
                alpha = np.exp(1j * (SOURCE_ANGLES[p] - SOURCE_ANGLES[q]))
                w = alpha * np.conj(br.z[p, q])
                terms.append((ix.P[(br.index, q)], 2.0 * w.real))
                terms.append((ix.Q[(br.index, q)], -2.0 * w.imag))
            if quadratic:
                d = angles.delta[br.index]
                for q in br.phases:
                    terms.append((ix.l_col(br.index, q, q), -abs(br.z[p, q]) ** 2))
                for a_, q1 in enumerate(br.phases):
                    for q2 in br.phases[a_ + 1:]:
                        k = br.z[p, q1] * np.conj(br.z[p, q2]) * np.exp(1j * d[q1, q2])
                        terms.append((ix.l_col(br.index, q1, q2), -2.0 * k.real))
            ix.drop[(br.index, p)] = b.row(terms, "=", 0.0, f"drop[{br.id}.{PHASES[p].value}]")

    if quadratic:
        for br in topo.branches:
            if br.kind != "line" or br.index not in live:
                continue
            i = br.from_idx
            for a_, p in enumerate(br.phases):
                P, Q, v, lpp = ix.P[(br.index, p)], ix.Q[(br.index, p)], ix.v[(i, p)], ix.l_col(br.index, p, p)
                b.quad_row([(P, P, 1.0), (Q, Q, 1.0), (v, lpp, -1.0)], name=f"flow[{br.id}.{PHASES[p].value}]")
                for q in br.phases[a_ + 1:]:
                    lpq, lqq = ix.l_col(br.index, p, q), ix.l_col(br.index, q, q)
                    tag = PHASES[p].value + PHASES[q].value
                    b.quad_row([(lpq, lpq, 1.0), (lpp, lqq, -1.0)], name=f"curr[{br.id}.{tag}]")
    cls = QuadraticSystemSpec if quadratic else LinearSystemSpec
    return cls(g, b, ix, angles, free_devices, free_dg)


def build_linear_model(g, angles=None, setpoints=None, loads=None, free_devices=False, v_limits=None,
                       free_dg=None):
    """Lossless linear branch-flow model.

    With ``free_devices=False`` regulator ratios, capacitor states and DG
    reactive output are taken from ``setpoints``; otherwise regulator rows
    and capacitor/DG reactive terms are left for the caller to add.
    ``free_dg`` (default: same as ``free_devices``) controls the DG terms on
    their own. ``v_limits=(vmin, vmax)`` bounds every non-substation magnitude.
    """
    return _build(g, angles, setpoints, loads, free_devices, v_limits, False, free_dg)


def build_quadratic_model(g, angles=None, setpoints=None, loads=None, free_devices=False, v_limits=None,
                          free_dg=None):
    """Branch-flow model with frozen-angle loss terms and quadratic rows."""
    return _build(g, angles, setpoints, loads, free_devices, v_limits, True, free_dg)


# ------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class ModelSolution:
    """Values of the network variables of an approximate model."""

    v_sq: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    l: np.ndarray | None
    x: np.ndarray
    iterations: int = 1

    @property
    def vmag(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.v_sq, 0.0))

    def substation_p(self, spec: LinearSystemSpec) -> float:
        topo = spec.graph.topology
        return float(sum(self.P[bi].sum() for bi in topo.children[topo.substation]))


def extract_solution(spec: LinearSystemSpec, x: np.ndarray, iterations: int = 1) -> ModelSolution:
    topo = spec.graph.topology
    ix = spec.index
    v = np.zeros((topo.n_bus, 3))
    for (j, p), col in ix.v.items():
        v[j, p] = x[col]
    P = np.zeros((len(topo.branches), 3))
    Q = np.zeros_like(P)
    for (bi, p), col in ix.P.items():
        P[bi, p] = x[col]
        Q[bi, p] = x[ix.Q[(bi, p)]]
    l = None
    if ix.l:
        l = np.zeros((len(topo.branches), 3, 3))
        for (bi, p, q), col in ix.l.items():
            l[bi, p, q] = l[bi, q, p] = x[col]
    return ModelSolution(v, P, Q, l, x, iterations)


def solve_linear_pf(spec: LinearSystemSpec) -> ModelSolution:
    """Solve the linear model at fixed devices as a square sparse system."""
    if spec.free_devices or spec.free_dg:
        raise ValueError("device columns are free; fix the setpoints to evaluate the model")
    return extract_solution(spec, solve_square(spec.lp()))


def solve_quadratic_pf(spec: QuadraticSystemSpec, tol: float = 1e-12, max_iter: int = 100) -> ModelSolution:
    """Solve the quadratic model at fixed devices.

    Alternates between the linear rows with ``l`` held fixed (a square
    system in ``v``, ``P``, ``Q``) and the closed-form update
    ``l^pp = (P^2 + Q^2) / v``, ``l^pq = sqrt(l^pp l^qq)``; this is the
    branch-flow analogue of a forward/backward sweep.
    """
    if spec.free_devices or spec.free_dg:
        raise ValueError("device columns are free; fix the setpoints to evaluate the model")
    lp = spec.lp()
    ix = spec.index
    topo = spec.graph.topology
    l_vals = {col: 0.0 for col in ix.l.values()}
    x = None
    for it in range(1, max_iter + 1):
        x = solve_square(lp, l_vals)
        change = 0.0
        new = {}
        for (bi, p, q), col in ix.l.items():
            if p == q:
                br = topo.branches[bi]
                v_i = x[ix.v[(br.from_idx, p)]]
                new[col] = (x[ix.P[(bi, p)]] ** 2 + x[ix.Q[(bi, p)]] ** 2) / v_i
        for (bi, p, q), col in ix.l.items():
            if p != q:
                new[col] = math.sqrt(new[ix.l_col(bi, p, p)] * new[ix.l_col(bi, q, q)])
        for col, val in new.items():
            change = max(change, abs(val - l_vals[col]))
        l_vals = new
        if change < tol:
            x = solve_square(lp, l_vals)
            return extract_solution(spec, x, it)
    raise RuntimeError(f"quadratic model evaluation did not converge in {max_iter} iterations")


def reference_as_vector(spec: LinearSystemSpec, ref: PowerFlowSolution) -> np.ndarray:
    """Map a reference solution onto the columns of ``spec`` (device columns 0)."""
    x = np.zeros(spec.builder.n)
    ix = spec.index
    for (j, p), col in ix.v.items():
        x[col] = ref.v_sq[j, p]
    for (bi, p), col in ix.P.items():
        x[col] = ref.P[bi, p]
        x[ix.Q[(bi, p)]] = ref.Q[bi, p]
    for (bi, p, q), col in ix.l.items():
        x[col] = ref.l[bi, p, q]
    return x


# ------------------------------------------------------------------ errors


@dataclass(frozen=True)
class ErrorReport:
    """Worst-case approximation errors against a reference solution."""

    v_max_abs: float  # pu magnitude
    p_flow_pct: float
    q_flow_pct: float
    substation_p_pct: float
    angle_deg: float | None = None

    def row(self, feeder: str, loading_pct: float, model: str) -> dict:
        return {
            "feeder": feeder, "loading_pct": loading_pct, "model": model,
            "p_err_pct": self.p_flow_pct, "q_err_pct": self.q_flow_pct, "v_err_pu": self.v_max_abs,
        }


def model_error_report(spec: LinearSystemSpec, sol: ModelSolution, ref: PowerFlowSolution,
                       floor: float = FLOW_FLOOR) -> ErrorReport:
    """Per-node and per-branch-phase maxima of the model-vs-reference error.

    Flow errors are relative to the reference flow with ``floor`` (pu) as the
    smallest denominator.
    """
    topo = spec.graph.topology
    if ref.topology.bus_ids != topo.bus_ids or sol.P.shape != ref.P.shape:
        raise ValueError("model and reference solutions are on different graphs")
    mask = topo.phase_mask()
    dv = np.abs(sol.vmag - ref.vmag)[mask]
    pe, qe = 0.0, 0.0
    for br in topo.branches:
        for p in br.phases:
            pr, qr = ref.P[br.index, p], ref.Q[br.index, p]
            pe = max(pe, abs(sol.P[br.index, p] - pr) / max(abs(pr), floor))
            qe = max(qe, abs(sol.Q[br.index, p] - qr) / max(abs(qr), floor))
    sp_ref = ref.substation_p
    sp_err = abs(sol.substation_p(spec) - sp_ref) / max(abs(sp_ref), floor)
    return ErrorReport(float(dv.max()) if dv.size else 0.0, float(100.0 * pe), float(100.0 * qe), float(100.0 * sp_err))


def angle_error_deg(est: AngleConstants, ref: PowerFlowSolution, topo=None) -> float:
    """Largest wrapped difference between estimated and reference current angle gaps.

    Only line branches and phase pairs that carry current in the reference
    are compared.
    """
    topo = ref.topology if topo is None else topo
    worst = 0.0
    for br in topo.branches:
        if br.kind != "line":
            continue
        for p in br.phases:
            for q in br.phases:
                if p == q or ref.l[br.index, p, p] < 1e-16 or ref.l[br.index, q, q] < 1e-16:
                    continue
                d = est.delta[br.index, p, q] - ref.delta[br.index, p, q]
                d = (d + math.pi) % (2 * math.pi) - math.pi
                worst = max(worst, abs(math.degrees(d)))
    return worst
