"""Nonlinear three-phase reference power flow (forward/backward sweep).

This is the in-repo oracle the approximate models and the optimiser are
checked against. Line impedances carry full mutual coupling; regulators are
ideal (``V' = a V``, ``I = a I'``); capacitors inject ``q_rated * |V|**2``;
DGs are negative constant-power loads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .feeder import (
    PHASES,
    SOURCE_ANGLES,
    TAP_MAX,
    TAP_MIN,
    FeederGraph,
    Phase,
    Topology,
    tap_ratio,
)
from .loads import ZipCoefficients, cvr_affine

log = logging.getLogger(__name__)

ZERO_CURRENT = 1e-12

# Callables invoked with every converged solution; used by the test-suite to
# audit the power-balance invariant across all solves.
solve_observers: list = []


class PowerFlowError(RuntimeError):
    """The sweep did not converge or the feeder is degenerate."""

    def __init__(self, message: str, residual: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class DeviceSetpoints:
    """Operating point of every controllable device.

    ``taps[reg][phase]`` are signed tap indices, ``caps[cap][phase]`` on/off,
    ``dg[dg][phase] = (p, q)`` per-unit injections.
    """

    taps: dict = field(default_factory=dict)
    caps: dict = field(default_factory=dict)
    dg: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for reg, per in self.taps.items():
            for ph, t in per.items():
                if not TAP_MIN <= int(t) <= TAP_MAX:
                    raise ValueError(f"regulator {reg}: tap {t} outside [{TAP_MIN}, {TAP_MAX}]")

    @classmethod
    def build(cls, g: FeederGraph, taps=None, caps=None, dg_p=None, dg_q=None) -> DeviceSetpoints:
        """Fill every device of ``g``; unspecified taps/caps default to 0/OFF.

        ``taps`` maps regulator id to an int (all phases) or a phase map;
        ``caps`` maps capacitor id to a bool or a phase map; ``dg_p``/``dg_q``
        map DG id to a float (every phase) or a phase map.
        """
        taps = taps or {}
        caps = caps or {}
        dg_p = dg_p or {}
        dg_q = dg_q or {}

        def per_phase(val, phases, cast, default):
            if val is None:
                return {p: cast(default) for p in phases}
            if isinstance(val, dict):
                return {p: cast(val.get(p, val.get(p.value, default))) for p in phases}
            return {p: cast(val) for p in phases}

        t = {r.id: per_phase(taps.get(r.id), r.phases, int, 0) for r in g.regulators}
        for r in g.regulators:
            if r.ganged and len(set(t[r.id].values())) > 1:
                raise ValueError(f"ganged regulator {r.id} needs one tap for all phases")
        c = {cp.id: per_phase(caps.get(cp.id), cp.phases, bool, False) for cp in g.capacitors}
        for cp in g.capacitors:
            if cp.common_switch and len(set(c[cp.id].values())) > 1:
                raise ValueError(f"capacitor {cp.id} switches all phases together")
        d = {}
        for dg in g.dgs:
            ps = per_phase(dg_p.get(dg.id), dg.phases, float, 0.0)
            qs = per_phase(dg_q.get(dg.id), dg.phases, float, 0.0)
            d[dg.id] = {p: (ps[p], qs[p]) for p in dg.phases}
        return cls(t, c, d)

    @classmethod
    def nominal(cls, g: FeederGraph, dg_p=None) -> DeviceSetpoints:
        """Regulator taps and capacitor states as stored in the feeder file."""
        return cls.build(
            g,
            taps={r.id: {p: r.tap(p) for p in r.phases} for r in g.regulators},
            caps={c.id: c.status for c in g.capacitors},
            dg_p=dg_p,
        )

    def tap(self, reg: str, phase: Phase) -> int:
        return int(self.taps.get(reg, {}).get(phase, 0))

    def cap_on(self, cap: str, phase: Phase) -> bool:
        return bool(self.caps.get(cap, {}).get(phase, False))

    def with_dg_q(self, q: dict) -> DeviceSetpoints:
        d = {k: dict(v) for k, v in self.dg.items()}
        for dg_id, per in q.items():
            for ph, val in per.items():
                d[dg_id][ph] = (d[dg_id][ph][0], float(val))
        return replace(self, dg=d)


@dataclass(frozen=True)
class BusInjections:
    """Vectorised view of loads, capacitors and DGs on a compiled topology."""

    bus: np.ndarray
    phase: np.ndarray
    kp: np.ndarray  # (n, 3) absolute coefficients of V^2, V, 1 (per-unit power)
    kq: np.ndarray
    cap_q: np.ndarray  # (n_bus, 3) rated capacitor vars switched in
    dg_s: np.ndarray  # (n_bus, 3) complex DG injection

    def demand(self, vmag: np.ndarray) -> np.ndarray:
        """Complex net demand per bus-phase at voltage magnitudes ``vmag``."""
        vm = vmag[self.bus, self.phase]
        basis = np.stack([vm * vm, vm, np.ones_like(vm)], axis=1)
        p = np.sum(self.kp * basis, axis=1)
        q = np.sum(self.kq * basis, axis=1)
        s = np.zeros(vmag.shape, dtype=complex)
        np.add.at(s, (self.bus, self.phase), p + 1j * q)
        s -= 1j * self.cap_q * vmag**2
        s -= self.dg_s
        return s


def load_coefficients(ld) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
    """Absolute (per-unit) coefficients of ``V**2``, ``V``, ``1`` for one load."""
    if ld.model == "zip":
        z = ld.zip
        return tuple(ld.p0 * k for k in z.kp), tuple(ld.q0 * k for k in z.kq)
    p_off, p_slope, q_off, q_slope = cvr_affine(ld.state, ld.cvr)
    return (p_slope, 0.0, p_off), (q_slope, 0.0, q_off)


def bus_injections(g: FeederGraph, setpoints: DeviceSetpoints, loads=None) -> BusInjections:
    topo = g.topology
    idx = topo.bus_index
    loads = g.loads if loads is None else loads
    n = len(loads)
    bus = np.fromiter((idx[ld.bus] for ld in loads), dtype=int, count=n)
    phase = np.fromiter((ld.phase.index for ld in loads), dtype=int, count=n)
    kp = np.zeros((n, 3))
    kq = np.zeros((n, 3))
    for k, ld in enumerate(loads):
        kp[k], kq[k] = load_coefficients(ld)
    cap_q = np.zeros((topo.n_bus, 3))
    for cap in g.capacitors:
        for ph in cap.phases:
            if setpoints.cap_on(cap.id, ph):
                cap_q[idx[cap.bus], ph.index] += cap.q_rated_per_phase
    dg_s = np.zeros((topo.n_bus, 3), dtype=complex)
    for dg in g.dgs:
        for ph in dg.phases:
            p, q = setpoints.dg.get(dg.id, {}).get(ph, (0.0, 0.0))
            dg_s[idx[dg.bus], ph.index] += p + 1j * q
    return BusInjections(bus, phase, kp, kq, cap_q, dg_s)


def branch_ratios(g: FeederGraph, setpoints: DeviceSetpoints) -> np.ndarray:
    """Turns ratio per branch-phase (1 for lines and unregulated phases)."""
    topo = g.topology
    a = np.ones((len(topo.branches), 3))
    for br in topo.branches:
        if br.kind == "regulator":
            for pi in br.regulated:
                a[br.index, pi] = tap_ratio(setpoints.tap(br.regulator, PHASES[pi]))
    return a


@dataclass(frozen=True)
class PowerFlowSolution:
    """Converged sweep state; arrays are indexed by compiled bus/branch and phase.

    Absent phases hold zeros. ``current`` is the sending-end phase current of
    each branch, ``l[b, p, q] = |I^p||I^q|`` and ``delta[b, p, q]`` the
    angle difference ``angle(I^p) - angle(I^q)``.
    """

    topology: Topology
    voltage: np.ndarray
    current: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    l: np.ndarray
    delta: np.ndarray
    s_substation: np.ndarray
    demand: np.ndarray
    converged: bool
    iterations: int
    residual: float
    balance_residual: np.ndarray

    @property
    def v_sq(self) -> np.ndarray:
        return np.abs(self.voltage) ** 2

    @property
    def vmag(self) -> np.ndarray:
        return np.abs(self.voltage)

    @property
    def theta(self) -> np.ndarray:
        return np.angle(self.voltage)

    def bus_voltage(self, bus: str) -> dict[Phase, complex]:
        i = self.topology.bus_index[bus]
        return {PHASES[p]: complex(self.voltage[i, p]) for p in self.topology.bus_phases[i]}

    def node_magnitudes(self, include_substation: bool = False) -> np.ndarray:
        """|V| of every existing bus-phase node, substation excluded by default."""
        mask = self.topology.phase_mask()
        if not include_substation:
            mask[self.topology.substation] = False
        return self.vmag[mask]

    def voltage_stats(self) -> dict[str, float]:
        vm = self.node_magnitudes()
        return {"v_min": float(vm.min()), "v_avg": float(vm.mean()), "v_max": float(vm.max())}

    def phase_stats(self) -> dict[Phase, dict[str, float]]:
        out = {}
        mask = self.topology.phase_mask()
        mask[self.topology.substation] = False
        for p in range(3):
            vm = self.vmag[mask[:, p], p]
            if vm.size:
                out[PHASES[p]] = {"v_min": float(vm.min()), "v_avg": float(vm.mean()), "v_max": float(vm.max())}
        return out

    @property
    def substation_p(self) -> float:
        return float(self.s_substation.real.sum())


def solve_reference_pf(
    g: FeederGraph,
    setpoints: DeviceSetpoints | None = None,
    loads=None,
    tol: float = 1e-8,
    max_iter: int = 100,
    raise_on_fail: bool = True,
) -> PowerFlowSolution:
    """Forward/backward sweep from a flat start.

    Converged when the largest complex voltage update falls below ``tol``.
    ``loads`` overrides ``g.loads`` (same schema) without rebuilding the feeder.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    setpoints = DeviceSetpoints.nominal(g) if setpoints is None else setpoints
    topo = g.topology
    inj = bus_injections(g, setpoints, loads)
    ratio = branch_ratios(g, setpoints)
    mask = topo.phase_mask()
    source = np.exp(1j * SOURCE_ANGLES)
    V = np.where(mask, source[None, :], 0.0)

    nbr = len(topo.branches)
    residual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        I = _backward(topo, inj, ratio, V, mask)
        V_new = _forward(topo, ratio, V, I, mask)
        residual = float(np.max(np.abs(V_new - V)))
        V = V_new
        if not np.all(np.isfinite(V)):
            raise PowerFlowError("sweep diverged (non-finite voltage)", residual, it)
        if residual < tol:
            break
    converged = residual < tol
    if not converged:
        msg = f"sweep did not converge in {max_iter} iterations (residual {residual:.3e})"
        if raise_on_fail:
            raise PowerFlowError(msg, residual, it)
        log.warning(msg)

    I = _backward(topo, inj, ratio, V, mask)
    S = np.zeros((nbr, 3), dtype=complex)
    for br in topo.branches:
        S[br.index] = V[br.from_idx] * np.conj(I[br.index])
    mag = np.abs(I)
    ang = np.where(mag < ZERO_CURRENT, SOURCE_ANGLES[None, :], np.angle(I))
    l = mag[:, :, None] * mag[:, None, :]
    delta = ang[:, :, None] - ang[:, None, :]
    demand = inj.demand(np.abs(V)) * mask

    sub_branches = topo.children[topo.substation]
    s_sub = np.sum(S[list(sub_branches)], axis=0) if sub_branches else np.zeros(3, complex)
    losses = np.zeros(3, dtype=complex)
    for br in topo.branches:
        if br.kind == "line":
            losses += (br.z @ I[br.index]) * np.conj(I[br.index])
    balance = s_sub - demand.sum(axis=0) - losses
    sol = PowerFlowSolution(
        topo, V, I, S.real.copy(), S.imag.copy(), l, delta, s_sub, demand,
        converged, it, residual, np.abs(balance),
    )
    for obs in solve_observers:
        obs(sol)
    return sol


def _backward(topo: Topology, inj: BusInjections, ratio, V, mask) -> np.ndarray:
    vmag = np.abs(V)
    if np.any(vmag[mask] < 1e-9):
        raise PowerFlowError("degenerate feeder: zero voltage at an energised node")
    s = inj.demand(vmag)
    with np.errstate(divide="ignore", invalid="ignore"):
        i_bus = np.where(mask, np.conj(s / np.where(mask, V, 1.0)), 0.0)
    I = np.zeros((len(topo.branches), 3), dtype=complex)
    for j in reversed(topo.order):
        bi = topo.parent[j]
        if bi is None:
            continue
        total = i_bus[j].copy()
        for ci in topo.children[j]:
            total += I[ci]
        br = topo.branches[bi]
        keep = np.zeros(3, dtype=bool)
        keep[list(br.phases)] = True
        I[bi] = np.where(keep, ratio[bi] * total, 0.0)
    return I


def _forward(topo: Topology, ratio, V, I, mask) -> np.ndarray:
    V_new = V.copy()
    for j in topo.order:
        bi = topo.parent[j]
        if bi is None:
            continue
        br = topo.branches[bi]
        vi = V_new[br.from_idx]
        if br.kind == "regulator":
            vj = ratio[bi] * vi
        else:
            vj = vi - br.z @ I[bi]
        keep = np.zeros(3, dtype=bool)
        keep[list(br.phases)] = True
        V_new[j] = np.where(keep & mask[j], vj, 0.0)
    return V_new


# ------------------------------------------------------------------ angles


@dataclass(frozen=True)
class AngleConstants:
    """Frozen branch-current angle differences ``delta[b, p, q]`` (radians)."""

    delta: np.ndarray

    @property
    def cos(self) -> np.ndarray:
        return np.cos(self.delta)

    @property
    def sin(self) -> np.ndarray:
        return np.sin(self.delta)

    @classmethod
    def ideal(cls, topo: Topology) -> AngleConstants:
        """Balanced 120-degree offsets between phase currents."""
        d = SOURCE_ANGLES[:, None] - SOURCE_ANGLES[None, :]
        return cls(np.broadcast_to(d, (len(topo.branches), 3, 3)).copy())


def constant_impedance_loads(loads):
    """Same loads re-expressed as constant impedance at nominal voltage."""
    z = ZipCoefficients.constant_impedance()
    return tuple(replace(ld, model="zip", zip=z) for ld in loads)


def estimate_current_angles(
    g: FeederGraph, setpoints: DeviceSetpoints | None = None, tol: float = 1e-8, max_iter: int = 100
) -> AngleConstants:
    """Current angle differences from a constant-impedance-load power flow."""
    setpoints = DeviceSetpoints.build(g) if setpoints is None else setpoints
    sol = solve_reference_pf(g, setpoints, loads=constant_impedance_loads(g.loads), tol=tol, max_iter=max_iter)
    return AngleConstants(sol.delta.copy())


# --------------------------------------------------------------- unbalance


def voltage_unbalance(sol: PowerFlowSolution, bus: str) -> float:
    """Largest deviation from the phase-average magnitude, in percent."""
    i = sol.topology.bus_index[bus]
    phases = sol.topology.bus_phases[i]
    if len(phases) < 2:
        raise ValueError(f"bus {bus} has a single phase; unbalance is undefined")
    return unbalance_percent(np.abs(sol.voltage[i, list(phases)]))


def unbalance_percent(vm) -> float:
    """Largest deviation of the magnitudes ``vm`` from their mean, in percent of the mean."""
    vm = np.asarray(vm, dtype=float)
    avg = vm.mean()
    return float(np.max(np.abs(vm - avg)) / avg * 100.0)


def unbalance_by_bus(topo: Topology, vmag: np.ndarray) -> dict[str, float]:
    """Unbalance percent of every multi-phase bus from a (bus, 3) magnitude array."""
    return {
        bus: unbalance_percent(vmag[i, list(topo.bus_phases[i])])
        for i, bus in enumerate(topo.bus_ids) if len(topo.bus_phases[i]) >= 2
    }


def feeder_unbalance(sol: PowerFlowSolution) -> float:
    return max(unbalance_by_bus(sol.topology, sol.vmag).values(), default=0.0)


# ----------------------------------------------------------------- export


def solution_rows(sol: PowerFlowSolution) -> tuple[list[dict], list[dict]]:
    """(bus-phase rows, branch-phase rows) for tabular export."""
    topo = sol.topology
    bus_rows = []
    for i, bus in enumerate(topo.bus_ids):
        for p in topo.bus_phases[i]:
            bus_rows.append({
                "bus": bus, "phase": PHASES[p].value,
                "v_pu": float(abs(sol.voltage[i, p])),
                "angle_deg": float(np.degrees(np.angle(sol.voltage[i, p]))),
            })
    line_rows = []
    for br in topo.branches:
        for p in br.phases:
            line_rows.append({
                "branch": br.id, "kind": br.kind,
                "from": topo.bus_ids[br.from_idx], "to": topo.bus_ids[br.to_idx],
                "phase": PHASES[p].value, "p_pu": float(sol.P[br.index, p]),
                "q_pu": float(sol.Q[br.index, p]), "i_pu": float(abs(sol.current[br.index, p])),
            })
    return bus_rows, line_rows


# ---------------------------------------------------------------- baseline


class HuntingError(PowerFlowError):
    """Local controllers revisited a previous state instead of settling."""


@dataclass(frozen=True)
class BaselineConfig:
    """Local control rules of the autonomous (no-optimisation) comparator.

    ``regulated_bus`` maps a regulator id to the bus it watches; by default
    that is the far end of the regulated line.
    """

    band: tuple[float, float] = (0.9875, 1.0375)
    cap_on_below: float = 0.97
    cap_off_above: float = 1.03
    regulated_bus: dict = field(default_factory=dict)
    max_iter: int = 200


def run_autonomous_baseline(g: FeederGraph, dg_p=None, config: BaselineConfig | None = None,
                            tol: float = 1e-8) -> tuple[DeviceSetpoints, PowerFlowSolution]:
    """Simulate local tap and capacitor control until every device is idle.

    Regulators move one tap per control round towards the deadband; capacitors
    act only in rounds where no regulator moved. DGs run at unity power
    factor. Starts from taps 0 and every capacitor off.

    Raises:
        HuntingError: a control state repeats, or ``max_iter`` rounds pass.
    """
    cfg = config or BaselineConfig()
    lo, hi = cfg.band
    taps = {r.id: {p: 0 for p in r.phases} for r in g.regulators}
    caps = {c.id: {p: False for p in c.phases} for c in g.capacitors}
    seen = set()
    for _ in range(cfg.max_iter):
        sp = DeviceSetpoints.build(g, taps=taps, caps=caps, dg_p=dg_p)
        sol = solve_reference_pf(g, sp, tol=tol)
        state = (
            tuple(sorted((r, p.value, t) for r, per in taps.items() for p, t in per.items())),
            tuple(sorted((c, p.value, s) for c, per in caps.items() for p, s in per.items())),
        )
        if state in seen:
            raise HuntingError("autonomous controls are hunting (state repeated)")
        seen.add(state)
        moved = False
        for reg in g.regulators:
            bus = cfg.regulated_bus.get(reg.id) or g.line[reg.line].to_bus
            volts = {p: abs(v) for p, v in sol.bus_voltage(bus).items()}
            groups = [tuple(reg.phases)] if reg.ganged else [(p,) for p in reg.phases]
            for grp in groups:
                v = float(np.mean([volts[p] for p in grp if p in volts]))
                t = taps[reg.id][grp[0]]
                if v < lo and t < TAP_MAX:
                    t += 1
                elif v > hi and t > TAP_MIN:
                    t -= 1
                else:
                    continue
                moved = True
                for p in grp:
                    taps[reg.id][p] = t
        switched = False
        if not moved:
            for cap in g.capacitors:
                volts = {p: abs(v) for p, v in sol.bus_voltage(cap.bus).items()}
                groups = [tuple(cap.phases)] if cap.common_switch else [(p,) for p in cap.phases]
                for grp in groups:
                    v = float(np.mean([volts[p] for p in grp]))
                    on = caps[cap.id][grp[0]]
                    if not on and v < cfg.cap_on_below:
                        new = True
                    elif on and v > cfg.cap_off_above:
                        new = False
                    else:
                        continue
                    switched = True
                    for p in grp:
                        caps[cap.id][p] = new
        if not moved and not switched:
            return sp, sol
    raise HuntingError(f"autonomous controls did not settle in {cfg.max_iter} rounds")
