"""Feeder data model, file I/O, topology and exact series reduction.

A :class:`FeederGraph` is immutable and validated at construction. Powers and
impedances are stored per-unit: the per-phase power base is ``s_base / 3`` and
the impedance base ``v_nominal_ll**2 / s_base``. The feeder file stores SI
values and is converted on load/save.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path

import numpy as np

from .loads import DEFAULT_CVR_P, DEFAULT_CVR_Q, CvrFactors, LoadState, ZipCoefficients

TAP_MIN = -16
TAP_MAX = 16
TAP_STEP = 0.00625


class FeederError(Exception):
    """Base class for feeder problems."""


class FeederParseError(FeederError):
    """The feeder document is not well formed."""


class FeederValidationError(FeederError):
    """The feeder violates a structural invariant."""


class Phase(str, Enum):
    A = "a"
    B = "b"
    C = "c"

    @property
    def index(self) -> int:
        return "abc".index(self.value)


PHASES = (Phase.A, Phase.B, Phase.C)
# nominal source angles of phases a, b, c
SOURCE_ANGLES = np.array([0.0, -2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0])


def parse_phases(spec) -> tuple[Phase, ...]:
    """Turn ``"abc"``, ``["a", "c"]`` or Phase members into a sorted tuple."""
    if isinstance(spec, Phase):
        spec = [spec]
    if isinstance(spec, str):
        spec = list(spec.strip().lower())
    try:
        phases = {Phase(str(p).lower()) if not isinstance(p, Phase) else p for p in spec}
    except ValueError as exc:
        raise FeederParseError(f"bad phase string {spec!r}") from exc
    if not phases:
        raise FeederParseError("empty phase set")
    return tuple(sorted(phases, key=lambda p: p.index))


def tap_ratio(tap: int) -> float:
    return 1.0 + TAP_STEP * tap


def tap_positions() -> np.ndarray:
    """All tap indices, lowest first."""
    return np.arange(TAP_MIN, TAP_MAX + 1)


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[Phase, ...]
    is_substation: bool = False


@dataclass(frozen=True, eq=False)
class PhaseImpedanceMatrix:
    """Symmetric complex impedance over a phase set, per-unit."""

    entries: dict

    @classmethod
    def from_matrix(cls, z: np.ndarray, phases) -> PhaseImpedanceMatrix:
        ents = {}
        for p in phases:
            for q in phases:
                ents[(p, q)] = complex(z[p.index, q.index])
        return cls(ents)

    @property
    def phases(self) -> tuple[Phase, ...]:
        return tuple(sorted({p for p, _ in self.entries}, key=lambda p: p.index))

    def matrix(self) -> np.ndarray:
        """Full 3x3 complex matrix with zeros off the phase set."""
        z = np.zeros((3, 3), dtype=complex)
        for (p, q), val in self.entries.items():
            z[p.index, q.index] = val
        return z

    def __add__(self, other: PhaseImpedanceMatrix) -> PhaseImpedanceMatrix:
        common = [p for p in self.phases if p in other.phases]
        return PhaseImpedanceMatrix.from_matrix(self.matrix() + other.matrix(), common)

    def restrict(self, phases) -> PhaseImpedanceMatrix:
        return PhaseImpedanceMatrix.from_matrix(self.matrix(), phases)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PhaseImpedanceMatrix):
            return NotImplemented
        return self.entries == other.entries


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    phases: tuple[Phase, ...]
    impedance: PhaseImpedanceMatrix


@dataclass(frozen=True)
class Regulator:
    """Ideal step regulator at the sending end of ``line``.

    ``taps`` holds the nominal (as-found) tap per phase; operating taps are
    supplied separately as setpoints. When ``ganged`` all phases share a tap.
    """

    id: str
    line: str
    phases: tuple[Phase, ...]
    ganged: bool = False
    taps: dict = field(default_factory=dict)

    @property
    def aux_bus(self) -> str:
        return f"{self.id}.out"

    def tap(self, phase: Phase) -> int:
        return int(self.taps.get(phase, 0))


@dataclass(frozen=True)
class CapacitorBank:
    id: str
    bus: str
    phases: tuple[Phase, ...]
    q_rated_per_phase: float
    common_switch: bool = True
    status: bool = False


@dataclass(frozen=True)
class InverterDG:
    """Smart-inverter DG; ``p_rated_per_phase`` scales the PV profile."""

    id: str
    bus: str
    phases: tuple[Phase, ...]
    s_rated_per_phase: float
    p_rated_per_phase: float | None = None

    @property
    def p_rated(self) -> float:
        return self.s_rated_per_phase if self.p_rated_per_phase is None else self.p_rated_per_phase

    def q_limit(self, p: float) -> float:
        """Half-width of the reactive box for active output ``p``."""
        s = self.s_rated_per_phase
        if p < -1e-12 or p > s * (1 + 1e-12):
            raise FeederValidationError(
                f"DG {self.id}: active output {p:.6g} outside [0, {s:.6g}] leaves no reactive range"
            )
        return math.sqrt(max(s * s - p * p, 0.0))


@dataclass(frozen=True)
class LoadSpec:
    """Single-phase wye load at nominal voltage, per-unit."""

    id: str
    bus: str
    phase: Phase
    p0: float
    q0: float
    model: str = "cvr"
    zip: ZipCoefficients | None = None
    cvr: CvrFactors | None = None

    def __post_init__(self) -> None:
        if self.model == "zip" and self.zip is None:
            raise FeederValidationError(f"load {self.id}: model zip needs coefficients")
        if self.model == "cvr" and self.cvr is None:
            object.__setattr__(self, "cvr", CvrFactors(DEFAULT_CVR_P, DEFAULT_CVR_Q))

    @property
    def state(self) -> LoadState:
        return LoadState(self.p0, self.q0, self.model)


@dataclass(frozen=True)
class Branch:
    """Compiled edge: either a physical line or an ideal regulator stage."""

    index: int
    id: str
    kind: str  # "line" | "regulator"
    from_idx: int
    to_idx: int
    phases: tuple[int, ...]
    z: np.ndarray
    regulator: str | None = None
    regulated: tuple[int, ...] = ()


@dataclass(frozen=True)
class Topology:
    """Index view of a feeder; regulators are materialised as their own branch."""

    bus_ids: tuple[str, ...]
    bus_phases: tuple[tuple[int, ...], ...]
    substation: int
    branches: tuple[Branch, ...]
    parent: tuple[int | None, ...]  # branch index feeding each bus
    children: tuple[tuple[int, ...], ...]  # branch indices leaving each bus
    order: tuple[int, ...]  # substation first, parents before children

    @cached_property
    def bus_index(self) -> dict[str, int]:
        return {b: i for i, b in enumerate(self.bus_ids)}

    @cached_property
    def branch_index(self) -> dict[str, int]:
        return {br.id: br.index for br in self.branches}

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    def phase_mask(self) -> np.ndarray:
        m = np.zeros((self.n_bus, 3), dtype=bool)
        for i, ph in enumerate(self.bus_phases):
            m[i, list(ph)] = True
        return m


@dataclass(frozen=True)
class FeederGraph:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    regulators: tuple[Regulator, ...] = ()
    capacitors: tuple[CapacitorBank, ...] = ()
    dgs: tuple[InverterDG, ...] = ()
    loads: tuple[LoadSpec, ...] = ()
    v_nominal_ll: float = 4160.0
    s_base: float = 3e6
    v_min: float = 0.95
    v_max: float = 1.05
    name: str = "feeder"

    def __post_init__(self) -> None:
        for attr in ("buses", "lines", "regulators", "capacitors", "dgs", "loads"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        validate(self)

    @property
    def z_base(self) -> float:
        return self.v_nominal_ll**2 / self.s_base

    @property
    def s_base_phase(self) -> float:
        return self.s_base / 3.0

    @cached_property
    def bus(self) -> dict[str, Bus]:
        return {b.id: b for b in self.buses}

    @cached_property
    def line(self) -> dict[str, Line]:
        return {ln.id: ln for ln in self.lines}

    @cached_property
    def substation(self) -> Bus:
        return next(b for b in self.buses if b.is_substation)

    @cached_property
    def topology(self) -> Topology:
        return downstream_sets(self)

    def regulator_on(self, line_id: str) -> Regulator | None:
        return next((r for r in self.regulators if r.line == line_id), None)

    def scaled(self, load_mult: float = 1.0, cvr: CvrFactors | None = None) -> FeederGraph:
        """Copy with every load scaled; optionally force uniform CVR factors."""
        loads = []
        for ld in self.loads:
            kw = {"p0": ld.p0 * load_mult, "q0": ld.q0 * load_mult}
            if cvr is not None:
                kw.update(model="cvr", cvr=cvr, zip=None)
            loads.append(replace(ld, **kw))
        return replace(self, loads=tuple(loads))

    def with_loads(self, loads) -> FeederGraph:
        return replace(self, loads=tuple(loads))

    def with_limits(self, v_min: float, v_max: float) -> FeederGraph:
        return replace(self, v_min=v_min, v_max=v_max)


# ---------------------------------------------------------------- validation


def validate(g: FeederGraph) -> None:
    """Raise :class:`FeederValidationError` on the first violated invariant."""
    if not g.v_min < g.v_max:
        raise FeederValidationError("voltage limits require v_min < v_max")
    if g.v_nominal_ll <= 0 or g.s_base <= 0:
        raise FeederValidationError("base quantities must be positive")
    ids = [b.id for b in g.buses]
    if len(set(ids)) != len(ids):
        raise FeederValidationError("duplicate bus id")
    subs = [b for b in g.buses if b.is_substation]
    if len(subs) != 1:
        raise FeederValidationError(f"expected exactly one substation bus, found {len(subs)}")
    buses = {b.id: b for b in g.buses}
    for b in g.buses:
        if not b.phases:
            raise FeederValidationError(f"bus {b.id} has no phases")

    line_ids = [ln.id for ln in g.lines]
    if len(set(line_ids)) != len(line_ids):
        raise FeederValidationError("duplicate line id")
    for ln in g.lines:
        for end in (ln.from_bus, ln.to_bus):
            if end not in buses:
                raise FeederValidationError(f"line {ln.id} references unknown bus {end}")
        if ln.from_bus == ln.to_bus:
            raise FeederValidationError(f"line {ln.id} is a self loop (graph not radial)")
        common = set(buses[ln.from_bus].phases) & set(buses[ln.to_bus].phases)
        if not set(ln.phases) <= common:
            raise FeederValidationError(f"phase mismatch on line {ln.id}")
        _check_impedance(ln)

    # radiality: |E| = |N| - 1 and connected from the substation
    if len(g.lines) != len(g.buses) - 1:
        raise FeederValidationError("graph not radial")
    adj = defaultdict(list)
    for ln in g.lines:
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    seen = {subs[0].id}
    queue = deque(seen)
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    if len(seen) != len(g.buses):
        raise FeederValidationError("graph not radial")

    lines = {ln.id: ln for ln in g.lines}
    for reg in g.regulators:
        if reg.line not in lines:
            raise FeederValidationError(f"regulator {reg.id} on unknown line {reg.line}")
        if not set(reg.phases) <= set(lines[reg.line].phases):
            raise FeederValidationError(f"phase mismatch on regulator {reg.id}")
        for ph, t in reg.taps.items():
            if not TAP_MIN <= int(t) <= TAP_MAX:
                raise FeederValidationError(f"regulator {reg.id}: tap {t} out of range")
    if len({r.line for r in g.regulators}) != len(g.regulators):
        raise FeederValidationError("more than one regulator on a line")

    for cap in g.capacitors:
        _check_attached("capacitor", cap.id, cap.bus, cap.phases, buses)
        if cap.q_rated_per_phase <= 0:
            raise FeederValidationError(f"capacitor {cap.id}: rating must be positive")
    for dg in g.dgs:
        _check_attached("DG", dg.id, dg.bus, dg.phases, buses)
        if dg.s_rated_per_phase <= 0:
            raise FeederValidationError(f"DG {dg.id}: rating must be positive")
        if not 0 <= dg.p_rated <= dg.s_rated_per_phase * (1 + 1e-12):
            raise FeederValidationError(f"DG {dg.id}: active rating exceeds apparent rating")
    for ld in g.loads:
        _check_attached("load", ld.id, ld.bus, (ld.phase,), buses)
        if ld.p0 < 0:
            raise FeederValidationError(f"load {ld.id}: negative active demand")

    # lines may not carry phases their upstream line lacks
    topo = downstream_sets(g)
    for br in topo.branches:
        par = topo.parent[br.from_idx]
        if par is not None and not set(br.phases) <= set(topo.branches[par].phases):
            raise FeederValidationError(f"phase mismatch on line {br.id}: phase not supplied upstream")


def _check_attached(kind, ident, bus, phases, buses) -> None:
    if bus not in buses:
        raise FeederValidationError(f"{kind} {ident} at unknown bus {bus}")
    if not set(phases) <= set(buses[bus].phases):
        raise FeederValidationError(f"phase mismatch on {kind} {ident}")


def _check_impedance(ln: Line) -> None:
    ents = ln.impedance.entries
    want = {(p, q) for p in ln.phases for q in ln.phases}
    if set(ents) != want:
        raise FeederValidationError(f"impedance of line {ln.id} does not cover its phases")
    for (p, q), z in ents.items():
        if abs(z - ents[(q, p)]) > 1e-12 * max(1.0, abs(z)):
            raise FeederValidationError(f"impedance of line {ln.id} is not symmetric")
        if p == q and z.real < 0:
            raise FeederValidationError(f"line {ln.id} has negative resistance")
        if not (math.isfinite(z.real) and math.isfinite(z.imag)):
            raise FeederValidationError(f"line {ln.id} has non-finite impedance")


# ------------------------------------------------------------------ topology


def downstream_sets(g: FeederGraph) -> Topology:
    """Parent/children adjacency and a substation-rooted topological order.

    Each regulated line ``i -> j`` becomes two branches: an ideal regulator
    stage ``i -> i'`` and the physical line ``i' -> j``.
    """
    regs = {r.line: r for r in g.regulators}
    bus_ids = [b.id for b in g.buses]
    bus_phases = [tuple(p.index for p in b.phases) for b in g.buses]
    index = {b: i for i, b in enumerate(bus_ids)}
    for ln in g.lines:
        reg = regs.get(ln.id)
        if reg is not None:
            index[reg.aux_bus] = len(bus_ids)
            bus_ids.append(reg.aux_bus)
            bus_phases.append(tuple(p.index for p in ln.phases))

    sub = next(b.id for b in g.buses if b.is_substation)
    adj = defaultdict(list)
    for ln in g.lines:
        adj[ln.from_bus].append((ln, ln.to_bus))
        adj[ln.to_bus].append((ln, ln.from_bus))

    # orient edges away from the substation
    raw = []
    visited = {sub}
    queue = deque([sub])
    while queue:
        u = queue.popleft()
        for ln, w in adj[u]:
            if w in visited:
                continue
            visited.add(w)
            queue.append(w)
            raw.append((ln, u, w))

    branches = []
    for ln, u, w in raw:
        ph = tuple(p.index for p in ln.phases)
        z = ln.impedance.matrix()
        reg = regs.get(ln.id)
        if reg is not None:
            branches.append(
                Branch(
                    len(branches), reg.id, "regulator", index[u], index[reg.aux_bus], ph,
                    np.zeros((3, 3), dtype=complex), regulator=reg.id,
                    regulated=tuple(p.index for p in reg.phases),
                )
            )
            u_idx = index[reg.aux_bus]
        else:
            u_idx = index[u]
        branches.append(Branch(len(branches), ln.id, "line", u_idx, index[w], ph, z))

    n = len(bus_ids)
    parent: list[int | None] = [None] * n
    children: list[list[int]] = [[] for _ in range(n)]
    for br in branches:
        parent[br.to_idx] = br.index
        children[br.from_idx].append(br.index)
    # a bus is energised only on the phases its feeding branch carries
    for j, bi in enumerate(parent):
        if bi is not None:
            bus_phases[j] = branches[bi].phases
    order = [index[sub]]
    k = 0
    while k < len(order):
        for bi in children[order[k]]:
            order.append(branches[bi].to_idx)
        k += 1
    return Topology(
        tuple(bus_ids), tuple(bus_phases), index[sub], tuple(branches), tuple(parent),
        tuple(tuple(c) for c in children), tuple(order),
    )


# ------------------------------------------------------------------ reduction


@dataclass(frozen=True)
class EliminatedBus:
    """Where an eliminated bus sits on its reduced line.

    ``z_offset`` is the per-unit series impedance (3x3) between the reduced
    line's sending bus and this bus.
    """

    bus: str
    line: str
    z_offset: np.ndarray
    phases: tuple[Phase, ...]


@dataclass(frozen=True)
class BusMapping:
    eliminated: dict

    def __contains__(self, bus: str) -> bool:
        return bus in self.eliminated

    def __len__(self) -> int:
        return len(self.eliminated)

    def voltage(self, bus: str, v_from: np.ndarray, i_line: np.ndarray) -> np.ndarray:
        """Complex phase voltages of an eliminated bus from its line's sending-end state."""
        e = self.eliminated[bus]
        return v_from - e.z_offset @ i_line


def reduce_network(g: FeederGraph) -> tuple[FeederGraph, BusMapping]:
    """Merge bare degree-2 buses into series lines.

    A bus is eliminated when it has no load, DG, capacitor, no regulator on
    an adjacent line, one incoming and one outgoing line. The merged line's
    impedance is the entrywise sum over the outgoing line's phase set.
    """
    topo = g.topology
    busy = {ld.bus for ld in g.loads} | {c.bus for c in g.capacitors} | {d.bus for d in g.dgs}
    reg_lines = {r.line for r in g.regulators}
    incoming = {}
    outgoing = defaultdict(list)
    for br in topo.branches:
        if br.kind != "line":
            continue
        ln = g.line[br.id]
        to_bus = topo.bus_ids[br.to_idx]
        frm = ln.from_bus if ln.to_bus == to_bus else ln.to_bus
        incoming[to_bus] = (ln, frm)
        outgoing[frm].append((ln, to_bus))

    def removable(b: str) -> bool:
        if g.bus[b].is_substation or b in busy:
            return False
        if len(outgoing.get(b, ())) != 1 or b not in incoming:
            return False
        return incoming[b][0].id not in reg_lines and outgoing[b][0][0].id not in reg_lines

    gone = {b.id for b in g.buses if removable(b.id)}
    keep_lines = []
    eliminated = {}
    for ln in g.lines:
        child = next(to for l2, to in outgoing[incoming_from(incoming, ln)] if l2 is ln)
        frm = incoming_from(incoming, ln)
        if frm in gone:
            continue
        chain = [ln]
        z_cum = ln.impedance.matrix()
        cur = child
        path = []
        while cur in gone:
            nxt_ln, nxt_bus = outgoing[cur][0]
            path.append((cur, z_cum.copy()))
            z_cum = z_cum + nxt_ln.impedance.matrix()
            chain.append(nxt_ln)
            cur = nxt_bus
        if len(chain) == 1:
            keep_lines.append(ln)
            continue
        phases = tuple(p for p in chain[-1].phases if all(p in c.phases for c in chain))
        idx = [p.index for p in phases]
        mask = np.zeros((3, 3))
        mask[np.ix_(idx, idx)] = 1.0
        new_id = "+".join(c.id for c in chain)
        keep_lines.append(Line(new_id, frm, cur, phases, PhaseImpedanceMatrix.from_matrix(z_cum, phases)))
        for bus_id, z_off in path:
            eliminated[bus_id] = EliminatedBus(bus_id, new_id, z_off * mask, phases)

    reduced = replace(
        g,
        buses=tuple(b for b in g.buses if b.id not in gone),
        lines=tuple(keep_lines),
    )
    return reduced, BusMapping(eliminated)


def incoming_from(incoming: dict, ln: Line) -> str:
    """Sending bus of ``ln`` in substation-outward orientation."""
    to_bus = ln.to_bus if incoming.get(ln.to_bus, (None,))[0] is ln else ln.from_bus
    return incoming[to_bus][1]


# ---------------------------------------------------------------------- I/O


def _pair(val, where: str) -> complex:
    try:
        re, im = val
        return complex(float(re), float(im))
    except (TypeError, ValueError) as exc:
        raise FeederParseError(f"{where}: expected [re, im], got {val!r}") from exc


def _req(d: dict, key: str, where: str):
    try:
        return d[key]
    except (KeyError, TypeError):
        raise FeederParseError(f"{where}: missing field {key!r}") from None


def feeder_from_dict(doc: dict, name: str = "feeder") -> FeederGraph:
    """Build a validated feeder from a parsed feeder document (SI units)."""
    if not isinstance(doc, dict):
        raise FeederParseError("feeder document must be a mapping")
    base = _req(doc, "base", "document")
    v_ll = float(_req(base, "v_nominal_ll_volts", "base"))
    s_base = float(_req(base, "s_base_va", "base"))
    v_min = float(base.get("v_min_pu", 0.95))
    v_max = float(base.get("v_max_pu", 1.05))
    s_ph = s_base / 3.0
    z_base = v_ll**2 / s_base

    buses = []
    for i, b in enumerate(_req(doc, "buses", "document")):
        where = f"buses[{i}]"
        buses.append(Bus(str(_req(b, "id", where)), parse_phases(_req(b, "phases", where)),
                         bool(b.get("substation", False))))

    lines = []
    for i, ln in enumerate(doc.get("lines", [])):
        where = f"lines[{i}]"
        lid = str(_req(ln, "id", where))
        phases = parse_phases(_req(ln, "phases", where))
        ents = {}
        for key, val in _req(ln, "z", where).items():
            if len(key) != 2:
                raise FeederParseError(f"{where}: impedance key {key!r} must name two phases")
            try:
                p, q = Phase(key[0].lower()), Phase(key[1].lower())
            except ValueError:
                raise FeederParseError(f"{where}: bad impedance key {key!r}") from None
            z = _pair(val, f"{where}.z.{key}") / z_base
            for a, b in ((p, q), (q, p)):
                if (a, b) in ents and abs(ents[(a, b)] - z) > 1e-12 * max(1.0, abs(z)):
                    raise FeederValidationError(f"impedance of line {lid} is not symmetric")
                ents[(a, b)] = z
        lines.append(Line(lid, str(_req(ln, "from", where)), str(_req(ln, "to", where)),
                          phases, PhaseImpedanceMatrix(ents)))

    regs = []
    for i, r in enumerate(doc.get("regulators", [])):
        where = f"regulators[{i}]"
        phases = parse_phases(_req(r, "phases", where))
        taps_in = r.get("taps", {})
        if isinstance(taps_in, (int, float)):
            taps_in = {p.value: taps_in for p in phases}
        taps = {Phase(k.lower()): int(v) for k, v in taps_in.items()}
        regs.append(Regulator(str(_req(r, "id", where)), str(_req(r, "line", where)), phases,
                              bool(r.get("ganged", False)), taps))

    caps = []
    for i, c in enumerate(doc.get("capacitors", [])):
        where = f"capacitors[{i}]"
        caps.append(CapacitorBank(
            str(_req(c, "id", where)), str(_req(c, "bus", where)),
            parse_phases(_req(c, "phases", where)),
            float(_req(c, "q_rated_var_per_phase", where)) / s_ph,
            bool(c.get("three_phase_common_switch", True)),
            bool(c.get("status", False)),
        ))

    dgs = []
    for i, d in enumerate(doc.get("dgs", [])):
        where = f"dgs[{i}]"
        p_rated = d.get("p_rated_w_per_phase")
        dgs.append(InverterDG(
            str(_req(d, "id", where)), str(_req(d, "bus", where)),
            parse_phases(_req(d, "phases", where)),
            float(_req(d, "s_rated_va_per_phase", where)) / s_ph,
            None if p_rated is None else float(p_rated) / s_ph,
        ))

    loads = []
    for i, ld in enumerate(doc.get("loads", [])):
        where = f"loads[{i}]"
        model = ld.get("model")
        zc = cv = None
        if "zip" in ld:
            z = ld["zip"]
            zc = ZipCoefficients(tuple(_req(z, "kp", f"{where}.zip")), tuple(_req(z, "kq", f"{where}.zip")))
        if "cvr" in ld:
            c = ld["cvr"]
            cv = CvrFactors(float(_req(c, "cvr_p", f"{where}.cvr")), float(_req(c, "cvr_q", f"{where}.cvr")))
        if model is None:
            model = "zip" if zc is not None else "cvr"
        if model not in ("zip", "cvr"):
            raise FeederParseError(f"{where}: unknown load model {model!r}")
        phase = parse_phases(_req(ld, "phase", where))
        if len(phase) != 1:
            raise FeederParseError(f"{where}: a load sits on exactly one phase")
        loads.append(LoadSpec(
            str(_req(ld, "id", where)), str(_req(ld, "bus", where)), phase[0],
            float(_req(ld, "p0_w", where)) / s_ph, float(_req(ld, "q0_var", where)) / s_ph,
            model, zc, cv,
        ))

    return FeederGraph(tuple(buses), tuple(lines), tuple(regs), tuple(caps), tuple(dgs),
                       tuple(loads), v_ll, s_base, v_min, v_max, name=str(doc.get("name", name)))


def load_feeder(path) -> FeederGraph:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FeederParseError(f"{path}: {exc}") from exc
    return feeder_from_dict(doc, name=path.stem)


def feeder_to_dict(g: FeederGraph) -> dict:
    s_ph = g.s_base_phase
    zb = g.z_base

    def ph(phases):
        return "".join(p.value for p in phases)

    doc = {
        "name": g.name,
        "base": {"v_nominal_ll_volts": g.v_nominal_ll, "s_base_va": g.s_base,
                 "v_min_pu": g.v_min, "v_max_pu": g.v_max},
        "buses": [{"id": b.id, "phases": ph(b.phases), **({"substation": True} if b.is_substation else {})}
                  for b in g.buses],
        "lines": [],
        "regulators": [],
        "capacitors": [],
        "dgs": [],
        "loads": [],
    }
    for ln in g.lines:
        z = {}
        for i, p in enumerate(ln.phases):
            for q in ln.phases[i:]:
                val = ln.impedance.entries[(p, q)] * zb
                z[p.value + q.value] = [val.real, val.imag]
        doc["lines"].append({"id": ln.id, "from": ln.from_bus, "to": ln.to_bus,
                             "phases": ph(ln.phases), "z": z})
    for r in g.regulators:
        doc["regulators"].append({"id": r.id, "line": r.line, "ganged": r.ganged, "phases": ph(r.phases),
                                  "taps": {p.value: int(t) for p, t in r.taps.items()}})
    for c in g.capacitors:
        doc["capacitors"].append({"id": c.id, "bus": c.bus, "phases": ph(c.phases),
                                  "q_rated_var_per_phase": c.q_rated_per_phase * s_ph,
                                  "three_phase_common_switch": c.common_switch, "status": c.status})
    for d in g.dgs:
        ent = {"id": d.id, "bus": d.bus, "phases": ph(d.phases),
               "s_rated_va_per_phase": d.s_rated_per_phase * s_ph}
        if d.p_rated_per_phase is not None:
            ent["p_rated_w_per_phase"] = d.p_rated_per_phase * s_ph
        doc["dgs"].append(ent)
    for ld in g.loads:
        ent = {"id": ld.id, "bus": ld.bus, "phase": ld.phase.value,
               "p0_w": ld.p0 * s_ph, "q0_var": ld.q0 * s_ph, "model": ld.model}
        if ld.zip is not None:
            ent["zip"] = {"kp": list(ld.zip.kp), "kq": list(ld.zip.kq)}
        if ld.cvr is not None:
            ent["cvr"] = {"cvr_p": ld.cvr.cvr_p, "cvr_q": ld.cvr.cvr_q}
        doc["loads"].append(ent)
    return doc


def save_feeder(g: FeederGraph, path) -> None:
    Path(path).write_text(json.dumps(feeder_to_dict(g), indent=2) + "\n")


def bundled_feeder(name: str = "ieee13") -> FeederGraph:
    """Load a feeder shipped with the package (``ieee13``)."""
    return load_feeder(Path(__file__).with_name("data") / f"{name}.json")
