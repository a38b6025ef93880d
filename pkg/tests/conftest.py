"""Shared fixtures: small feeder builders, the bundled 13-bus feeder and a
power-balance observer attached to every reference power-flow solve."""

from __future__ import annotations

import copy
import math

import numpy as np
import pytest

from vvo import powerflow
from vvo.feeder import bundled_feeder, feeder_from_dict

# Base chosen so that 1 ohm = 1 pu and 1 W (per phase) = 1 pu.
UNIT_BASE = {"v_nominal_ll_volts": math.sqrt(3.0), "s_base_va": 3.0}
BALANCE_TOL = 1e-7

ACCEPTANCE: dict[int, tuple[bool, str]] = {}
SESSION_BALANCE = {"solves": 0, "worst": 0.0}


def line(lid, frm, to, z, phases="a", mutual=0.0):
    """Line with self impedance ``z`` (complex, pu) on every phase and ``mutual`` between phases."""
    ents = {}
    for i, p in enumerate(phases):
        for q in phases[i:]:
            val = z if p == q else mutual
            ents[p + q] = [complex(val).real, complex(val).imag]
    return {"id": lid, "from": frm, "to": to, "phases": phases, "z": ents}


def load(lid, bus, phase, p, q, cvr=(0.0, 0.0), zip_=None):
    d = {"id": lid, "bus": bus, "phase": phase, "p0_w": p, "q0_var": q}
    if zip_ is not None:
        d.update(model="zip", zip={"kp": list(zip_[0]), "kq": list(zip_[1])})
    else:
        d.update(model="cvr", cvr={"cvr_p": cvr[0], "cvr_q": cvr[1]})
    return d


def doc(buses, lines, loads=(), regulators=(), capacitors=(), dgs=(), v_limits=(0.95, 1.05), name="test"):
    """Feeder document in the unit base; ``buses[0]`` is the substation."""
    bl = [{"id": b, "phases": ph} for b, ph in buses]
    bl[0]["substation"] = True
    base = dict(UNIT_BASE, v_min_pu=v_limits[0], v_max_pu=v_limits[1])
    return {"name": name, "base": base, "buses": bl, "lines": list(lines), "loads": list(loads),
            "regulators": list(regulators), "capacitors": list(capacitors), "dgs": list(dgs)}


def build(d):
    return feeder_from_dict(copy.deepcopy(d))


def two_bus_doc(z=0.01 + 0.02j, p=0.1, q=0.05, phases="a", cvr=(0.0, 0.0)):
    loads = [load(f"L{ph}", "2", ph, p, q, cvr) for ph in phases]
    return doc([("1", phases), ("2", phases)], [line("1-2", "1", "2", z, phases)], loads)


def chain_doc(n_bare=10, z=0.002 + 0.004j, phases="abc", mutual=0.0005 + 0.001j):
    """Substation, ``n_bare`` bare buses, then a loaded bus and a capacitor bus."""
    names = ["s"] + [f"b{k}" for k in range(n_bare)] + ["load", "cap", "tail"]
    lines = [line(f"{a}-{b}", a, b, z, phases, mutual) for a, b in zip(names, names[1:])]
    loads = [load(f"L{ph}", "load", ph, 0.05 + 0.01 * k, 0.02, (0.7, 2.0)) for k, ph in enumerate(phases)]
    loads += [load(f"T{ph}", "tail", ph, 0.02, 0.01, (0.5, 1.5)) for ph in phases]
    caps = [{"id": "C1", "bus": "cap", "phases": phases, "q_rated_var_per_phase": 0.01,
             "three_phase_common_switch": True, "status": True}]
    return doc([(b, phases) for b in names], lines, loads, capacitors=caps, name="chain")


def dyadic_chain_doc(n_bare=12):
    """Single-phase chain whose data are short binary fractions.

    Constant-power loads keep the linear model free of rounding, so reduced
    and full solutions can be compared bit for bit.
    """
    names = ["s"] + [f"b{k}" for k in range(n_bare)] + ["load", "mid", "tail"]
    lines = [line(f"{a}-{b}", a, b, (1 + k % 3) / 1024 + (2 + k % 2) / 1024 * 1j)
             for k, (a, b) in enumerate(zip(names, names[1:]))]
    loads = [load("L", "load", "a", 0.125, 0.0625), load("M", "mid", "a", 0.25, 0.0625),
             load("T", "tail", "a", 0.0625, 0.03125)]
    return doc([(b, "a") for b in names], lines, loads, name="dyadic")


@pytest.fixture(scope="session")
def ieee13():
    return bundled_feeder("ieee13")


@pytest.fixture()
def two_bus():
    return build(two_bus_doc())


@pytest.fixture(autouse=True)
def power_balance_observer():
    """Every reference solve made by a test must conserve power per phase."""
    seen = []
    powerflow.solve_observers.append(seen.append)
    yield seen
    powerflow.solve_observers.remove(seen.append)
    worst = _fold_balance(seen)
    assert worst <= BALANCE_TOL, f"power balance residual {worst:.3e} exceeds {BALANCE_TOL}"


def _fold_balance(seen):
    worst = max((float(np.max(sol.balance_residual)) for sol in seen), default=0.0)
    SESSION_BALANCE["solves"] += len(seen)
    SESSION_BALANCE["worst"] = max(SESSION_BALANCE["worst"], worst)
    return worst


@pytest.fixture(scope="session")
def day_compare(tmp_path_factory):
    """Full-day VVO and baseline run through the CLI on the bundled inputs (serial)."""
    from vvo.cli import main
    from vvo.reports import read_rows

    out = tmp_path_factory.mktemp("day")
    seen = []
    powerflow.solve_observers.append(seen.append)
    try:
        code = main(["--mode", "compare", "--out", str(out), "--no-plots"])
    finally:
        powerflow.solve_observers.remove(seen.append)
    assert code == 0
    assert _fold_balance(seen) <= BALANCE_TOL
    return {"out": out, **{name: read_rows(out / f"{name}.csv") for name in
                           ("schedule", "baseline", "comparison", "comparison_summary")}}


@pytest.fixture()
def acceptance():
    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return record


def pytest_collection_modifyitems(config, items):
    # acceptance runs last so the conservation criterion covers the whole suite
    items.sort(key=lambda it: "test_acceptance.py" in it.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, 11):
        ok, detail = ACCEPTANCE.get(n, (False, "not run"))
        tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    tr.write_line(f"reference solves observed: {SESSION_BALANCE['solves']}, "
                  f"worst balance residual {SESSION_BALANCE['worst']:.2e} pu")
