
import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import build, doc, line, load, two_bus_doc
from vvo.feeder import SOURCE_ANGLES, tap_ratio
from vvo.powerflow import (BaselineConfig, DeviceSetpoints, HuntingError, PowerFlowError, estimate_current_angles,
                           feeder_unbalance, run_autonomous_baseline, solution_rows, solve_reference_pf,
                           unbalance_percent, voltage_unbalance)


def scalar_fixed_point(z, s, v0=1.0 + 0j, tol=1e-15):
    """Independent two-bus oracle: V2 = V1 - z * conj(S / V2)."""
    v = v0
    for _ in range(1000):
        nxt = v0 - z * (s / v).conjugate()
        if abs(nxt - v) < tol:
            return nxt
        v = nxt
    raise AssertionError("oracle did not converge")


def test_zero_load_flat_solution():
    d = two_bus_doc(p=0.0, q=0.0, phases="abc")
    g = build(d)
    sol = solve_reference_pf(g, DeviceSetpoints.build(g))
    src = np.exp(1j * SOURCE_ANGLES)
    assert np.array_equal(sol.voltage[1], src)
    assert np.all(sol.P == 0) and np.all(sol.Q == 0)


def test_two_bus_matches_fixed_point_oracle():
    z, s = 0.01 + 0.02j, 0.1 + 0.05j
    g = build(two_bus_doc(z=z, p=s.real, q=s.imag))
    sol = solve_reference_pf(g, tol=1e-12)
    v2 = scalar_fixed_point(z, s)
    assert abs(sol.voltage[1, 0]) == pytest.approx(abs(v2), abs=1e-8)
    i = (s / v2).conjugate()
    p_sub = (1.0 * i.conjugate()).real
    assert sol.s_substation[0].real == pytest.approx(p_sub, abs=1e-8)
    assert sol.converged


def test_ieee13_converges_and_balances(ieee13):
    sol = solve_reference_pf(ieee13)
    assert sol.converged and sol.iterations < 30
    assert np.max(sol.balance_residual) < 1e-8
    st = sol.voltage_stats()
    assert 0.95 < st["v_min"] < st["v_max"] < 1.07


def test_observer_sees_every_solve(two_bus, power_balance_observer):
    before = len(power_balance_observer)
    solve_reference_pf(two_bus)
    solve_reference_pf(two_bus)
    assert len(power_balance_observer) == before + 2


def test_divergence_raises():
    g = build(two_bus_doc(z=0.1 + 0.3j, p=5.0, q=3.0))
    with pytest.raises(PowerFlowError):
        solve_reference_pf(g)


def test_setpoint_validation(ieee13):
    with pytest.raises(ValueError):
        DeviceSetpoints.build(ieee13, taps={"Reg1": 17})
    with pytest.raises(ValueError, match="switches all phases"):
        DeviceSetpoints.build(ieee13, caps={"Cap1": {"a": True, "b": False, "c": True}})


def test_regulator_scales_downstream_voltage():
    d = two_bus_doc(p=0.0, q=0.0)
    d["regulators"] = [{"id": "R", "line": "1-2", "phases": "a", "taps": 4}]
    g = build(d)
    sol = solve_reference_pf(g, DeviceSetpoints.nominal(g))
    assert abs(sol.bus_voltage("2")[g.buses[1].phases[0]]) == pytest.approx(tap_ratio(4), abs=1e-12)


def test_capacitor_injection_is_constant_impedance():
    d = two_bus_doc(p=0.0, q=0.0)
    d["capacitors"] = [{"id": "C", "bus": "2", "phases": "a", "q_rated_var_per_phase": 0.05, "status": True}]
    g = build(d)
    sol = solve_reference_pf(g, tol=1e-12)
    v2 = abs(sol.voltage[1, 0])
    assert sol.demand[1, 0] == pytest.approx(-0.05j * v2**2, abs=1e-12)
    assert v2 > 1.0


def test_balanced_three_phase_angles():
    d = doc([("1", "abc"), ("2", "abc")], [line("1-2", "1", "2", 0.01 + 0.02j, "abc", 0.003 + 0.006j)],
            [load(f"L{p}", "2", p, 0.1, 0.04) for p in "abc"])
    est = estimate_current_angles(build(d))
    delta = np.degrees(est.delta[0])
    assert delta[0, 1] % 360 == pytest.approx(120.0, abs=1e-6)
    assert delta[1, 2] % 360 == pytest.approx(120.0, abs=1e-6)


def test_zero_load_angles_follow_convention():
    g = build(two_bus_doc(p=0.0, q=0.0, phases="abc"))
    est = estimate_current_angles(g)
    expected = SOURCE_ANGLES[:, None] - SOURCE_ANGLES[None, :]
    assert np.allclose(est.delta[0], expected)


def test_unbalance_metric():
    assert unbalance_percent([1.0, 1.0, 1.0]) == 0.0
    # average 0.98, largest deviation 0.02
    assert unbalance_percent([1.0, 0.98, 0.96]) == pytest.approx(2.0408163265, abs=1e-9)


def test_unbalance_single_phase_bus_rejected(ieee13):
    sol = solve_reference_pf(ieee13)
    with pytest.raises(ValueError, match="single phase"):
        voltage_unbalance(sol, "611")
    assert voltage_unbalance(sol, "671") > 0


def test_unbalance_grows_with_phase_a_load(ieee13):
    values = []
    for scale in (1.0, 1.3, 1.6, 1.9):
        loads = [ld.__class__(**{**ld.__dict__, "p0": ld.p0 * (scale if ld.phase.value == "a" else 1.0),
                                 "q0": ld.q0 * (scale if ld.phase.value == "a" else 1.0)})
                 for ld in ieee13.loads]
        g = ieee13.with_loads(loads)
        values.append(feeder_unbalance(solve_reference_pf(g, DeviceSetpoints.build(g))))
    assert all(b > a for a, b in zip(values, values[1:]))


def test_solution_rows(two_bus):
    buses, lines_ = solution_rows(solve_reference_pf(two_bus))
    assert [r["bus"] for r in buses] == ["1", "2"]
    assert lines_[0]["p_pu"] > 0.1


def test_baseline_no_load_is_idle():
    g = build(two_bus_doc(p=0.0, q=0.0))
    sp, sol = run_autonomous_baseline(g)
    assert sp.taps == {} and np.allclose(np.abs(sol.voltage[:, 0]), 1.0)


def regulated_two_bus(p, q, z=0.02 + 0.06j):
    d = two_bus_doc(z=z, p=p, q=q)
    d["regulators"] = [{"id": "R", "line": "1-2", "phases": "a", "taps": 0}]
    d["capacitors"] = [{"id": "C", "bus": "2", "phases": "a", "q_rated_var_per_phase": 0.001, "status": False}]
    return build(d)


def test_baseline_raises_tap_into_band():
    z, s = 0.02 + 0.06j, 0.6 + 0.3j
    g = regulated_two_bus(s.real, s.imag, z)
    # oracle: smallest tap whose far-end voltage reaches the band
    lo = BaselineConfig().band[0]
    expected = next(t for t in range(0, 17) if abs(scalar_fixed_point(z, s, tap_ratio(t) + 0j)) >= lo)
    assert expected > 2
    sp, sol = run_autonomous_baseline(g)
    ph = g.regulators[0].phases[0]
    assert sp.tap("R", ph) == expected
    assert abs(sol.bus_voltage("2")[ph]) >= lo


def test_baseline_hunting_detected():
    g = regulated_two_bus(0.4, 0.2)
    # a band narrower than one tap step cannot be met
    with pytest.raises(HuntingError):
        run_autonomous_baseline(g, config=BaselineConfig(band=(0.9900, 0.9905)))


def test_baseline_ieee13_taps_rise_with_load(ieee13):
    taps = []
    for m in (0.2, 1.0):
        sp, _ = run_autonomous_baseline(ieee13.scaled(m))
        taps.append(sum(sp.taps["Reg1"].values()))
    assert taps[1] > taps[0]


@st.composite
def radial_single_phase(draw):
    n = draw(st.integers(2, 8))
    buses = [(str(k), "a") for k in range(n)]
    lines, loads = [], []
    for k in range(1, n):
        parent = draw(st.integers(0, k - 1))
        r = draw(st.floats(0.001, 0.02))
        x = draw(st.floats(0.001, 0.04))
        lines.append(line(f"{parent}-{k}", str(parent), str(k), complex(r, x)))
        if draw(st.booleans()):
            cvr = (draw(st.floats(0, 2)), draw(st.floats(0, 4)))
            loads.append(load(f"L{k}", str(k), "a", draw(st.floats(0, 0.15)), draw(st.floats(0, 0.08)), cvr))
    return build(doc(buses, lines, loads))


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(radial_single_phase())
def test_random_feeders_conserve_power(g):
    sol = solve_reference_pf(g, tol=1e-10)
    assert np.max(sol.balance_residual) < 1e-7
    # under constant power or CVR loads no bus rises above the source
    assert np.max(np.abs(sol.voltage[:, 0])) <= 1.0 + 1e-12
