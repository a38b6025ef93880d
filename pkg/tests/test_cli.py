import json
import math
from importlib import resources

import numpy as np
import pytest

from vvo import bilevel, solvers
from vvo.bilevel import orchestrate_timestep
from vvo.cli import EXIT_INPUT, EXIT_IO, EXIT_OK, EXIT_SOLVER, main, parse_mix, InputError
from vvo.profiles import (ProfileError, ProfileSeries, bundled_profile, load_profiles, save_profiles, step_inputs,
                          synthetic_day)
from vvo.reports import read_rows, record_row, schedule_rows, timestamp, write_rows


def feeder_doc():
    return json.loads((resources.files("vvo") / "data" / "ieee13.json").read_text())


def write_json(path, d):
    path.write_text(json.dumps(d))
    return path


def flat_profile(path, mult=0.5, pv=0.0, steps=96):
    save_profiles(ProfileSeries((mult,) * steps, (pv,) * steps), path)
    return path


# ------------------------------------------------------------------ profiles and reports


def test_profile_validation():
    with pytest.raises(ProfileError, match="steps"):
        ProfileSeries((0.5, 0.5), (0.0,))
    with pytest.raises(ProfileError, match="outside"):
        ProfileSeries((0.5, 1.6), (0.0, 0.0))
    with pytest.raises(ProfileError, match="outside"):
        ProfileSeries((0.5, -0.1), (0.0, 0.0))
    with pytest.raises(ProfileError, match="no steps"):
        ProfileSeries((), ())


def test_profile_csv_round_trip(tmp_path):
    p = synthetic_day(seed=4)
    save_profiles(p, tmp_path / "p.csv")
    assert load_profiles(tmp_path / "p.csv") == p


def test_profile_csv_errors(tmp_path):
    (tmp_path / "a.csv").write_text("step,load_mult\n0,0.5\n")
    with pytest.raises(ProfileError, match="pv_mult"):
        load_profiles(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("step,load_mult,pv_mult\n0,0.5,0\n2,0.5,0\n")
    with pytest.raises(ProfileError, match="gaps"):
        load_profiles(tmp_path / "b.csv")
    (tmp_path / "c.csv").write_text("step,load_mult,pv_mult\n0,x,0\n")
    with pytest.raises(ProfileError, match="non-numeric"):
        load_profiles(tmp_path / "c.csv")


def test_bundled_profile_shape():
    p = bundled_profile()
    assert len(p) == 96
    # overnight valley, evening peak, PV zero at night and full at noon
    assert 0 <= p.min_load_step() < 24 and 72 <= p.max_load_step() < 88
    assert p.pv_mult[0] == 0.0 and p.pv_mult[48] == pytest.approx(1.0)


def test_class_profiles_weighted_by_mix():
    p = ProfileSeries((0.5, 0.5), (0.0, 0.0), {"residential": (0.2, 0.4), "large_commercial": (0.6, 0.8)})
    assert p.load_for(1, {"residential": 0.8, "large_commercial": 0.2}) == pytest.approx(0.48)
    assert p.load_for(1) == 0.5
    with pytest.raises(ProfileError, match="lacks"):
        p.load_for(0, {"industrial": 1.0})


def test_parse_mix():
    assert parse_mix("residential=0.8, large_commercial=0.2") == {"residential": 0.8, "large_commercial": 0.2}
    for bad in ("residential", "residential=x", "residential=-1", ""):
        with pytest.raises(InputError):
            parse_mix(bad)


def test_timestamp():
    assert timestamp(0, 15) == "00:00"
    assert timestamp(95, 15) == "23:45"
    assert timestamp(3, 20) == "01:00"


def test_schedule_csv_round_trip(tmp_path, ieee13):
    sched = bilevel.ControlSchedule(step_minutes=15)
    prof = bundled_profile()
    for k in (40, 41):
        inp = step_inputs(ieee13, prof, k)
        sched.add(orchestrate_timestep(inp.graph, inp.dg_p, k))
    rows = schedule_rows(ieee13, sched)
    write_rows(tmp_path / "s.csv", rows)
    back = read_rows(tmp_path / "s.csv")
    assert back == rows
    assert {"tap_Reg1_a", "cap_Cap2_c", "q_DG1_a_kvar", "l1_objective_kw", "p_sub_a_kw", "v_avg"} <= set(rows[0])
    total = sum(rows[0][f"p_sub_{p}_kw"] for p in "abc")
    assert rows[0]["p_sub_kw"] == pytest.approx(total)


def test_record_row_units(ieee13):
    rec = orchestrate_timestep(ieee13.scaled(0.4), {"DG1": 0.0})
    row = record_row(ieee13, rec, 15)
    # 1 pu per phase is 1 MW on this feeder
    assert row["p_sub_kw"] == pytest.approx(rec.verification.p_total * 1e3)
    assert row["l1_objective_kw"] == pytest.approx(rec.l1_objective * 1e3)


# ------------------------------------------------------------------ exit codes


def test_exit_code_input_errors(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert main(["--mode", "pf-validate", "--vmin", "1.1", "--vmax", "1.0", "--out", out]) == EXIT_INPUT
    assert main(["--mode", "vvo-day", "--step-minutes", "10", "--out", out]) == EXIT_INPUT
    assert main(["--mode", "vvo-day", "--cvr-p", "0.5", "--out", out]) == EXIT_INPUT
    bad = write_json(tmp_path / "bad.json", {"name": "x"})
    assert main(["--mode", "pf-validate", "--feeder", str(bad), "--out", out]) == EXIT_INPUT
    assert "error:" in capsys.readouterr().err


def test_exit_code_io_errors(tmp_path):
    assert main(["--mode", "pf-validate", "--feeder", str(tmp_path / "missing.json")]) == EXIT_IO
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["--mode", "pf-validate", "--no-plots", "--out", str(blocker / "sub")]) == EXIT_IO


def test_exit_code_solver_failure(tmp_path):
    # fifty times nominal load has no power-flow solution
    assert main(["--mode", "pf-validate", "--levels", "5000", "--out", str(tmp_path)]) == EXIT_SOLVER


# ------------------------------------------------------------------ pf-validate


def test_pf_validate_tables(tmp_path):
    assert main(["--mode", "pf-validate", "--out", str(tmp_path)]) == EXIT_OK
    rows = read_rows(tmp_path / "pf_errors.csv")
    got = {(r["loading_pct"], r["model"]): r for r in rows}
    assert got[(75.0, "linear")]["v_err_pu"] <= 0.0075
    assert got[(100.0, "linear")]["v_err_pu"] <= 0.0096
    assert got[(75.0, "quadratic")]["v_err_pu"] <= 0.0015
    assert got[(100.0, "quadratic")]["v_err_pu"] <= 0.0025
    ang = read_rows(tmp_path / "angle_errors.csv")
    assert [r["loading_pct"] for r in ang] == [75.0, 100.0]
    for name in ("pf_buses_75.csv", "pf_lines_100.csv", "pf_voltage_100.png"):
        assert (tmp_path / name).stat().st_size > 0


def test_pf_validate_zero_load_is_exact(tmp_path):
    d = feeder_doc()
    for c in d["capacitors"]:
        c["status"] = False
    f = write_json(tmp_path / "f.json", d)
    assert main(["--mode", "pf-validate", "--feeder", str(f), "--levels", "0", "--no-plots",
                 "--out", str(tmp_path)]) == EXIT_OK
    for r in read_rows(tmp_path / "pf_errors.csv"):
        assert r["v_err_pu"] == 0.0 and r["p_err_pct"] == 0.0 and r["q_err_pct"] == 0.0
        assert r["substation_p_err_pct"] == 0.0 and r["unbalance_err_pct"] == 0.0
    assert read_rows(tmp_path / "angle_errors.csv")[0]["max_angle_err_deg"] == 0.0


def test_pf_validate_unbalanced_variant(tmp_path):
    base = read_rows(_pf(tmp_path / "base", feeder_doc()))
    d = feeder_doc()
    for ld in d["loads"]:
        if ld["phase"] == "a":
            ld["p0_w"] *= 1.8
            ld["q0_var"] *= 1.8
    unb = read_rows(_pf(tmp_path / "unb", d))
    for r0, r1 in zip(base, unb):
        assert r1["unbalance_ref_pct"] > r0["unbalance_ref_pct"] > 0
        assert math.isfinite(r1["unbalance_err_pct"]) and r1["unbalance_err_pct"] >= 0


def _pf(out, d):
    out.mkdir()
    f = write_json(out / "f.json", d)
    assert main(["--mode", "pf-validate", "--feeder", str(f), "--levels", "100", "--no-plots",
                 "--out", str(out)]) == EXIT_OK
    return out / "pf_errors.csv"


def test_pf_validate_never_runs_the_mip(tmp_path, monkeypatch):
    def forbidden(*a, **k):
        raise AssertionError("MIP solver called in pf-validate")

    monkeypatch.setattr(solvers, "solve_mip", forbidden)
    monkeypatch.setattr(bilevel, "solve_mip", forbidden)
    assert main(["--mode", "pf-validate", "--no-plots", "--out", str(tmp_path)]) == EXIT_OK


# ------------------------------------------------------------------ daily modes


def test_flat_profile_gives_constant_setpoints(tmp_path):
    prof = flat_profile(tmp_path / "flat.csv")
    assert main(["--mode", "vvo-day", "--profiles", str(prof), "--steps", "3", "--no-plots",
                 "--out", str(tmp_path)]) == EXIT_OK
    rows = read_rows(tmp_path / "schedule.csv")
    assert len(rows) == 3
    keys = [k for k in rows[0] if k.startswith(("tap_", "cap_", "q_", "p_sub", "v_"))]
    for r in rows[1:]:
        assert all(r[k] == rows[0][k] for k in keys)


def test_outputs_identical_across_worker_counts(tmp_path):
    outs = []
    for w in (1, 2):
        out = tmp_path / f"w{w}"
        assert main(["--mode", "compare", "--steps", "3", "--workers", str(w), "--out", str(out)]) == EXIT_OK
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir())
    assert names == sorted(p.name for p in outs[1].iterdir())
    assert "comparison.png" in names
    for n in names:
        assert (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes(), n


def _savings(tmp_path, tag, *extra):
    out = tmp_path / tag
    prof = flat_profile(tmp_path / "low.csv", mult=0.2)
    assert main(["--mode", "compare", "--profiles", str(prof), "--steps", "1", "--no-plots",
                 "--out", str(out), *extra]) == EXIT_OK
    return {r["metric"]: r["value"] for r in read_rows(out / "comparison_summary.csv")}


def test_zero_cvr_savings_are_loss_only(tmp_path):
    s = _savings(tmp_path, "zero", "--cvr-p", "0", "--cvr-q", "0")
    with_cvr = _savings(tmp_path, "res", "--load-mix", "residential=1")
    assert abs(s["savings_pct"]) < 0.5
    assert with_cvr["savings_pct"] > 3 * abs(s["savings_pct"])


def test_large_commercial_mix_saves_less(tmp_path):
    res = _savings(tmp_path, "res", "--load-mix", "residential=1")
    mix = _savings(tmp_path, "mix", "--load-mix", "residential=0.8,large_commercial=0.2")
    assert 0 < mix["savings_pct"] < res["savings_pct"]


@pytest.mark.slow
def test_day_run_tables(day_compare):
    sched, base, comp = day_compare["schedule"], day_compare["baseline"], day_compare["comparison"]
    assert len(sched) == len(base) == len(comp) == 96
    assert [r["time"] for r in sched[:2]] == ["00:00", "00:15"]
    # every step verifies within the re-tightening tolerance
    assert min(r["v_min"] for r in sched) >= 0.95 - 0.002
    assert np.mean([r["v_avg"] for r in sched]) == pytest.approx(0.96, abs=0.01)
    # relative savings peak where net demand is lowest
    k_best = int(np.argmax([r["savings_pct"] for r in comp]))
    assert k_best == int(np.argmin([r["p_baseline_kw"] for r in comp]))
    summary = {r["metric"]: r["value"] for r in day_compare["comparison_summary"]}
    assert summary["max_savings_step"] == k_best
    assert summary["savings_kwh"] > 0
