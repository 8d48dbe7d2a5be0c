import math
import subprocess
import sys

import numpy as np
import pytest

from tbteleport.cli import main
from tbteleport.data_io import read_csv, read_timetags, write_csv
from tbteleport.fitting import PhaseModulatorModel, SaturationModel


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_classical_bound_prints_reference_value(capsys):
    code, out, _ = run(capsys, "classical-bound", "--mu", "6.5e-4")
    assert code == 0
    assert out.strip() == "0.666694"


def test_classical_bound_table(tmp_path, capsys):
    path = tmp_path / "fb.csv"
    assert run(capsys, "classical-bound", "--mu", "1e-12", "6.5e-4", "--out", str(path))[0] == 0
    cols = read_csv(path)
    assert cols["mu"] == [1e-12, 6.5e-4]
    assert abs(cols["F_max"][0] - 2 / 3) < 1e-9


def test_console_script_entry_point():
    out = subprocess.run(
        [sys.executable, "-m", "tbteleport.cli", "classical-bound", "--mu", "6.5e-4"],
        capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "0.666694"


def test_visibility_curve_zero_eta(tmp_path, capsys):
    path = tmp_path / "v.csv"
    code, _, _ = run(capsys, "visibility-curve", "--eta", "0", "--x", "0.25", "1", "2", "--out", str(path))
    assert code == 0
    cols = read_csv(path)
    assert cols["V_analytic"] == [0.0, 0.0, 0.0]
    assert all(abs(v) < 1e-12 for v in cols["V_oracle"])


def test_visibility_curve_stdout(capsys):
    code, out, _ = run(capsys, "visibility-curve", "--x", "1.19", "--no-oracle")
    assert code == 0
    header, row = out.strip().splitlines()
    assert header.startswith("x,p_nv,mu,eta,V_analytic")
    assert row.startswith("1.19,")


def test_teleport_fidelity_curve(tmp_path, capsys):
    path = tmp_path / "f.csv"
    code, _, _ = run(capsys, "teleport-fidelity", "--x", "0.5", "1.2", "--out", str(path))
    assert code == 0
    cols = read_csv(path)
    assert np.allclose(cols["F_avg_model"], cols["F_avg_oracle"], atol=2e-3)
    assert all(f > c for f, c in zip(cols["F_avg_model"], cols["F_classical"]))


def test_simulate_teleport_requires_seed(tmp_path, capsys):
    code, _, err = run(capsys, "simulate-teleport", "--out-dir", str(tmp_path))
    assert code == 2
    assert "seed" in err


def test_simulate_teleport_is_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "simulate-teleport", "--seed", "7", "--shots", "200000", "--out-dir", str(tmp_path / d))[0] == 0
    a = (tmp_path / "a" / "teleport_states.csv").read_bytes()
    b = (tmp_path / "b" / "teleport_states.csv").read_bytes()
    assert a == b
    cols = read_csv(tmp_path / "a" / "teleport_states.csv")
    assert cols["state"] == ["+Z", "-Z", "+X", "-X", "+Y", "-Y"]


def test_simulate_tpqi_outputs(tmp_path, capsys):
    code, out, _ = run(
        capsys, "simulate-tpqi", "--seed", "3", "--shots", "200000", "--timetags", "--out-dir", str(tmp_path)
    )
    assert code == 0
    hist = read_csv(tmp_path / "tpqi_histogram.csv")
    assert hist["delta"] == list(range(-9, 10))
    tags = read_timetags(tmp_path / "tpqi_timetags.csv")
    assert len(tags) > 0
    summary = read_csv(tmp_path / "tpqi_summary.csv")
    assert summary["seed"] == [3]


def test_simulate_from_config(tmp_path, capsys):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(
        "nv: {p_nv: 4.5e-4, g2: 0.011}\nwcs: {x: 1.2, leak_epsilon: 0.04}\neta: 0.895\n"
        "noise: {p_noise: 5.5e-6}\nseed: 11\nshots: 100000\n"
        f"output: {{dir: {tmp_path / 'out'}, prefix: run1_}}\n"
    )
    assert run(capsys, "simulate-teleport", "--config", str(cfg))[0] == 0
    assert (tmp_path / "out" / "run1_teleport_states.csv").exists()


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("nv: {p_nv: 4.5e-4}\nwcs: {x: 1.2}\neta: 1.2\nseed: 1\n")
    code, _, err = run(capsys, "simulate-teleport", "--config", str(cfg))
    assert code == 2
    assert "eta" in err


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["classical-bound", "--mu", "1e-3", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_numerical_failure_exit_code(capsys):
    code, _, err = run(capsys, "teleport-fidelity", "--x", "0", "--p-noise", "0", "--no-oracle")
    assert code == 3
    assert "numerical" in err


def test_fit_pm(tmp_path, capsys):
    v = np.linspace(-5, 5, 31)
    p = np.array([math.pi / 5.202, 0.2, 900, 850, 1000, 950])
    x = np.column_stack([np.concatenate([v, v]), np.repeat([0.0, 1.0], len(v))])
    y = PhaseModulatorModel()(x, p)
    data = tmp_path / "pm.csv"
    write_csv({"voltage": v, "cps1": y[: len(v)], "cps2": y[len(v):]}, data)
    out = tmp_path / "fit.csv"
    assert run(capsys, "fit", "pm", "--data", str(data), "--out", str(out))[0] == 0
    cols = read_csv(out)
    vals = dict(zip(cols["name"], cols["value"]))
    assert abs(vals["V_pi"] - 5.202) < 1e-6
    assert vals["V_pi_half"] == vals["V_pi"] / 2


def test_fit_saturation_and_noise(tmp_path, capsys):
    pw = np.linspace(0.1, 3, 10)
    data = tmp_path / "sat.csv"
    write_csv({"power": pw, "eta": SaturationModel()(pw, np.array([0.32, 1.7]))}, data)
    code, out, _ = run(capsys, "fit", "saturation", "--data", str(data))
    assert code == 0
    rows = dict(line.split(",")[:2] for line in out.strip().splitlines()[1:])
    assert abs(float(rows["eta_max"]) - 0.32) < 1e-8
    data = tmp_path / "noise.csv"
    write_csv({"setting": [0.0, 1e-3, 2e-3], "rate": [11.7, 31.7, 51.7]}, data)
    code, out, _ = run(capsys, "fit", "noise", "--data", str(data))
    assert code == 0
    rows = dict(line.split(",")[:2] for line in out.strip().splitlines()[1:])
    assert abs(float(rows["intercept"]) - 11.7) < 1e-9


def test_fit_visibility_missing_column(tmp_path, capsys):
    data = tmp_path / "v.csv"
    write_csv({"x": [1.0, 2.0]}, data)
    assert run(capsys, "fit", "visibility", "--data", str(data))[0] == 2


def test_selftest_passes(capsys):
    code, out, _ = run(capsys, "selftest")
    assert code == 0
    assert out.count("[PASS]") == 3
