import json
import math
import subprocess
import sys

import numpy as np
import pytest
from scipy.signal import find_peaks

from sqfluor import pipelines as P
from sqfluor.cli import main
from sqfluor.fitting import default_nuisance, synthesize_trace
from sqfluor.formats import read_trace, sha256_file, write_trace
from sqfluor.model import SqueezedBath


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def summary(capsys, *argv):
    code, out, err = run(capsys, *argv, "--format", "json")
    return code, json.loads(out), err


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_help_documents_flags_and_workers(capsys):
    assert run(capsys, "--help")[0] == 0
    out = capsys.readouterr().out or ""
    code = main(["sim", "--help"])
    text = capsys.readouterr().out
    assert code == 0
    for flag in ("--config", "--seed", "--out-dir", "--format", "--grid", "--preset"):
        assert flag in text
    main(["--help"])
    assert "SQFLUOR_WORKERS" in out + capsys.readouterr().out


def test_sim_vacuum_mollow(capsys, tmp_path):
    code, s, _ = summary(capsys, "sim", "--preset", "vacuum-mollow", "--rabi", "5", "--out-dir", str(tmp_path))
    assert code == 0
    trace = read_trace(tmp_path / s["trace"])
    peaks, _ = find_peaks(trace.values)
    assert trace.offsets[peaks] == pytest.approx([-4.9, 0.0, 4.9], abs=0.15)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["files"] == {s["trace"]: sha256_file(tmp_path / s["trace"])}
    assert manifest["parameters"]["atom"]["rabi"] == 5.0
    assert "--out-dir" not in manifest["command"]


def test_sim_is_byte_identical_across_runs(capsys, tmp_path):
    argv = ["sim", "--preset", "fig3", "--noise", "0.01", "--seed", "4", "--grid=-8:8:401"]
    assert run(capsys, *argv, "--out-dir", str(tmp_path / "a"))[0] == 0
    assert run(capsys, *argv, "--out-dir", str(tmp_path / "b"))[0] == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    assert run(capsys, *argv[:5], "--seed", "5", "--grid=-8:8:401", "--out-dir", str(tmp_path / "c"))[0] == 0
    assert tree(tmp_path / "a")["trace.txt"] != tree(tmp_path / "c")["trace.txt"]


def test_sim_from_config(capsys, tmp_path):
    job = {"bath": {"gain_db": 1.4, "efficiency": 0.55}, "atom": {"eta_c": 0.81}, "spectrum": "no-drive",
           "grid": {"start": -5, "stop": 5, "points": 101}, "output": {"dir": str(tmp_path / "o"), "prefix": "nd"}}
    (tmp_path / "job.json").write_text(json.dumps(job))
    code, s, _ = summary(capsys, "sim", "--config", str(tmp_path / "job.json"))
    assert code == 0
    assert len(read_trace(tmp_path / "o" / "nd.txt")) == 101
    assert s["m_mag"] - s["n_photons"] == pytest.approx(0.1893, abs=1e-4)


def test_reproduce_fig2a_shape(capsys, tmp_path):
    code, s, _ = summary(capsys, "reproduce", "fig2a", "--out-dir", str(tmp_path))
    assert code == 0
    t = read_trace(tmp_path / "fig2a_trace.txt")
    floor = np.median(t.values[np.abs(t.offsets) > 8])
    centre = t.values[np.abs(t.offsets) < 0.05].mean()
    shoulder = t.values[(np.abs(t.offsets) > 1.5) & (np.abs(t.offsets) < 2.5)].mean()
    assert centre > floor and shoulder < floor
    # shallow: the dip is a small fraction of the peak height
    assert floor - shoulder < 0.25 * (centre - floor)
    assert s["gamma_y"] < 0.5
    fit = json.loads((tmp_path / "fig2a_fit.json").read_text())
    assert "m_minus_n" in fit["derived"] and "truth" in fit


def test_reproduce_fig3_two_phases(capsys, tmp_path):
    code, s, _ = summary(capsys, "reproduce", "fig3", "--phi", "0,1.5708", "--out-dir", str(tmp_path))
    assert code == 0
    rows = np.loadtxt(tmp_path / "fig3_widths.tsv", ndmin=2)
    assert rows[0, 1] > 0.5
    assert rows[1, 1] < 0.5
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["constants"]["gamma_hz"]["value"] == 304e3
    assert manifest["constants"]["gamma_hz"]["note"]


def test_reproduce_fig6_reports_m_minus_n(capsys, tmp_path):
    code, s, _ = summary(capsys, "reproduce", "fig6", "--out-dir", str(tmp_path))
    assert code == 0
    fit = json.loads((tmp_path / "fig6_fit.json").read_text())
    assert fit["derived"]["m_minus_n"]["value"] == pytest.approx(0.258, abs=0.013)
    assert fit["derived"]["m_minus_n"]["sigma"] > 0
    assert len([f for f in tmp_path.iterdir() if f.name.startswith("fig6_trace")]) == 4


def test_oracle_check_default_passes(capsys, tmp_path):
    code, s, _ = summary(capsys, "oracle-check", "--out-dir", str(tmp_path))
    assert code == 0
    assert s["sets"] == 50 and s["result"] == "pass"
    assert s["worst_linf_relative"] < 1e-3
    report = json.loads((tmp_path / "oracle_report.json").read_text())
    assert len(report["cases"]) == 50


def test_oracle_check_corrupted_rate_sign_fails(capsys, tmp_path):
    code, s, err = summary(capsys, "oracle-check", "--sets", "3", "--corrupt-rate-sign", "--out-dir", str(tmp_path))
    assert code == 1
    assert s["result"] == "FAIL"
    assert "error:" in err


def test_oracle_check_threshold_warns(capsys, tmp_path):
    code, s, err = summary(capsys, "oracle-check", "--preset", "mollow-threshold", "--out-dir", str(tmp_path))
    assert code == 0
    assert s["degenerate"] == ["mollow-threshold"]
    assert "near-degenerate" in err


def test_fit_vacuum_mollow_trace(capsys, tmp_path):
    run(capsys, "sim", "--preset", "vacuum-mollow", "--spectrum", "reflection", "--noise", "0.01", "--seed", "3",
        "--out-dir", str(tmp_path))
    code, s, _ = summary(capsys, "fit", str(tmp_path / "trace.txt"), "--model", "full-analytic",
                         "--out-dir", str(tmp_path / "fit"))
    assert code == 0
    row = s["fits"][0]
    assert abs(row["m_minus_n"]) <= 2 * row["m_minus_n_sigma"]
    report = json.loads((tmp_path / "fit" / "fit_joint.json").read_text())
    assert report["provenance"]["inputs"] == {"trace.txt": sha256_file(tmp_path / "trace.txt")}


def test_fit_collects_failures_and_continues(capsys, tmp_path):
    # a normalised vacuum trace with seed 0 drifts to the iteration cap; the squeezed one fits
    run(capsys, "sim", "--preset", "fig2a", "--noise", "0.01", "--seed", "7", "--out-dir", str(tmp_path / "good"))
    atom = P.lab_atom()
    params = dict(n_photons=0.0, m_mag=0.0, **default_nuisance(SqueezedBath.vacuum(), atom))
    (tmp_path / "bad").mkdir()
    write_trace(synthesize_trace("no-drive", params, np.linspace(-10, 10, 2001), atom, 0.01, 0),
                tmp_path / "bad" / "trace.txt")
    code, s, err = summary(capsys, "fit", str(tmp_path / "bad" / "trace.txt"), str(tmp_path / "good" / "trace.txt"),
                           "--out-dir", str(tmp_path / "fit"))
    assert code == 1
    assert [f["trace"] for f in s["failures"]] == ["trace.txt"]
    assert len(s["fits"]) == 1
    assert "did not converge" in err


def test_sweep_gain_recovers_eta(capsys, tmp_path):
    code, s, _ = summary(capsys, "sweep-gain", "--out-dir", str(tmp_path))
    assert code == 0
    assert s["eta"] == pytest.approx(0.55, abs=0.03)
    table = np.loadtxt(tmp_path / "gain_gain.tsv", ndmin=2)
    assert np.all(np.diff(table[:, 1]) > 0)


def test_sweep_gain_from_trace_files(capsys, tmp_path):
    run(capsys, "sweep-gain", "--gains", "1,3,5", "--out-dir", str(tmp_path / "a"))
    files = sorted(str(p) for p in (tmp_path / "a").glob("gain_trace*.txt"))
    code, s, _ = summary(capsys, "sweep-gain", *files, "--out-dir", str(tmp_path / "b"))
    assert code == 0
    assert s["eta"] == pytest.approx(0.55, abs=0.03)


def test_sweep_phase_lag_is_quarter_period(capsys, tmp_path):
    code, s, _ = summary(capsys, "sweep-phase", "--out-dir", str(tmp_path))
    assert code == 0
    assert s["phase_lag"] == pytest.approx(math.pi / 2, abs=0.1)
    assert s["center_r_squared"] > 0.99


def test_reproduce_is_byte_identical(capsys, tmp_path):
    for d in ("a", "b"):
        assert run(capsys, "reproduce", "fig4", "--seed", "2", "--out-dir", str(tmp_path / d))[0] == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")


@pytest.mark.parametrize("argv", [
    ["sim", "--preset", "nope"],
    ["sim", "--grid", "1:0:5"],
    ["fit"],
    ["fit", "missing.txt"],
    ["oracle-check", "--config", "missing.json"],
])
def test_usage_errors_exit_2(capsys, tmp_path, argv):
    assert run(capsys, *argv, "--out-dir", str(tmp_path))[0] == 2


def test_bad_config_lists_problems(capsys, tmp_path):
    (tmp_path / "job.json").write_text(json.dumps({"bath": {"n_photons": -1}, "atom": {"eta_c": 2}}))
    code, _, err = run(capsys, "sim", "--config", str(tmp_path / "job.json"), "--out-dir", str(tmp_path))
    assert code == 2
    assert "bath.n_photons" in err and "atom.eta_c" in err


def test_unparseable_trace_exits_2(capsys, tmp_path):
    (tmp_path / "t.txt").write_text("# format=sqfluor-trace/1\n# columns=offset,power\n1 1\n0 1\n")
    code, _, err = run(capsys, "fit", str(tmp_path / "t.txt"), "--out-dir", str(tmp_path))
    assert code == 2
    assert "line 4" in err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sqfluor.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("sqfluor ")
