import json
import math
from pathlib import Path

import numpy as np
import pytest

from sqfluor import pipelines as P
from sqfluor.fitting import fit_no_drive
from sqfluor.formats import (
    JobError,
    TraceFormatError,
    dumps_canonical,
    format_trace,
    parse_job,
    parse_trace,
    read_job,
    read_trace,
    report_dict,
    sha256_file,
    write_report,
    write_trace,
)
from sqfluor.model import SqueezedBath
from sqfluor.trace import SpectrumTrace

DATA = Path(__file__).parent / "data"
GOLDEN = DATA / "golden_trace.txt"
# recorded when the golden file was first written
GOLDEN_SHA256 = "907336b6eb50c372382738371dab70f8a718cd0d64c8dfd4e76bfd8a185e0925"


def sample_trace(points=2001, seed=0):
    return P.no_drive_trace(1.4, grid=np.linspace(-10, 10, points), seed=seed)[0]


def test_round_trip_2001_points(tmp_path):
    t = sample_trace()
    path = tmp_path / "t.txt"
    write_trace(t, path)
    back = read_trace(path)
    assert back == t
    assert back.metadata == t.metadata


def test_round_trip_awkward_floats(tmp_path):
    rng = np.random.default_rng(9)
    offsets = np.cumsum(rng.uniform(1e-9, 1.0, 300)) - 150.0
    values = rng.normal(size=300) * 10.0 ** rng.integers(-300, 300, size=300)
    t = SpectrumTrace(offsets, values, {"units": "hz", "gamma_hz": 304e3, "mask": (3, 1)})
    write_trace(t, tmp_path / "a.txt")
    back = read_trace(tmp_path / "a.txt")
    assert back == t
    assert back.mask == (1, 3)


def test_canonical_bytes(tmp_path):
    t = sample_trace(101)
    write_trace(t, tmp_path / "a.txt")
    write_trace(read_trace(tmp_path / "a.txt"), tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_golden_file_reparses_identically(tmp_path):
    assert sha256_file(GOLDEN) == GOLDEN_SHA256
    t = read_trace(GOLDEN)
    assert len(t) == 161
    assert t.metadata["seed"] == 11
    assert t.mask == (77, 78, 79, 80, 81, 82, 83)
    assert t.metadata["phi_rad"] == math.pi / 2
    write_trace(t, tmp_path / "again.txt")
    assert sha256_file(tmp_path / "again.txt") == GOLDEN_SHA256


def test_golden_file_matches_regeneration():
    atom = P.lab_atom(4.0)
    fresh = P.driven_trace(SqueezedBath(0.21, 0.40, math.pi / 2), atom, np.linspace(-8, 8, 161), 0.01, 11,
                           gain_db=1.5)
    golden = read_trace(GOLDEN)
    assert golden.metadata == fresh.metadata
    assert np.allclose(golden.values, fresh.values, rtol=1e-13, atol=0)


def test_non_monotone_offsets_name_the_line():
    text = format_trace(sample_trace(20)).splitlines()
    header = sum(1 for line in text if line.startswith("#"))
    text[header + 5], text[header + 6] = text[header + 6], text[header + 5]
    with pytest.raises(TraceFormatError) as err:
        parse_trace("\n".join(text), path="bad.txt")
    assert err.value.line == header + 7
    assert f"bad.txt:line {header + 7}" in str(err.value)


@pytest.mark.parametrize("mutate, fragment", [
    (lambda lines: lines[1:], "data before the format"),
    (lambda lines: lines + ["# seed=1"], "header line after data"),
    (lambda lines: lines[:3] + ["# colour=blue"] + lines[3:], "unknown header key"),
    (lambda lines: lines + ["1e9 nan"], "non-finite"),
    (lambda lines: lines + ["1e9 1 2 3"], "expected 2 columns"),
    (lambda lines: lines + ["1e9 x"], "non-numeric"),
    (lambda lines: [l.replace("sqfluor-trace/1", "other/2") for l in lines], "unsupported format"),
])
def test_parse_errors(mutate, fragment):
    t = SpectrumTrace(np.arange(5.0), np.ones(5), {"seed": 3})
    lines = format_trace(t).splitlines()
    with pytest.raises(TraceFormatError, match=fragment):
        parse_trace("\n".join(mutate(lines)))


def test_mask_out_of_range_is_rejected():
    lines = format_trace(SpectrumTrace(np.arange(5.0), np.ones(5))).splitlines()
    lines.insert(2, "# mask=9")
    with pytest.raises(TraceFormatError, match="mask"):
        parse_trace("\n".join(lines))


def test_minimal_job_gets_defaults():
    job = parse_job({})
    assert job["spectrum"] == "reflection"
    assert job["model"] == "no-drive"
    assert job["atom"] == {"gamma_hz": 304e3, "eta_c": 1.0, "rabi": 0.0}
    assert job["noise"] == {"relative": 0.0, "seed": 0}
    assert job["output"] == {"dir": ".", "prefix": "trace"}
    assert job.bath() == SqueezedBath.vacuum()
    assert job.grid() is None


def test_job_with_negative_n_is_rejected():
    with pytest.raises(JobError) as err:
        parse_job({"bath": {"n_photons": -0.1}})
    assert err.value.problems == ["bath.n_photons: -0.1 must be >= 0"]


def test_job_lists_every_problem():
    doc = {"bath": {"n_photons": 0.1, "m_mag": 2.0, "spin": 1}, "atom": {"eta_c": 1.5}, "grid": {"start": 3},
           "colour": "blue", "model": "cubic"}
    with pytest.raises(JobError) as err:
        parse_job(doc)
    joined = "\n".join(err.value.problems)
    for fragment in ("colour: unknown key", "bath.spin: unknown key", "atom.eta_c", "model",
                     "exceeds sqrt(N(N+1))", "grid: start and stop"):
        assert fragment in joined
    assert len(err.value.problems) == 6


def test_job_file_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"bath": {"n_photons": 0.1,}}')
    with pytest.raises(JobError, match="line 1"):
        read_job(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"bath": {"gain_db": 1.4, "efficiency": 0.55}, "grid": {"start": -5, "stop": 5}}))
    job = read_job(good)
    assert job.bath().m_mag - job.bath().n_photons == pytest.approx(0.1893, abs=1e-4)
    assert job.grid().size == 2001


def test_report_contains_estimates_and_provenance(tmp_path):
    trace = sample_trace(seed=7)
    write_trace(trace, tmp_path / "t.txt")
    fit = fit_no_drive(read_trace(tmp_path / "t.txt"), P.lab_atom())
    write_report(fit, tmp_path / "r.json", inputs=[tmp_path / "t.txt"], seed=7)
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["derived"]["m_minus_n"]["value"] == pytest.approx(fit["m_minus_n"])
    assert doc["derived"]["m_minus_n"]["sigma"] > 0
    assert set(doc["estimates"]) == {"n_photons", "m_mag", "scale", "offset", "curvature"}
    assert doc["provenance"]["inputs"] == {"t.txt": sha256_file(tmp_path / "t.txt")}
    assert doc["provenance"]["seed"] == 7
    assert doc["residual_norm"] == pytest.approx(fit.residual_norm)


def test_report_serialisation_is_canonical():
    fit = fit_no_drive(sample_trace(seed=2), P.lab_atom())
    assert dumps_canonical(report_dict(fit)) == dumps_canonical(report_dict(fit))
    assert dumps_canonical({"x": float("nan")}) == '{\n  "x": null\n}\n'
