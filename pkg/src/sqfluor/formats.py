"""Text serialisation of traces, job files and fit reports.

Trace files are comment-headed two or three column text. Every float is
written with 17 significant digits so a read-back is bit-exact, header keys
are sorted, and the same trace always produces the same bytes. Job files and
reports are JSON.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import AtomParams, GainPoint, SqueezedBath, bath_from_gain
from .spectra import BackgroundModel
from .trace import SpectrumTrace

TRACE_FORMAT = "sqfluor-trace/1"

FLOAT_KEYS = ("gamma_hz", "eta_c", "gain_db", "phi_rad", "rabi_hz", "n_photons", "m_mag", "noise")
INT_KEYS = ("seed",)
STR_KEYS = ("units", "kind", "normalization", "flags")
HEADER_KEYS = FLOAT_KEYS + INT_KEYS + STR_KEYS + ("mask",)


class TraceFormatError(ValueError):
    def __init__(self, message, line=None, path=None):
        where = f"{path}:" if path else ""
        where += f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


def _fmt(x) -> str:
    return format(float(x), ".17g")


def format_trace(trace: SpectrumTrace) -> str:
    meta = trace.metadata
    unknown = sorted(set(meta) - set(HEADER_KEYS))
    if unknown:
        raise TraceFormatError(f"metadata keys not in the trace schema: {', '.join(unknown)}")
    columns = "offset,power" + (",sigma" if trace.sigma is not None else "")
    lines = [f"# format={TRACE_FORMAT}", f"# columns={columns}"]
    for key in sorted(meta):
        value = meta[key]
        if value is None:
            continue
        if key == "mask":
            text = ",".join(str(int(i)) for i in value)
        elif key in FLOAT_KEYS:
            text = _fmt(value)
        elif key in INT_KEYS:
            text = str(int(value))
        else:
            text = str(value)
            if "\n" in text or "=" in text:
                raise TraceFormatError(f"value of {key} may not contain '=' or newlines")
        lines.append(f"# {key}={text}")
    cols = [trace.offsets, trace.values] + ([trace.sigma] if trace.sigma is not None else [])
    for row in zip(*cols):
        lines.append(" ".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def write_trace(trace: SpectrumTrace, path) -> None:
    data = format_trace(trace)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(data)


def _parse_header(key, text, lineno, path):
    try:
        if key == "mask":
            return tuple(int(v) for v in text.split(",")) if text else ()
        if key in FLOAT_KEYS:
            return float(text)
        if key in INT_KEYS:
            return int(text)
    except ValueError:
        raise TraceFormatError(f"bad value for {key}: {text!r}", lineno, path) from None
    return text


def parse_trace(text: str, path=None) -> SpectrumTrace:
    meta = {}
    columns = None
    rows = []
    seen_format = False
    last = -math.inf
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if rows:
                raise TraceFormatError("header line after data", lineno, path)
            body = line[1:].strip()
            if "=" not in body:
                raise TraceFormatError(f"header line is not key=value: {body!r}", lineno, path)
            key, _, value = body.partition("=")
            key, value = key.strip(), value.strip()
            if key == "format":
                if value != TRACE_FORMAT:
                    raise TraceFormatError(f"unsupported format {value!r}", lineno, path)
                seen_format = True
            elif key == "columns":
                if value not in ("offset,power", "offset,power,sigma"):
                    raise TraceFormatError(f"unsupported columns {value!r}", lineno, path)
                columns = value.split(",")
            elif key in HEADER_KEYS:
                if key in meta:
                    raise TraceFormatError(f"duplicate header key {key}", lineno, path)
                meta[key] = _parse_header(key, value, lineno, path)
            else:
                raise TraceFormatError(f"unknown header key {key!r}", lineno, path)
            continue
        if not seen_format or columns is None:
            raise TraceFormatError("data before the format and columns header lines", lineno, path)
        fields = line.split()
        if len(fields) != len(columns):
            raise TraceFormatError(f"expected {len(columns)} columns, found {len(fields)}", lineno, path)
        try:
            row = [float(f) for f in fields]
        except ValueError:
            raise TraceFormatError(f"non-numeric field in {line!r}", lineno, path) from None
        if not all(math.isfinite(v) for v in row):
            raise TraceFormatError("non-finite value", lineno, path)
        if row[0] <= last:
            raise TraceFormatError(f"offset {fields[0]} does not increase", lineno, path)
        if len(row) == 3 and row[2] <= 0:
            raise TraceFormatError("sigma must be positive", lineno, path)
        last = row[0]
        rows.append(row)
    if not seen_format:
        raise TraceFormatError("missing format header", None, path)
    if not rows:
        raise TraceFormatError("no data rows", None, path)
    arr = np.array(rows, dtype=float)
    sigma = arr[:, 2].copy() if arr.shape[1] == 3 else None
    try:
        return SpectrumTrace(arr[:, 0].copy(), arr[:, 1].copy(), meta, sigma)
    except ValueError as exc:
        raise TraceFormatError(str(exc), None, path) from None


def read_trace(path) -> SpectrumTrace:
    with open(path, encoding="ascii") as fh:
        return parse_trace(fh.read(), path)


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


# ---------------------------------------------------------------- job files


class JobError(ValueError):
    """Schema violations in a job file; ``problems`` lists every failing key."""

    def __init__(self, problems, path=None):
        self.problems = list(problems)
        head = f"{path}: " if path else ""
        super().__init__(head + "invalid job:\n  " + "\n  ".join(self.problems))


_NUMBER = (int, float)

# key -> (type, default, check) ; check returns an error message or None
_SECTIONS = {
    "bath": {
        "n_photons": (_NUMBER, None, lambda v: None if v >= 0 else "must be >= 0"),
        "m_mag": (_NUMBER, None, lambda v: None if v >= 0 else "must be >= 0"),
        "purity": (_NUMBER, None, lambda v: None if 0 <= v <= 1 else "must lie in [0, 1]"),
        "gain_db": (_NUMBER, None, lambda v: None if v >= 0 else "must be >= 0"),
        "efficiency": (_NUMBER, 1.0, lambda v: None if 0 < v <= 1 else "must lie in (0, 1]"),
        "phi": (_NUMBER, 0.0, None),
        "itinerant": (bool, False, None),
    },
    "atom": {
        "gamma_hz": (_NUMBER, 304e3, lambda v: None if v > 0 else "must be > 0"),
        "eta_c": (_NUMBER, 1.0, lambda v: None if 0 < v <= 1 else "must lie in (0, 1]"),
        "rabi": (_NUMBER, 0.0, lambda v: None if v >= 0 else "must be >= 0"),
    },
    "grid": {
        "start": (_NUMBER, None, None),
        "stop": (_NUMBER, None, None),
        "points": (int, 2001, lambda v: None if v >= 2 else "must be >= 2"),
    },
    "noise": {
        "relative": (_NUMBER, 0.0, lambda v: None if v >= 0 else "must be >= 0"),
        "seed": (int, 0, lambda v: None if v >= 0 else "must be >= 0"),
    },
    "background": {
        "shape": (str, "flat", lambda v: None if v in ("flat", "lorentzian", "parabolic") else
                  "must be one of flat, lorentzian, parabolic"),
        "bandwidth": (_NUMBER, None, lambda v: None if v > 0 else "must be > 0"),
        "curvature": (_NUMBER, None, None),
    },
    "oracle": {
        "sets": (int, 50, lambda v: None if v >= 1 else "must be >= 1"),
        "seed": (int, 1, None),
        "tolerance": (_NUMBER, 1e-3, lambda v: None if v > 0 else "must be > 0"),
    },
}

_TOP = {
    "spectrum": (str, "reflection", lambda v: None if v in SPECTRA else f"must be one of {', '.join(SPECTRA)}"),
    "model": (str, "no-drive", lambda v: None if v in MODELS else f"must be one of {', '.join(MODELS)}"),
    "scale": (_NUMBER, 2 * math.pi, lambda v: None if v > 0 else "must be > 0"),
    "traces": (list, [], None),
    "phase_offsets": (list, None, None),
    "phases": (list, None, None),
    "gains_db": (list, None, None),
}

SPECTRA = ("fluorescence", "reflection", "no-drive", "strong-drive")
MODELS = ("no-drive", "three-lorentzian", "full-analytic")


@dataclass
class JobConfig:
    """Validated job document with defaults filled in."""

    data: dict
    source: str | None = None

    def __getitem__(self, key):
        return self.data[key]

    def bath(self) -> SqueezedBath:
        b = self.data["bath"]
        if b.get("gain_db") is not None:
            bath = bath_from_gain(GainPoint(b["gain_db"], b["efficiency"]), b["phi"])
        else:
            n = b.get("n_photons") or 0.0
            if b.get("purity") is not None:
                bath = SqueezedBath.from_purity(n, b["purity"], b["phi"])
            else:
                bath = SqueezedBath(n, b.get("m_mag") or 0.0, b["phi"])
        if b["itinerant"]:
            bath = bath.scaled(self.data["atom"]["eta_c"])
        return bath

    def atom(self) -> AtomParams:
        a = self.data["atom"]
        return AtomParams(2 * math.pi * a["gamma_hz"], a["eta_c"], a["rabi"])

    def grid(self):
        g = self.data["grid"]
        if g.get("start") is None:
            return None
        return np.linspace(g["start"], g["stop"], g["points"])

    def background(self) -> BackgroundModel:
        b = self.data["background"]
        return BackgroundModel(b["shape"], b.get("bandwidth"), b.get("curvature"))


def _check_value(where, rule, value, problems):
    kind, _, check = rule
    if value is None:
        return
    if kind is _NUMBER:
        ok = isinstance(value, _NUMBER) and not isinstance(value, bool) and math.isfinite(value)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        problems.append(f"{where}: expected {getattr(kind, '__name__', 'number')}, got {value!r}")
        return
    if check is not None:
        msg = check(value)
        if msg:
            problems.append(f"{where}: {value!r} {msg}")


def validate_job(doc) -> tuple[dict, list]:
    """Return (document with defaults, list of problems)."""
    problems = []
    if not isinstance(doc, dict):
        return {}, ["job: top level must be a JSON object"]
    out = {}
    for key in sorted(set(doc) - set(_TOP) - set(_SECTIONS) - {"output"}):
        problems.append(f"{key}: unknown key")
    for key, rule in _TOP.items():
        value = doc.get(key, rule[1])
        _check_value(key, rule, value, problems)
        out[key] = value
    for section, fields in _SECTIONS.items():
        given = doc.get(section, {})
        if given is None:
            given = {}
        if not isinstance(given, dict):
            problems.append(f"{section}: expected an object")
            given = {}
        for key in sorted(set(given) - set(fields)):
            problems.append(f"{section}.{key}: unknown key")
        merged = {}
        for key, rule in fields.items():
            value = given.get(key, rule[1])
            _check_value(f"{section}.{key}", rule, value, problems)
            merged[key] = value
        out[section] = merged
    output = doc.get("output", {})
    if not isinstance(output, dict):
        problems.append("output: expected an object")
        output = {}
    for key in sorted(set(output) - {"dir", "prefix"}):
        problems.append(f"output.{key}: unknown key")
    out["output"] = {"dir": output.get("dir", "."), "prefix": output.get("prefix", "trace")}

    bath = out["bath"]
    if bath.get("gain_db") is not None and any(bath.get(k) is not None for k in ("n_photons", "m_mag", "purity")):
        problems.append("bath: give either gain_db or explicit moments, not both")
    if bath.get("m_mag") is not None and bath.get("purity") is not None:
        problems.append("bath: give either m_mag or purity, not both")
    n, m = bath.get("n_photons"), bath.get("m_mag")
    if isinstance(n, _NUMBER) and isinstance(m, _NUMBER) and n >= 0 and m > math.sqrt(n * (n + 1)) + 1e-12:
        problems.append(f"bath.m_mag: {m!r} exceeds sqrt(N(N+1)) = {math.sqrt(n * (n + 1))!r}")
    grid = out["grid"]
    if (grid.get("start") is None) != (grid.get("stop") is None):
        problems.append("grid: start and stop must be given together")
    elif grid.get("start") is not None and isinstance(grid["start"], _NUMBER) and isinstance(grid["stop"], _NUMBER):
        if grid["stop"] <= grid["start"]:
            problems.append("grid.stop: must exceed grid.start")
    for key in ("traces",):
        for i, item in enumerate(out[key] or []):
            if not isinstance(item, str):
                problems.append(f"{key}[{i}]: expected a path string")
    for key in ("phase_offsets", "phases", "gains_db"):
        for i, item in enumerate(out[key] or []):
            if not isinstance(item, _NUMBER) or isinstance(item, bool):
                problems.append(f"{key}[{i}]: expected a number")
    return out, problems


def parse_job(doc, source=None) -> JobConfig:
    data, problems = validate_job(doc)
    if problems:
        raise JobError(problems, source)
    return JobConfig(data, source)


def read_job(path) -> JobConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise JobError([f"line {exc.lineno}: {exc.msg}"], path) from None
    return parse_job(doc, str(path))


# ---------------------------------------------------------------- reports


def json_safe(value):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return json_safe(value.tolist())
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def dumps_canonical(doc) -> str:
    return json.dumps(json_safe(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"


def report_dict(result, inputs=(), seed=None, extra=None) -> dict:
    from . import __version__

    doc = {
        "kind": result.kind,
        "estimates": result.estimates,
        "uncertainties": result.uncertainties,
        "derived": {k: {"value": v, "sigma": s} for k, (v, s) in sorted(result.derived.items())},
        "covariance": {"names": list(result.names), "matrix": result.covariance},
        "residual_norm": result.residual_norm,
        "dof": result.dof,
        "chi2_reduced": result.chi2_reduced,
        "iterations": result.iterations,
        "converged": result.converged,
        "warnings": list(result.warnings),
        "provenance": {
            "inputs": {os.path.basename(str(p)): sha256_file(p) for p in inputs},
            "seed": seed,
            "version": __version__,
        },
    }
    if extra:
        doc.update(extra)
    return doc


def write_report(result, path, inputs=(), seed=None, extra=None) -> None:
    Path(path).write_text(dumps_canonical(report_dict(result, inputs, seed, extra)), encoding="utf-8")


def write_json(doc, path) -> None:
    Path(path).write_text(dumps_canonical(doc), encoding="utf-8")


def write_table(path, header, rows) -> None:
    """Whitespace-separated columns with a single ``#`` header line."""
    lines = ["# " + " ".join(header)]
    for row in rows:
        lines.append(" ".join(_fmt(v) if not isinstance(v, str) else v for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
