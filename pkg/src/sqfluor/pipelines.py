"""Batch drivers shared by the command line and the acceptance suite.

Each driver is deterministic for a given seed. Work fans out over a process
pool when ``workers > 1``; results are always returned in input order.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import oracle
from .fitting import (
    FitError,
    default_nuisance,
    fit_efficiency,
    fit_full_joint,
    fit_no_drive,
    fit_sinusoid,
    fit_three_lorentzian,
    r_squared,
    synthesize_trace,
)
from .model import AtomParams, GainPoint, SqueezedBath, bath_from_gain, squeezing_db
from .spectra import (
    BackgroundModel,
    DegenerateRootsWarning,
    decomposition,
    default_grid,
    fluorescence_density,
    steady_state,
    strong_drive_widths,
)

GAMMA_HZ = 304e3
ETA_C = 0.81
ETA = 0.55
RABI_HZ = 1.2e6
SQUEEZER_BANDWIDTH_HZ = 21e6


def worker_count(default: int = 1) -> int:
    raw = os.environ.get("SQFLUOR_WORKERS")
    if not raw:
        return default
    try:
        return max(int(raw), 1)
    except ValueError:
        raise ValueError(f"SQFLUOR_WORKERS must be an integer, got {raw!r}") from None


def fan_out(fn, items, workers: int = 1) -> list:
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def lab_atom(rabi: float = 0.0, eta_c: float = ETA_C) -> AtomParams:
    return AtomParams(2 * math.pi * GAMMA_HZ, eta_c, rabi)


# ---------------------------------------------------------------- oracle equivalence


@dataclass(frozen=True)
class OracleCase:
    bath: SqueezedBath
    atom: AtomParams
    label: str = ""


def random_cases(count: int = 50, seed: int = 1) -> list:
    """Valid parameter sets with N in [0, 3], purity in [0, 1], phase in [0, pi),
    drive in [0, 10] and eta_c in [0.5, 1]."""
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(count):
        n, r, phi, rabi, eta = rng.uniform([0, 0, 0, 0, 0.5], [3, 1, math.pi, 10, 1])
        cases.append(OracleCase(SqueezedBath.from_purity(n, r, phi), AtomParams(eta_c=eta, rabi=rabi), f"set{i:03d}"))
    return cases


def threshold_case() -> OracleCase:
    """Ordinary vacuum driven exactly at the point where two roots merge."""
    return OracleCase(SqueezedBath.vacuum(), AtomParams(rabi=0.25), "mollow-threshold")


def check_case(case: OracleCase, rate_sign: float = 1.0) -> dict:
    """Compare closed forms with the master-equation oracle for one parameter set."""
    out = {"label": case.label, "n_photons": case.bath.n_photons, "m_mag": case.bath.m_mag,
           "phi": case.bath.phi, "rabi": case.atom.rabi, "eta_c": case.atom.eta_c}
    grid = default_grid(case.bath, case.atom)
    with warnings.catch_warnings(record=True) as log:
        warnings.simplefilter("always", DegenerateRootsWarning)
        analytic, k, degenerate = fluorescence_density(case.bath, case.atom, grid)
    out["degenerate"] = bool(degenerate or log)
    state = steady_state(case.bath, case.atom)
    if not degenerate:
        d = decomposition(case.bath, case.atom)
        out["sum_rule_error"] = abs(complex(np.sum(d.amplitudes) + d.coherent_weight) - state.excited_population)
    else:
        out["sum_rule_error"] = None
    try:
        rho = oracle.steady_density(case.bath, case.atom, rate_sign=rate_sign)
        out["steady_state_error"] = float(np.max(np.abs(oracle.bloch_vector(rho) - state.vector)))
        numeric = oracle.spectrum_numeric(case.bath, case.atom, grid, rate_sign=rate_sign).values
        out["linf_relative"] = float(np.max(np.abs(numeric - analytic)) / np.max(np.abs(analytic)))
        out["error"] = None
    except oracle.OracleError as exc:
        out["steady_state_error"] = None
        out["linf_relative"] = None
        out["error"] = str(exc)
    return out


def _check_case_corrupt(case):
    return check_case(case, rate_sign=-1.0)


def oracle_check(cases, tolerance: float = 1e-3, workers: int = 1, corrupt: bool = False) -> dict:
    rows = fan_out(_check_case_corrupt if corrupt else check_case, cases, workers)
    failures = [r["label"] for r in rows if r["error"] or r["linf_relative"] is None or r["linf_relative"] >= tolerance]

    def worst(key):
        vals = [r[key] for r in rows if r[key] is not None]
        return max(vals) if vals else None

    return {
        "cases": rows,
        "tolerance": tolerance,
        "worst": {
            "linf_relative": worst("linf_relative"),
            "sum_rule_error": worst("sum_rule_error"),
            "steady_state_error": worst("steady_state_error"),
        },
        "degenerate": [r["label"] for r in rows if r["degenerate"]],
        "failures": failures,
        "passed": not failures,
    }


# ---------------------------------------------------------------- synthetic sweeps


def no_drive_trace(gain_db: float, eta: float = ETA, atom: AtomParams | None = None, grid=None,
                   noise: float = 0.01, seed: int = 0):
    atom = (atom or lab_atom()).with_rabi(0.0)
    bath = bath_from_gain(GainPoint(gain_db, eta))
    grid = np.linspace(-10, 10, 2001) if grid is None else grid
    params = dict(n_photons=bath.n_photons, m_mag=bath.m_mag, **default_nuisance(bath, atom))
    trace = synthesize_trace("no-drive", params, grid, atom, noise, seed, metadata={"gain_db": float(gain_db)})
    return trace, bath


def driven_trace(bath: SqueezedBath, atom: AtomParams, grid, noise: float = 0.01, seed: int = 0,
                 background: BackgroundModel | None = None, gain_db: float | None = None):
    params = dict(n_photons=bath.n_photons, m_mag=bath.m_mag, rabi=atom.rabi, phi=bath.phi_raw,
                  **default_nuisance(bath, atom))
    meta = {"gain_db": float(gain_db)} if gain_db is not None else None
    return synthesize_trace("full-analytic", params, grid, atom, noise, seed, background, metadata=meta)


def _three_lorentzian_row(args):
    trace, atom = args
    try:
        r = fit_three_lorentzian(trace, atom)
    except FitError as exc:
        return {"phi": trace.metadata.get("phi_rad"), "error": str(exc)}
    return {
        "phi": trace.metadata.get("phi_rad"),
        "center_hwhm": r["center_hwhm"],
        "center_sigma": r.sigma("center_hwhm"),
        "sideband_hwhm": r["sideband_hwhm"],
        "sideband_sigma": r.sigma("sideband_hwhm"),
        "resolved": bool(r["sidebands_resolved"]),
        "warnings": list(r.warnings),
        "error": None,
    }


def phase_sweep_fits(traces, atom: AtomParams, workers: int = 1) -> dict:
    """Three-Lorentzian widths versus phase, with period-pi sinusoids through them."""
    rows = fan_out(_three_lorentzian_row, [(t, atom) for t in traces], workers)
    good = [r for r in rows if r["error"] is None]
    out = {"rows": rows, "failures": [r["phi"] for r in rows if r["error"]]}
    if len(good) >= 3:
        phis = [r["phi"] for r in good]
        out["center_fit"] = fit_sinusoid(phis, [r["center_hwhm"] for r in good])
        out["sideband_fit"] = fit_sinusoid(phis, [r["sideband_hwhm"] for r in good])
    return out


def predicted_widths(bath: SqueezedBath, phis) -> tuple[np.ndarray, np.ndarray]:
    """Strong-drive half widths (centre, sideband) at each phase."""
    centre, side = [], []
    for phi in phis:
        c, s = strong_drive_widths(bath.with_phase(phi))
        centre.append(c / 2)
        side.append(s / 2)
    return np.array(centre), np.array(side)


def phase_sweep(gain_db: float = 1.5, phis=None, rabi: float | None = None, noise: float = 0.01, seed: int = 0,
                grid=None, workers: int = 1) -> dict:
    atom = lab_atom(RABI_HZ / GAMMA_HZ if rabi is None else rabi)
    phis = np.linspace(0, math.pi, 13)[:-1] if phis is None else np.asarray(phis, dtype=float)
    grid = np.linspace(-16, 16, 2001) if grid is None else grid
    base = bath_from_gain(GainPoint(gain_db, ETA))
    traces = [driven_trace(base.with_phase(phi), atom, grid, noise, seed + k, gain_db=gain_db)
              for k, phi in enumerate(phis)]
    out = phase_sweep_fits(traces, atom, workers)
    out["traces"] = traces
    out["bath"] = base
    out["atom"] = atom
    centre, side = predicted_widths(base, phis)
    out["predicted"] = {"center_hwhm": centre, "sideband_hwhm": side}
    fitted_c = np.array([r.get("center_hwhm", np.nan) for r in out["rows"]])
    fitted_s = np.array([r.get("sideband_hwhm", np.nan) for r in out["rows"]])
    ok = np.isfinite(fitted_c) & np.isfinite(fitted_s)
    out["r_squared_vs_prediction"] = {
        "center": r_squared(fitted_c[ok], centre[ok]),
        "sideband": r_squared(fitted_s[ok], side[ok]),
    }
    return out


def _no_drive_row(args):
    trace, atom = args
    try:
        r = fit_no_drive(trace, atom)
    except FitError as exc:
        return {"gain_db": trace.metadata.get("gain_db"), "error": str(exc)}
    return {
        "gain_db": trace.metadata.get("gain_db"),
        "m_minus_n": r["m_minus_n"],
        "sigma": r.sigma("m_minus_n"),
        "squeezing_db": r["squeezing_db"],
        "error": None,
    }


def gain_sweep_fits(traces, atom: AtomParams, workers: int = 1) -> dict:
    rows = fan_out(_no_drive_row, [(t, atom) for t in traces], workers)
    good = [r for r in rows if r["error"] is None]
    out = {"rows": rows, "failures": [r["gain_db"] for r in rows if r["error"]]}
    if len({r["gain_db"] for r in good}) >= 2 and len(good) >= 3:
        out["efficiency"] = fit_efficiency([(r["gain_db"], r["m_minus_n"], r["sigma"]) for r in good], atom.eta_c)
    return out


DEFAULT_GAINS = (0.5, 1.0, 1.4, 2.0, 3.0, 4.0, 5.0, 6.0, 6.6)


def gain_sweep(gains=DEFAULT_GAINS, eta: float = ETA, noise: float = 0.01, seed: int = 0, workers: int = 1) -> dict:
    atom = lab_atom()
    traces = [no_drive_trace(g, eta, atom, noise=noise, seed=seed + k)[0] for k, g in enumerate(gains)]
    out = gain_sweep_fits(traces, atom, workers)
    out["traces"] = traces
    return out


def perturbed_gain_sweep(gains=DEFAULT_GAINS, eta: float = ETA, relative: float = 0.05, seed: int = 0,
                         eta_c: float = ETA_C):
    """Efficiency fit to truth values of M - N with multiplicative noise of size ``relative``."""
    rng = np.random.default_rng(seed)
    points = []
    for g in gains:
        bath = bath_from_gain(GainPoint(g, eta))
        truth = bath.m_mag - bath.n_photons
        points.append((g, truth * (1 + relative * rng.standard_normal()), relative * truth))
    return fit_efficiency(points, eta_c)


# ---------------------------------------------------------------- presets


def no_drive_reproduction(gain_db: float = 1.4, noise: float = 0.01, seed: int = 7) -> dict:
    atom = lab_atom()
    trace, bath = no_drive_trace(gain_db, ETA, atom, noise=noise, seed=seed)
    result = fit_no_drive(trace, atom)
    return {"trace": trace, "truth": bath, "truth_db": squeezing_db(bath), "fit": result}


FIG6_OFFSETS = (-0.15, -0.05, 0.05, 0.15)


def joint_reproduction(gain_db: float = 6.6, noise: float = 0.01, seed: int = 60, span: float = 12.0,
                       points: int = 2001, background: str = "lorentzian") -> dict:
    """Four driven traces near the phase that narrows the centre peak, fitted jointly."""
    atom = lab_atom(RABI_HZ / GAMMA_HZ)
    bath = bath_from_gain(GainPoint(gain_db, ETA))
    bg = BackgroundModel("lorentzian", SQUEEZER_BANDWIDTH_HZ / GAMMA_HZ) if background == "lorentzian" else None
    grid = np.linspace(-span, span, points)
    traces = [
        driven_trace(bath.with_phase(math.pi / 2 + o), atom, grid, noise, seed + k, bg, gain_db)
        for k, o in enumerate(FIG6_OFFSETS)
    ]
    result = fit_full_joint(traces, atom)
    return {"traces": traces, "truth": bath, "fit": result, "atom": atom}


PRESETS = {
    "vacuum-mollow": {
        "description": "ordinary-vacuum Mollow triplet",
        "bath": {"n_photons": 0.0, "m_mag": 0.0, "phi": 0.0},
        "atom": {"gamma_hz": GAMMA_HZ, "eta_c": 1.0, "rabi": 5.0},
        "spectrum": "fluorescence",
    },
    "mollow-threshold": {
        "description": "ordinary vacuum driven where two spectral roots coincide",
        "bath": {"n_photons": 0.0, "m_mag": 0.0, "phi": 0.0},
        "atom": {"gamma_hz": GAMMA_HZ, "eta_c": 1.0, "rabi": 0.25},
        "spectrum": "fluorescence",
    },
    "fig2a": {
        "description": "undriven reflection at 1.4 dB squeezer gain with overall efficiency 0.55",
        "bath": {"gain_db": 1.4, "efficiency": ETA, "phi": 0.0},
        "atom": {"gamma_hz": GAMMA_HZ, "eta_c": ETA_C, "rabi": 0.0},
        "spectrum": "no-drive",
    },
    "fig3": {
        "description": "driven reflection at 1.5 dB gain, Rabi frequency 1.2 MHz, swept squeezing phase",
        "bath": {"gain_db": 1.5, "efficiency": ETA, "phi": 0.0},
        "atom": {"gamma_hz": GAMMA_HZ, "eta_c": ETA_C, "rabi": RABI_HZ / GAMMA_HZ},
        "spectrum": "reflection",
    },
    "fig4": {
        "description": "squeezing level versus squeezer gain with a one-parameter efficiency fit",
        "bath": {"gain_db": 1.4, "efficiency": ETA, "phi": 0.0},
        "atom": {"gamma_hz": GAMMA_HZ, "eta_c": ETA_C, "rabi": 0.0},
        "spectrum": "no-drive",
    },
    "fig6": {
        "description": "joint fit of four driven traces at 6.6 dB gain near the narrowing phase",
        "bath": {"gain_db": 6.6, "efficiency": ETA, "phi": math.pi / 2},
        "atom": {"gamma_hz": GAMMA_HZ, "eta_c": ETA_C, "rabi": RABI_HZ / GAMMA_HZ},
        "spectrum": "reflection",
    },
}

PRESET_CONSTANTS = {
    "gamma_hz": GAMMA_HZ,
    "eta_c": ETA_C,
    "eta": ETA,
    "rabi_hz": RABI_HZ,
    "squeezer_bandwidth_hz": SQUEEZER_BANDWIDTH_HZ,
}
