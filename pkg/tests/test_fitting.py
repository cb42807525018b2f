import math

import numpy as np
import pytest

from sqfluor import pipelines as P
from sqfluor.fitting import (
    FitError,
    default_nuisance,
    fit_efficiency,
    fit_full_joint,
    fit_no_drive,
    fit_sinusoid,
    fit_three_lorentzian,
    gain_sweep_truth,
    model_values,
    synthesize_trace,
)
from sqfluor.model import AtomParams, GainPoint, SqueezedBath, bath_from_gain
from sqfluor.spectra import decomposition
from sqfluor.trace import SpectrumTrace

ATOM = P.lab_atom()
DRIVEN = P.lab_atom(P.RABI_HZ / P.GAMMA_HZ)
GRID = np.linspace(-10, 10, 2001)
PEAKS = dict(offset=0.1, curvature=1e-4, center_lo=-5.0, width_lo=0.75, height_lo=0.1, center_0=0.0,
             width_0=0.5, height_0=0.3, center_hi=5.0, width_hi=0.75, height_hi=0.1)


def vacuum_trace(noise, seed):
    params = dict(n_photons=0.0, m_mag=0.0, **default_nuisance(SqueezedBath.vacuum(), ATOM))
    return synthesize_trace("no-drive", params, GRID, ATOM, noise, seed)


# ---------------------------------------------------------------- synthesis


def test_noiseless_synthesis_is_the_model():
    params = dict(n_photons=0.3, m_mag=0.5, scale=2.0, offset=1.1, curvature=1e-3)
    trace = synthesize_trace("no-drive", params, GRID, ATOM, 0.0, seed=5)
    assert np.array_equal(trace.values, model_values("no-drive", params, GRID, ATOM))
    assert trace.sigma is None


def test_synthesis_is_deterministic_per_seed():
    a, _ = P.no_drive_trace(1.4, seed=3)
    b, _ = P.no_drive_trace(1.4, seed=3)
    c, _ = P.no_drive_trace(1.4, seed=4)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_driven_synthesis_masks_coherent_peak():
    trace = P.driven_trace(SqueezedBath.vacuum(), DRIVEN, GRID, 0.0)
    assert int((~trace.included).sum()) == 7
    assert not trace.included[1000]


# ---------------------------------------------------------------- round trips


def test_no_drive_noiseless_round_trip():
    trace, bath = P.no_drive_trace(1.4, noise=0.0)
    fit = fit_no_drive(trace, ATOM)
    assert fit["n_photons"] == pytest.approx(bath.n_photons, rel=1e-6)
    assert fit["m_mag"] == pytest.approx(bath.m_mag, rel=1e-6)
    assert fit["scale"] == pytest.approx(2 * math.pi, rel=1e-6)


def test_three_lorentzian_noiseless_round_trip():
    trace = synthesize_trace("three-lorentzian", PEAKS, np.linspace(-15, 15, 1501), AtomParams())
    fit = fit_three_lorentzian(trace, AtomParams())
    for name, value in PEAKS.items():
        assert fit[name] == pytest.approx(value, rel=1e-6, abs=1e-9)


def test_full_joint_noiseless_round_trip():
    bath = bath_from_gain(GainPoint(1.5, P.ETA))
    grid = np.linspace(-12, 12, 801)
    traces = [P.driven_trace(bath.with_phase(math.pi / 2 + o), DRIVEN, grid, 0.0, k)
              for k, o in enumerate(P.FIG6_OFFSETS)]
    fit = fit_full_joint(traces, DRIVEN)
    assert fit["n_photons"] == pytest.approx(bath.n_photons, rel=1e-6)
    assert fit["m_mag"] == pytest.approx(bath.m_mag, rel=1e-6)
    assert fit["rabi"] == pytest.approx(DRIVEN.rabi, rel=1e-6)
    assert fit["phi"] == pytest.approx(math.pi / 2 - 0.15, abs=1e-6)


def test_no_drive_noisy_round_trip():
    out = P.no_drive_reproduction(1.4, noise=0.01, seed=7)
    truth = out["truth"].m_mag - out["truth"].n_photons
    assert out["fit"].converged
    assert out["fit"]["m_minus_n"] == pytest.approx(truth, rel=0.05)


def test_reparameterisation_leaves_optimum_unchanged():
    trace, _ = P.no_drive_trace(1.4, seed=3)
    squashed = fit_no_drive(trace, ATOM, coordinates="squashed")
    direct = fit_no_drive(trace, ATOM, coordinates="direct")
    assert abs(squashed.residual_norm - direct.residual_norm) < 1e-10
    assert squashed.covariance == pytest.approx(direct.covariance, rel=1e-4, abs=1e-12)


def test_m_minus_n_monotone_along_noiseless_gain_sweep():
    diffs = []
    for g in np.linspace(0.5, 6.6, 8):
        trace, _ = P.no_drive_trace(g, noise=0.0)
        diffs.append(fit_no_drive(trace, ATOM)["m_minus_n"])
    assert np.all(np.diff(diffs) > 0)


# ---------------------------------------------------------------- statistics


def test_chi2_per_dof_near_one_over_50_seeds():
    chi = [fit_no_drive(P.no_drive_trace(1.4, seed=s)[0], ATOM).chi2_reduced for s in range(50)]
    assert np.mean(chi) == pytest.approx(1.0, abs=0.1)


def test_uncertainties_shrink_as_root_points():
    def mean_sd(points):
        grid = np.linspace(-10, 10, points)
        return np.mean([fit_no_drive(P.no_drive_trace(1.4, grid=grid, seed=s)[0], ATOM).sigma("m_minus_n")
                        for s in range(10)])

    assert mean_sd(501) / mean_sd(2001) == pytest.approx(math.sqrt(2000 / 500), rel=0.3)


def test_reported_sigma_matches_seed_scatter():
    fits = [fit_no_drive(P.no_drive_trace(1.4, seed=s)[0], ATOM) for s in range(40)]
    spread = np.std([f["m_minus_n"] for f in fits], ddof=1)
    assert np.mean([f.sigma("m_minus_n") for f in fits]) == pytest.approx(spread, rel=0.3)


# ---------------------------------------------------------------- null case


@pytest.mark.xfail(strict=True, reason=(
    "with scale and offset free a vacuum trace leaves N and M unidentifiable: fits drift along "
    "degenerate valleys to the iteration cap, or settle on noise features 2-3 sigma from zero"))
def test_vacuum_trace_gives_n_m_consistent_with_zero():
    for seed in range(20):
        fit = fit_no_drive(vacuum_trace(0.01, seed), ATOM, strict=False)
        assert fit.converged
        for name in ("n_photons", "m_mag"):
            assert abs(fit[name]) <= 2 * fit.sigma(name)


def test_vacuum_noise_feature_beats_the_origin():
    trace = vacuum_trace(0.01, 37)
    free = fit_no_drive(trace, ATOM)
    start = dict(n_photons=0.01, m_mag=0.005, scale=2 * math.pi, offset=1.0, curvature=0.0)
    near_origin = fit_no_drive(trace, ATOM, guess=start, strict=False)
    assert free["m_mag"] > 2 * free.sigma("m_mag")
    # lower cost than anything reached from the origin: the estimator, not the search
    assert free.residual_norm < near_origin.residual_norm


def test_vacuum_fit_drifts_along_scale_valley():
    fit = fit_no_drive(vacuum_trace(0.01, 0), ATOM, strict=False)
    assert not fit.converged
    assert fit["scale"] > 100 and fit["m_mag"] < 0.01
    assert fit.sigma("m_mag") > 1.0


def test_noiseless_vacuum_drives_the_scale_to_zero():
    fit = fit_no_drive(vacuum_trace(0.0, 0), ATOM)
    assert fit["scale"] < 1e-9
    assert fit["offset"] == pytest.approx(1.0, abs=1e-12)


def test_single_vacuum_driven_trace_joint_fit():
    trace = P.driven_trace(SqueezedBath.vacuum(), DRIVEN, np.linspace(-12, 12, 2001), 0.01, 3)
    fit = fit_full_joint([trace], DRIVEN)
    assert fit.converged
    for name in ("n_photons", "m_mag"):
        assert abs(fit[name]) <= 2 * fit.sigma(name)
    assert fit["rabi"] == pytest.approx(DRIVEN.rabi, rel=0.01)
    assert any("single phase" in w for w in fit.warnings)


# ---------------------------------------------------------------- three Lorentzians


@pytest.mark.xfail(strict=True, reason=(
    "the dispersive part of the Mollow spectrum skews the fitted widths to 0.548 and 0.806 at Omega=5"))
def test_three_lorentzian_vacuum_mollow_widths():
    atom = AtomParams(gamma=2 * math.pi * P.GAMMA_HZ, rabi=5.0)
    trace = P.driven_trace(SqueezedBath.vacuum(), atom, np.linspace(-15, 15, 3001), 0.0)
    fit = fit_three_lorentzian(trace, atom)
    assert fit["center_hwhm"] == pytest.approx(0.5, rel=0.02)
    assert fit["sideband_hwhm"] == pytest.approx(0.75, rel=0.02)


def _absorptive_trace(atom, grid):
    dec = decomposition(SqueezedBath.vacuum(), atom)
    values = np.zeros_like(grid)
    for root, k in zip(dec.roots, dec.amplitudes):
        values += k.real * (-root.real) / ((grid + root.imag) ** 2 + root.real**2) / math.pi
    return SpectrumTrace(grid, values, {"units": "gamma", "rabi_hz": atom.rabi * atom.gamma_hz, "gamma_hz": atom.gamma_hz})


def test_three_lorentzian_exact_on_absorptive_part():
    atom = AtomParams(gamma=2 * math.pi * P.GAMMA_HZ, rabi=5.0)
    fit = fit_three_lorentzian(_absorptive_trace(atom, np.linspace(-15, 15, 3001)), atom)
    assert fit["center_hwhm"] == pytest.approx(0.5, rel=1e-5)
    assert fit["sideband_hwhm"] == pytest.approx(0.75, rel=1e-4)


def test_three_lorentzian_bias_shrinks_with_drive():
    bias = []
    for rabi in (5.0, 10.0, 20.0):
        atom = AtomParams(gamma=2 * math.pi * P.GAMMA_HZ, rabi=rabi)
        span = 3 * rabi
        trace = P.driven_trace(SqueezedBath.vacuum(), atom, np.linspace(-span, span, 3001), 0.0)
        bias.append(fit_three_lorentzian(trace, atom)["center_hwhm"] - 0.5)
    assert bias[0] > bias[1] > bias[2] > 0


def test_strong_squeezing_flags_sidebands():
    trace = P.driven_trace(bath_from_gain(GainPoint(6.6, P.ETA)), DRIVEN, np.linspace(-16, 16, 2001), 0.01)
    fit = fit_three_lorentzian(trace, DRIVEN, strict=False)
    assert fit["sidebands_resolved"] == 0.0
    assert any("unresolvable" in w for w in fit.warnings)
    mild = P.driven_trace(bath_from_gain(GainPoint(1.5, P.ETA)), DRIVEN, np.linspace(-16, 16, 2001), 0.01)
    assert fit_three_lorentzian(mild, DRIVEN)["sidebands_resolved"] == 1.0


def test_full_model_beats_three_lorentzians_on_dispersive_trace():
    atom = AtomParams(gamma=2 * math.pi * P.GAMMA_HZ, rabi=5.0)
    trace = P.driven_trace(SqueezedBath.vacuum(), atom, np.linspace(-15, 15, 1501), 0.01, 1)
    assert abs(decomposition(SqueezedBath.vacuum(), atom).amplitudes[1].imag) > 0.01
    lorentz = fit_three_lorentzian(trace, atom)
    full = fit_full_joint([trace], atom)
    assert full.residual_norm < lorentz.residual_norm
    assert full.chi2_reduced == pytest.approx(1.0, abs=0.1)


# ---------------------------------------------------------------- efficiency and sinusoids


def test_efficiency_noiseless_recovery():
    rows = [(g, d, 0.01) for g, d in gain_sweep_truth(P.DEFAULT_GAINS, 0.55)]
    fit = fit_efficiency(rows, eta_c=0.81)
    assert fit["eta"] == pytest.approx(0.55, rel=1e-6)
    assert fit["eta_loss"] == pytest.approx(0.68, abs=5e-3)


def test_efficiency_with_noisy_points():
    etas = [P.perturbed_gain_sweep(relative=0.05, seed=s)["eta"] for s in range(20)]
    assert np.mean(etas) == pytest.approx(0.55, abs=0.03)
    assert all(abs(e - 0.55) < 0.03 for e in etas)


def test_efficiency_errors():
    with pytest.raises(FitError):
        fit_efficiency([(1.0, 0.1, 0.01), (2.0, 0.2, 0.01)])
    with pytest.raises(FitError):
        fit_efficiency([(1.0, 0.1, 0.01)] * 3)
    with pytest.raises(FitError):
        fit_efficiency([(1.0, 0.1, 0.0), (2.0, 0.2, 0.01), (3.0, 0.3, 0.01)])


def test_sinusoid_fit():
    phi = np.linspace(0, math.pi, 12, endpoint=False)
    s = fit_sinusoid(phi, 1.0 + 0.2 * np.cos(2 * phi - 0.4))
    assert (s.mean, s.amplitude, s.phase) == pytest.approx((1.0, 0.2, 0.4))
    assert s.r_squared == pytest.approx(1.0)
    with pytest.raises(FitError):
        fit_sinusoid([0.0, 1.0], [1.0, 2.0])


# ---------------------------------------------------------------- errors


def test_fit_errors():
    short = synthesize_trace("no-drive", dict(n_photons=0.1, m_mag=0.1), np.linspace(-1, 1, 5), ATOM)
    with pytest.raises(FitError):
        fit_no_drive(short, ATOM)
    with pytest.raises(FitError):
        fit_full_joint([], DRIVEN)
    trace, _ = P.no_drive_trace(1.4, seed=1)
    undriven = SpectrumTrace(trace.offsets, trace.values, {**trace.metadata, "rabi_hz": 0.0}, trace.sigma)
    with pytest.raises(FitError):
        fit_full_joint([undriven], ATOM)


def test_iteration_cap_raises_when_strict():
    trace = vacuum_trace(0.01, 0)
    loose = fit_no_drive(trace, ATOM, strict=False)
    assert not loose.converged and loose.iterations >= 200
    with pytest.raises(FitError) as err:
        fit_no_drive(trace, ATOM)
    assert err.value.result is not None


def test_pinned_parameter_warning():
    trace = P.no_drive_trace(6.6, eta=1.0, noise=0.0)[0]
    fit = fit_no_drive(trace, ATOM)
    assert any("purity bound" in w for w in fit.warnings)

