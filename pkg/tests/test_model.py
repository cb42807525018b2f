import math

import numpy as np
import pytest

from sqfluor.model import (
    AtomParams,
    GainPoint,
    SqueezedBath,
    UnphysicalBathError,
    bath_from_gain,
    ideal_moments,
    quadrature_variance,
    rates_from_params,
    squeezing_db,
    squeezing_db_from_difference,
    validity_check,
)


def random_baths(count, seed=3):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = rng.uniform(0, 3)
        yield SqueezedBath.from_purity(n, rng.uniform(0, 1), rng.uniform(0, math.pi))


def test_bath_rejects_unphysical_moments():
    with pytest.raises(UnphysicalBathError):
        SqueezedBath(0.5, 0.9)
    with pytest.raises(ValueError):
        SqueezedBath(-0.1, 0.0)


def test_bath_admits_roundoff_at_purity_bound():
    n = 0.7
    SqueezedBath(n, math.sqrt(n * (n + 1)) + 5e-13)


def test_phase_reduced_mod_pi_and_raw_kept():
    b = SqueezedBath(0.2, 0.1, 3 * math.pi / 2 + 0.1)
    assert b.phi == pytest.approx(math.pi / 2 + 0.1, abs=1e-14)
    assert b.phi_raw == pytest.approx(3 * math.pi / 2 + 0.1)
    assert 0 <= SqueezedBath(0.2, 0.1, -0.3).phi < math.pi


def test_atom_port_rates_sum_to_gamma():
    a = AtomParams(eta_c=0.81)
    assert a.gamma_ext + a.gamma_int == pytest.approx(a.gamma)
    assert a.gamma_ext == pytest.approx(0.81 * a.gamma)
    with pytest.raises(ValueError):
        AtomParams(eta_c=0.0)
    with pytest.raises(ValueError):
        AtomParams(rabi=-1.0)


def test_vacuum_rates():
    r = rates_from_params(SqueezedBath.vacuum())
    assert (r.g_plus, r.g_minus, r.g_m, r.g_n, r.g_nm) == (0.5, 0.5, 0.0, 1.0, 0.5)


def test_pure_half_photon_rates():
    r = rates_from_params(SqueezedBath(0.5, math.sqrt(0.75)))
    assert r.g_plus == pytest.approx(1.8660, abs=1e-4)
    assert r.g_minus == pytest.approx(0.1340, abs=1e-4)
    assert r.g_n == 2.0
    assert r.g_m == 0.0


def test_narrowed_width_at_2p4_db():
    target = 0.5 * 10 ** (-0.24)
    bath = SqueezedBath(0.3, 0.3 + 0.5 - target)
    assert rates_from_params(bath).g_y == pytest.approx(0.2876, abs=2e-4)
    assert squeezing_db(bath) == pytest.approx(2.4, abs=1e-12)


def test_rate_identities_on_random_baths():
    for bath in random_baths(200):
        r = rates_from_params(bath)
        assert r.g_plus + r.g_minus == pytest.approx(r.g_n, rel=1e-12)
        # determinant of the transverse block
        assert r.g_plus * r.g_minus - r.g_m**2 == pytest.approx(r.g_nm_sq, rel=1e-12)
        assert r.g_x * r.g_y == pytest.approx(r.g_nm_sq, rel=1e-12)
        assert r.g_x >= r.g_y > 0
        shifted = rates_from_params(bath.with_phase(bath.phi + math.pi))
        assert np.allclose([shifted.g_plus, shifted.g_minus, shifted.g_m], [r.g_plus, r.g_minus, r.g_m],
                           rtol=0, atol=1e-12)


def test_gain_examples():
    vac = bath_from_gain(GainPoint(0.0, 1.0))
    assert (vac.n_photons, vac.m_mag) == (0.0, 0.0)
    pure = bath_from_gain(GainPoint(6.6, 1.0))
    assert pure.n_photons == pytest.approx(3.572, abs=2e-3)
    assert pure.m_mag == pytest.approx(4.041, abs=2e-3)
    assert pure.n_photons == pytest.approx(10**0.66 - 1, rel=1e-12)
    diluted = bath_from_gain(GainPoint(6.6, 0.55))
    assert diluted.m_mag - diluted.n_photons == pytest.approx(0.258, abs=5e-4)


def test_gain_purity_and_dilution():
    for g in np.linspace(0.1, 20, 40):
        n, m = ideal_moments(g)
        assert m * m == pytest.approx(n * (n + 1), rel=1e-12)
        b = bath_from_gain(GainPoint(g, 0.55))
        assert b.m_mag**2 < b.n_photons * (b.n_photons + 1)


def test_squeezing_db_monotone_in_gain():
    levels = [squeezing_db(bath_from_gain(GainPoint(g))) for g in np.linspace(0, 15, 31)]
    assert np.all(np.diff(levels) > 0)
    assert levels[0] == 0.0


def test_quadrature_variances():
    vac = SqueezedBath.vacuum()
    assert all(quadrature_variance(t, vac) == pytest.approx(0.25) for t in np.linspace(0, math.pi, 7))
    for n in (0.1, 1.0, 5.0):
        pure = SqueezedBath(n, math.sqrt(n * (n + 1)))
        product = quadrature_variance(0.3, pure, 0.3) * quadrature_variance(0.3 + math.pi / 2, pure, 0.3)
        assert product == pytest.approx(1 / 16, rel=1e-12)
    b = SqueezedBath(0.381, 0.725)
    assert quadrature_variance(0.2 + math.pi / 2, b, 0.2) == pytest.approx(0.0779, abs=5e-4)


def test_squeezing_db_values():
    assert squeezing_db(SqueezedBath.vacuum()) == 0.0
    assert squeezing_db_from_difference(0.24) == pytest.approx(2.84, abs=5e-3)
    assert squeezing_db_from_difference(0.2552) == pytest.approx(3.10, abs=5e-3)


def test_validity_check():
    atom = AtomParams(gamma=2 * math.pi * 304e3)
    report = validity_check(atom, 2 * math.pi * 21e6, 2 * math.pi * 202e6)
    assert report.bandwidth_ratio == pytest.approx(0.173, abs=1e-3)
    assert report.passed and not report.rabi_warn
    assert validity_check(atom, 0.0, 2 * math.pi * 202e6).passed
    g = 2 * math.pi * 202e6
    strong = atom.with_rabi(0.7 * 0.6 * g / atom.gamma)
    report = validity_check(strong, 0.0, g)
    assert report.rabi_fail and not report.passed
