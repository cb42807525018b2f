"""Reservoir and emitter parameters, derived decay rates and gain calibration.

All rates are expressed in units of the total radiative linewidth gamma, so the
analytic core is dimensionless. ``AtomParams.gamma`` carries the physical
angular linewidth (rad/s) and is only used when converting to and from Hz.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

PHYSICALITY_SLACK = 1e-12


class UnphysicalBathError(ValueError):
    """Raised when |M| exceeds sqrt(N(N+1))."""


@dataclass(frozen=True)
class SqueezedBath:
    """Second-order moments of a broadband squeezed reservoir.

    ``phi`` is the relative phase between the Rabi drive and the squeezing
    ellipse. Only 2*phi enters the physics, so it is stored reduced to
    [0, pi); the value passed in is kept in ``phi_raw``.
    """

    n_photons: float
    m_mag: float
    phi: float = 0.0
    phi_raw: float = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        n, m = float(self.n_photons), float(self.m_mag)
        if not (math.isfinite(n) and math.isfinite(m)):
            raise ValueError("bath moments must be finite")
        if n < 0:
            raise ValueError(f"n_photons must be >= 0, got {n}")
        if m < 0:
            raise ValueError(f"m_mag must be >= 0, got {m}")
        if m > math.sqrt(n * (n + 1.0)) + PHYSICALITY_SLACK:
            raise UnphysicalBathError(
                f"|M|={m!r} exceeds sqrt(N(N+1))={math.sqrt(n * (n + 1.0))!r}"
            )
        raw = float(self.phi) if self.phi_raw is None else float(self.phi_raw)
        object.__setattr__(self, "n_photons", n)
        object.__setattr__(self, "m_mag", m)
        object.__setattr__(self, "phi_raw", raw)
        object.__setattr__(self, "phi", _reduce_phase(float(self.phi)))

    @classmethod
    def vacuum(cls) -> "SqueezedBath":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_purity(cls, n_photons: float, purity: float, phi: float = 0.0) -> "SqueezedBath":
        """Build a bath with |M| = purity * sqrt(N(N+1)), purity in [0, 1]."""
        if not 0.0 <= purity <= 1.0:
            raise ValueError(f"purity must lie in [0, 1], got {purity}")
        return cls(n_photons, purity * math.sqrt(n_photons * (n_photons + 1.0)), phi)

    @property
    def m_complex(self) -> complex:
        return self.m_mag * complex(math.cos(2 * self.phi), math.sin(2 * self.phi))

    @property
    def purity(self) -> float:
        bound = math.sqrt(self.n_photons * (self.n_photons + 1.0))
        return 0.0 if bound == 0.0 else min(self.m_mag / bound, 1.0)

    def with_phase(self, phi: float) -> "SqueezedBath":
        return SqueezedBath(self.n_photons, self.m_mag, phi)

    def scaled(self, factor: float) -> "SqueezedBath":
        """Dilute both moments by ``factor`` (beam-splitter loss model)."""
        return SqueezedBath(factor * self.n_photons, factor * self.m_mag, self.phi_raw)


def _reduce_phase(phi: float) -> float:
    red = math.fmod(phi, math.pi)
    if red < 0:
        red += math.pi
    # fmod can round up to pi itself
    return 0.0 if red >= math.pi else red


@dataclass(frozen=True)
class AtomParams:
    """Effective two-level emitter.

    gamma is the total radiative linewidth in rad/s, eta_c the strong-port
    efficiency gamma_ext / gamma and rabi the resonant Rabi amplitude in units
    of gamma.
    """

    gamma: float = 2 * math.pi * 304e3
    eta_c: float = 1.0
    rabi: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not 0.0 < self.eta_c <= 1.0:
            raise ValueError(f"eta_c must lie in (0, 1], got {self.eta_c}")
        if not self.rabi >= 0:
            raise ValueError(f"rabi must be >= 0, got {self.rabi}")

    @property
    def gamma_ext(self) -> float:
        return self.eta_c * self.gamma

    @property
    def gamma_int(self) -> float:
        return (1.0 - self.eta_c) * self.gamma

    @property
    def gamma_hz(self) -> float:
        return self.gamma / (2 * math.pi)

    def with_rabi(self, rabi: float) -> "AtomParams":
        return AtomParams(self.gamma, self.eta_c, rabi)


@dataclass(frozen=True)
class RateSet:
    """Bloch-equation decay rates in units of gamma."""

    g_plus: float
    g_minus: float
    g_m: float
    g_n: float
    g_nm: float
    g_x: float
    g_y: float

    @property
    def g_nm_sq(self) -> float:
        return self.g_nm * self.g_nm


@dataclass(frozen=True)
class GainPoint:
    """Phase-preserving JPA power gain and the overall efficiency eta."""

    gain_db: float
    efficiency: float = 1.0

    def __post_init__(self):
        if not self.gain_db >= 0:
            raise ValueError(f"gain_db must be >= 0, got {self.gain_db}")
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError(f"efficiency must lie in (0, 1], got {self.efficiency}")

    @property
    def linear_gain(self) -> float:
        return 10.0 ** (self.gain_db / 10.0)

    def loss_efficiency(self, eta_c: float) -> float:
        """Component-loss factor eta_loss = eta / eta_c."""
        return self.efficiency / eta_c


def rates_from_params(bath: SqueezedBath, atom: AtomParams | None = None) -> RateSet:
    n, m = bath.n_photons, bath.m_mag
    c2, s2 = math.cos(2 * bath.phi), math.sin(2 * bath.phi)
    nm_sq = (n + 0.5) ** 2 - m * m
    if nm_sq <= 0:
        raise UnphysicalBathError(f"(N+1/2)^2 - M^2 = {nm_sq} must be positive")
    return RateSet(
        g_plus=n + m * c2 + 0.5,
        g_minus=n - m * c2 + 0.5,
        g_m=m * s2,
        g_n=2 * n + 1.0,
        g_nm=math.sqrt(nm_sq),
        g_x=n + m + 0.5,
        g_y=n - m + 0.5,
    )


def ideal_moments(gain_db: float) -> tuple[float, float]:
    """(N, M) of a pure squeezed state produced at the given JPA gain."""
    g = 10.0 ** (gain_db / 10.0)
    root_g, root_g1 = math.sqrt(g), math.sqrt(max(g - 1.0, 0.0))
    amplified = 0.5 * (root_g + root_g1) ** 2  # N + M + 1/2
    # (sqrt(G) - sqrt(G-1))^2 == 1 / (sqrt(G) + sqrt(G-1))^2, without cancellation
    squeezed = 0.5 / (root_g + root_g1) ** 2  # N - M + 1/2
    n = 0.5 * (amplified + squeezed) - 0.5
    m = 0.5 * (amplified - squeezed)
    return max(n, 0.0), max(m, 0.0)


def bath_from_gain(g: GainPoint, phi: float = 0.0) -> SqueezedBath:
    n_i, m_i = ideal_moments(g.gain_db)
    if g.efficiency == 1.0:
        # clamp round-off so that M^2 <= N(N+1) holds exactly
        m_i = min(m_i, math.sqrt(n_i * (n_i + 1.0)))
    return SqueezedBath(g.efficiency * n_i, g.efficiency * m_i, phi)


def quadrature_variance(theta: float, bath: SqueezedBath, squeeze_axis_phi: float = 0.0) -> float:
    """Variance of the quadrature at angle ``theta``; amplified axis at ``squeeze_axis_phi``."""
    return 0.5 * (bath.n_photons + bath.m_mag * math.cos(2 * (theta - squeeze_axis_phi)) + 0.5)


def squeezing_db(bath: SqueezedBath) -> float:
    """Minimum-quadrature noise reduction below vacuum, in dB (positive = squeezed)."""
    return -10.0 * math.log10((bath.n_photons - bath.m_mag + 0.5) / 0.5)


def squeezing_db_from_difference(m_minus_n: float) -> float:
    return -10.0 * math.log10((0.5 - m_minus_n) / 0.5)


@dataclass(frozen=True)
class ValidityReport:
    bandwidth_ratio: float
    rabi_ratio: float
    bandwidth_ok: bool
    rabi_warn: bool
    rabi_fail: bool

    @property
    def passed(self) -> bool:
        return self.bandwidth_ok and not self.rabi_fail


def validity_check(
    atom: AtomParams,
    source_bandwidth: float,
    coupling_g: float,
    warn_ratio: float = 0.1,
    fail_ratio: float = 0.6,
) -> ValidityReport:
    """Two-level approximation checks against the next transition at ~0.6 g.

    ``source_bandwidth`` (kappa_JPA) and ``coupling_g`` are angular frequencies
    in the same units as ``atom.gamma``. The bandwidth condition is a hard
    inequality kappa < 0.6 g; the drive condition Omega << 0.6 g warns above
    ``warn_ratio`` and fails above ``fail_ratio``.
    """
    if coupling_g <= 0:
        raise ValueError("coupling_g must be positive")
    ref = 0.6 * coupling_g
    bw_ratio = source_bandwidth / ref
    rabi_ratio = atom.rabi * atom.gamma / ref
    return ValidityReport(
        bandwidth_ratio=bw_ratio,
        rabi_ratio=rabi_ratio,
        bandwidth_ok=bw_ratio < 1.0,
        rabi_warn=rabi_ratio > warn_ratio,
        rabi_fail=rabi_ratio > fail_ratio,
    )
