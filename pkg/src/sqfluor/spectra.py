"""Closed-form steady state, two-time correlators and spectra.

Frequencies and rates are in units of gamma. Correlators are reduced to
sums of three exponentials exp(lambda_j t) plus a constant, where lambda_j
are the roots of the characteristic cubic of the Bloch matrix. Spectra are
one-sided Fourier transforms of the fluctuating (non-constant) part; the
constant part is the elastic delta-peak and is reported separately.

Pauli conventions: sigma_+- = (sigma_x +- i sigma_y) / 2, so
<sigma_+ sigma_->_ss = (1 + s_z) / 2.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .model import AtomParams, RateSet, SqueezedBath, rates_from_params
from .trace import SpectrumTrace

EPS_DEGENERATE = 1e-3
_OPERATORS = {
    "x": np.array([1.0, 0.0, 0.0], dtype=complex),
    "y": np.array([0.0, 1.0, 0.0], dtype=complex),
    "z": np.array([0.0, 0.0, 1.0], dtype=complex),
    "+": np.array([0.5, 0.5j, 0.0]),
    "-": np.array([0.5, -0.5j, 0.0]),
}
FORWARD = "a(t)b(0)"
REVERSE = "a(0)b(t)"


class DegenerateRootsError(ArithmeticError):
    """The exponential expansion is ill-conditioned: two roots nearly coincide."""


class DegenerateRootsWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class BlochState:
    sx: float
    sy: float
    sz: float

    def __post_init__(self):
        if self.sx**2 + self.sy**2 + self.sz**2 > 1 + 1e-10:
            raise ValueError("Bloch vector lies outside the unit ball")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.sx, self.sy, self.sz])

    @property
    def sigma_minus(self) -> complex:
        return complex(self.sx, -self.sy) / 2

    @property
    def excited_population(self) -> float:
        return (1.0 + self.sz) / 2


@dataclass(frozen=True)
class ExpSeries:
    """f(t) = constant + sum_j amplitudes[j] * exp(roots[j] * t)."""

    roots: np.ndarray
    amplitudes: np.ndarray
    constant: complex

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        terms = self.amplitudes * np.exp(np.multiply.outer(t, self.roots))
        return terms.sum(axis=-1) + self.constant

    def one_sided_transform(self, omega):
        """(1/pi) Re int_0^inf (f(t) - constant) exp(i omega t) dt."""
        omega = np.asarray(omega, dtype=float)
        z = self.roots + 1j * omega[..., None]
        return np.real(-(self.amplitudes / z).sum(axis=-1)) / np.pi


@dataclass(frozen=True)
class SpectralDecomposition:
    """<sigma_+(t) sigma_-(0)>_ss = sum_j K_j exp(lambda_j t) + K."""

    roots: np.ndarray
    amplitudes: np.ndarray
    coherent_weight: complex
    steady: BlochState

    def correlator(self, t):
        return ExpSeries(self.roots, self.amplitudes, self.coherent_weight)(t)

    def spectrum(self, omega):
        omega = np.asarray(omega, dtype=float)
        lam_r, lam_i = self.roots.real, self.roots.imag
        k_r, k_i = self.amplitudes.real, self.amplitudes.imag
        shifted = omega[..., None] + lam_i
        terms = -(k_r * lam_r + k_i * shifted) / (lam_r**2 + shifted**2)
        return terms.sum(axis=-1) / np.pi


@dataclass(frozen=True)
class BackgroundModel:
    """Squeezer noise background entering the reflection spectrum."""

    shape: str = "flat"
    bandwidth: float | None = None
    curvature: float | None = None


def _rates(bath, atom, rates):
    return rates if rates is not None else rates_from_params(bath, atom)


def steady_state(bath: SqueezedBath, atom: AtomParams, rates: RateSet | None = None) -> BlochState:
    r = _rates(bath, atom, rates)
    om = atom.rabi
    den = r.g_n * r.g_nm_sq + om * om * r.g_plus
    if not den > 0:
        raise ZeroDivisionError("degenerate steady-state denominator")
    return BlochState(om * r.g_m / den, om * r.g_plus / den, -r.g_nm_sq / den)


def bloch_matrix(bath: SqueezedBath, atom: AtomParams, rates: RateSet | None = None) -> np.ndarray:
    r = _rates(bath, atom, rates)
    om = atom.rabi
    return np.array(
        [
            [-r.g_plus, r.g_m, 0.0],
            [r.g_m, -r.g_minus, -om],
            [0.0, om, -r.g_n],
        ]
    )


def cubic_coefficients(bath, atom, rates=None) -> tuple[float, float, float]:
    """(a2, a1, a0) of the monic characteristic cubic s^3 + a2 s^2 + a1 s + a0."""
    r = _rates(bath, atom, rates)
    om2 = atom.rabi**2
    a2 = r.g_plus + r.g_minus + r.g_n
    a1 = r.g_nm_sq + r.g_n * (r.g_plus + r.g_minus) + om2
    a0 = r.g_n * r.g_nm_sq + r.g_plus * om2
    return a2, a1, a0


def characteristic(s, bath, atom, rates=None):
    """D(s) evaluated directly from its factored definition."""
    r = _rates(bath, atom, rates)
    s = np.asarray(s)
    return (s + r.g_n) * ((s + r.g_minus) * (s + r.g_plus) - r.g_m**2) + (s + r.g_plus) * atom.rabi**2


def cubic_roots(bath: SqueezedBath, atom: AtomParams, rates: RateSet | None = None) -> np.ndarray:
    """Roots of D(s) ordered by ascending |Im|, then Re.

    Companion-matrix eigenvalues polished with two Newton steps.
    """
    a2, a1, a0 = cubic_coefficients(bath, atom, rates)
    companion = np.array([[-a2, -a1, -a0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    roots = np.linalg.eigvals(companion).astype(complex)
    for _ in range(2):
        d = ((roots + a2) * roots + a1) * roots + a0
        dd = (3 * roots + 2 * a2) * roots + a1
        safe = np.abs(dd) > 1e-300
        roots = np.where(safe, roots - d / np.where(safe, dd, 1.0), roots)
    return _symmetrize(roots)


def _symmetrize(roots: np.ndarray) -> np.ndarray:
    """Force exact conjugate symmetry of the roots of a real cubic."""
    scale = max(1.0, float(np.max(np.abs(roots))))
    order = np.argsort(np.abs(roots.imag))
    real_root = roots[order[0]]
    pair = roots[order[1:]]
    out = np.empty(3, dtype=complex)
    out[0] = real_root.real
    if abs(pair[0].imag) <= 1e-12 * scale and abs(pair[1].imag) <= 1e-12 * scale:
        out[1:] = pair.real
    else:
        mean = 0.5 * (pair[0] + np.conj(pair[1]))
        if mean.imag < 0:
            mean = np.conj(mean)
        out[1], out[2] = mean, np.conj(mean)
    key = np.lexsort((-out.imag, out.real, np.abs(out.imag)))
    return out[key]


def limiting_roots(bath: SqueezedBath, atom: AtomParams) -> np.ndarray:
    """Closed-form roots valid when gamma_M = 0 (2*phi in {0, pi})."""
    r = rates_from_params(bath, atom)
    disc = complex((r.g_minus - r.g_n) ** 2 - 4 * atom.rabi**2)
    root = np.sqrt(disc)
    mid = -(r.g_minus + r.g_n) / 2
    return np.array([-r.g_plus, mid + root / 2, mid - root / 2], dtype=complex)


def min_root_gap(roots: np.ndarray) -> float:
    return min(abs(roots[i] - roots[j]) for i in range(3) for j in range(i + 1, 3))


def residue_weights(roots: np.ndarray) -> np.ndarray:
    """C_j = 1 / prod_{k != j} (lambda_j - lambda_k)."""
    l0, l1, l2 = roots
    return np.array([1 / ((l0 - l1) * (l0 - l2)), 1 / ((l1 - l0) * (l1 - l2)), 1 / ((l2 - l0) * (l2 - l1))])


def _check_gap(roots):
    gap = min_root_gap(roots)
    if gap < EPS_DEGENERATE:
        raise DegenerateRootsError(
            f"roots {roots} are {gap:.3g} apart (< {EPS_DEGENERATE}); exponential expansion is ill-conditioned"
        )


def _kernel_blocks(roots, rates, rabi):
    """Per-root matrices W_j, vectors v_j and the constant part of v.

    W(t) = sum_j W_j exp(lambda_j t) and v(t) = v_const + sum_j v_j exp(lambda_j t),
    obtained by substituting f_n(t) -> C_j lambda_j^n in the entries of the
    inverse Laplace transform of (s - B)^-1 and (s - B)^-1 e_z / s.
    """
    r, om = rates, rabi
    weights = residue_weights(roots)
    w_blocks, v_blocks = [], []
    for lam, c in zip(roots, weights):
        f2, f1, f0, fm1 = c * lam**2, c * lam, c, c / lam
        w_blocks.append(
            np.array(
                [
                    [f2 + (r.g_minus + r.g_n) * f1 + (r.g_minus * r.g_n + om * om) * f0,
                     r.g_m * f1 + r.g_n * r.g_m * f0,
                     -r.g_m * om * f0],
                    [r.g_m * f1 + r.g_n * r.g_m * f0,
                     f2 + (r.g_n + r.g_plus) * f1 + r.g_n * r.g_plus * f0,
                     -om * f1 - om * r.g_plus * f0],
                    [r.g_m * om * f0,
                     om * f1 + om * r.g_plus * f0,
                     f2 + r.g_n * f1 + r.g_nm_sq * f0],
                ]
            )
        )
        v_blocks.append(np.array([-r.g_m * om * fm1, -om * f0 - om * r.g_plus * fm1, f1 + r.g_n * f0 + r.g_nm_sq * fm1]))
    fm1_const = -1 / np.prod(roots)
    v_const = np.array([-r.g_m * om, -om * r.g_plus, r.g_nm_sq], dtype=complex) * fm1_const
    return np.array(w_blocks), np.array(v_blocks), v_const


def pauli_products(state: BlochState) -> np.ndarray:
    """P[a, b] = <sigma_a sigma_b>_ss from sigma_a sigma_b = delta_ab + i eps_abc sigma_c."""
    s = state.vector
    p = np.eye(3, dtype=complex)
    p[0, 1], p[1, 0] = 1j * s[2], -1j * s[2]
    p[1, 2], p[2, 1] = 1j * s[0], -1j * s[0]
    p[2, 0], p[0, 2] = 1j * s[1], -1j * s[1]
    return p


def _as_operator(op) -> np.ndarray:
    if isinstance(op, str):
        try:
            return _OPERATORS[op]
        except KeyError:
            raise ValueError(f"unknown operator {op!r}; use x, y, z, + or -") from None
    vec = np.asarray(op, dtype=complex)
    if vec.shape != (3,):
        raise ValueError("operator must be an axis name or a 3-vector of Pauli weights")
    return vec


@dataclass(frozen=True)
class CorrelationTensor:
    """<sigma_a(t) sigma_b(0)> (forward) or <sigma_a(0) sigma_b(t)> (reverse)
    as const[a, b] + sum_j amps[a, b, j] exp(roots[j] t)."""

    roots: np.ndarray
    amps: np.ndarray
    const: np.ndarray
    ordering: str

    def series(self, a, b) -> ExpSeries:
        va, vb = _as_operator(a), _as_operator(b)
        amps = np.einsum("a,b,abj->j", va, vb, self.amps)
        const = complex(va @ self.const @ vb)
        return ExpSeries(self.roots, amps, const)


def correlation_tensor(bath, atom, ordering: str = FORWARD, rates=None, roots=None) -> CorrelationTensor:
    r = _rates(bath, atom, rates)
    roots = cubic_roots(bath, atom, r) if roots is None else roots
    _check_gap(roots)
    state = steady_state(bath, atom, r)
    s = state.vector
    prod = pauli_products(state)
    w_blocks, v_blocks, v_const = _kernel_blocks(roots, r, atom.rabi)
    amps = np.empty((3, 3, 3), dtype=complex)
    const = np.empty((3, 3), dtype=complex)
    if ordering == FORWARD:
        # column b: regression vector (<s_x(t) s_b>, <s_y(t) s_b>, <s_z(t) s_b>)
        for b in range(3):
            for j in range(3):
                amps[:, b, j] = w_blocks[j] @ prod[:, b] - s[b] * v_blocks[j]
            const[:, b] = -s[b] * v_const
    elif ordering == REVERSE:
        # row a: regression vector (<s_a s_x(t)>, <s_a s_y(t)>, <s_a s_z(t)>)
        for a in range(3):
            for j in range(3):
                amps[a, :, j] = w_blocks[j] @ prod[a, :] - s[a] * v_blocks[j]
            const[a, :] = -s[a] * v_const
    else:
        raise ValueError(f"ordering must be {FORWARD!r} or {REVERSE!r}")
    return CorrelationTensor(roots, amps, const, ordering)


def correlator(a, b, bath: SqueezedBath, atom: AtomParams, ordering: str = FORWARD) -> ExpSeries:
    """Closed-form two-time correlator of Pauli-type operators a and b.

    ``a`` and ``b`` are axis names ('x', 'y', 'z', '+', '-') or 3-vectors of
    Pauli weights. Raises DegenerateRootsError near coincident roots.
    """
    return correlation_tensor(bath, atom, ordering).series(a, b)


def decomposition(bath: SqueezedBath, atom: AtomParams, rates: RateSet | None = None) -> SpectralDecomposition:
    """Roots, amplitudes K_j and elastic weight K of <sigma_+(t) sigma_-(0)>_ss."""
    r = _rates(bath, atom, rates)
    roots = cubic_roots(bath, atom, r)
    _check_gap(roots)
    state = steady_state(bath, atom, r)
    om = atom.rabi
    # the closed form is written for sigma_+- = sigma_x +- i sigma_y; the 1/4 restores sigma_+- = (sigma_x +- i sigma_y)/2
    s_minus = complex(state.sx, -state.sy)
    c = residue_weights(roots)
    k_j = c * (
        (2 * roots**2 + r.g_n * (3 * roots + r.g_n) + om**2) * (1 + state.sz)
        + om * (r.g_m + 1j * (r.g_plus + roots)) * (1 + 1 / roots) * s_minus
    )
    k = -om * (r.g_m + 1j * r.g_plus) / np.prod(roots) * s_minus
    return SpectralDecomposition(roots, k_j / 4, k / 4, state)


def laplace_at(series: ExpSeries, omega) -> np.ndarray:
    """int_0^inf (f(t) - constant) exp(i omega t) dt for an exponential series."""
    omega = np.asarray(omega, dtype=float)
    return -(series.amplitudes / (series.roots + 1j * omega[..., None])).sum(axis=-1)


def resolvent_laplace_at(bath, atom, a, b, ordering, omega, rates=None) -> np.ndarray:
    """Same transform as ``laplace_at`` evaluated through (s - B)^-1 at s = -i omega.

    Exact at any root separation; used when the exponential expansion is
    ill-conditioned.
    """
    r = _rates(bath, atom, rates)
    bm = bloch_matrix(bath, atom, r)
    state = steady_state(bath, atom, r)
    s = state.vector
    prod = pauli_products(state)
    va, vb = _as_operator(a), _as_operator(b)
    omega = np.asarray(omega, dtype=float)
    lhs = -1j * omega[:, None, None] * np.eye(3) - bm
    if ordering == FORWARD:
        rhs, probe = prod @ vb - (s @ vb) * s, va
    elif ordering == REVERSE:
        rhs, probe = va @ prod - (s @ va) * s, vb
    else:
        raise ValueError(f"ordering must be {FORWARD!r} or {REVERSE!r}")
    sol = np.linalg.solve(lhs, np.broadcast_to(rhs, omega.shape + (3,))[..., None])[..., 0]
    return sol @ probe


def _warn_degenerate(roots):
    warnings.warn(
        f"near-degenerate roots {np.round(roots, 8)}: spectrum evaluated from the resolvent",
        DegenerateRootsWarning,
        stacklevel=3,
    )


def fluorescence_density(bath: SqueezedBath, atom: AtomParams, omega) -> tuple[np.ndarray, complex, bool]:
    """Incoherent S(omega), elastic weight K and a degeneracy flag."""
    r = rates_from_params(bath, atom)
    try:
        dec = decomposition(bath, atom, r)
    except DegenerateRootsError:
        _warn_degenerate(cubic_roots(bath, atom, r))
        state = steady_state(bath, atom, r)
        values = resolvent_laplace_at(bath, atom, "+", "-", FORWARD, omega, r).real / np.pi
        return values, abs(state.sigma_minus) ** 2 + 0j, True
    return dec.spectrum(omega), dec.coherent_weight, False


def default_grid(bath: SqueezedBath, atom: AtomParams, points: int = 2001) -> np.ndarray:
    span = 8.0 * max(atom.rabi, rates_from_params(bath, atom).g_x)
    return np.linspace(-span, span, points)


def _trace(grid, values, atom, bath, degenerate, kind, extra=None):
    meta = {
        "units": "gamma",
        "gamma_hz": atom.gamma_hz,
        "eta_c": atom.eta_c,
        "rabi_hz": atom.rabi * atom.gamma_hz,
        "phi_rad": bath.phi_raw,
        "n_photons": bath.n_photons,
        "m_mag": bath.m_mag,
        "kind": kind,
    }
    if degenerate:
        meta["flags"] = "degenerate"
    if extra:
        meta.update(extra)
    return SpectrumTrace(np.asarray(grid, dtype=float), values, meta)


def fluorescence_spectrum(bath: SqueezedBath, atom: AtomParams, grid=None) -> tuple[SpectrumTrace, complex]:
    grid = default_grid(bath, atom) if grid is None else np.asarray(grid, dtype=float)
    values, k, degenerate = fluorescence_density(bath, atom, grid)
    return _trace(grid, values, atom, bath, degenerate, "fluorescence"), k


def squeezer_background(grid, n_photons: float, bandwidth: float | None = None, shape: str = "flat",
                        curvature: float | None = None) -> np.ndarray:
    """Photon-number spectrum N(omega) of the squeezer output near resonance.

    ``lorentzian`` is a single-pole filter with full width ``bandwidth``
    (N(bandwidth/2) = N/2). ``parabolic`` is N (1 - c w^2) clipped at zero,
    with c defaulting to the filter's second-order expansion 4 / bandwidth^2.
    """
    w = np.asarray(grid, dtype=float)
    if shape == "flat":
        return np.full(w.shape, float(n_photons))
    if shape in ("lorentzian", "parabolic") and curvature is None:
        if bandwidth is None or not bandwidth > 0:
            raise ValueError(f"{shape} background needs a positive bandwidth")
    if shape == "lorentzian":
        half = bandwidth / 2
        return n_photons * half**2 / (half**2 + w**2)
    if shape == "parabolic":
        c = 4.0 / bandwidth**2 if curvature is None else curvature
        return np.clip(n_photons * (1.0 - c * w**2), 0.0, None)
    raise ValueError(f"unknown background shape {shape!r}")


def effective_bath(itinerant: SqueezedBath, eta_c: float) -> SqueezedBath:
    """Moments seen by the emitter, N = eta_c * N_itinerant (same for M)."""
    return itinerant.scaled(eta_c)


def reflection_density(bath: SqueezedBath, atom: AtomParams, omega,
                       background: BackgroundModel | None = None) -> tuple[np.ndarray, bool]:
    """Reflection spectrum S_R(omega) from the strongly coupled port.

    ``bath`` carries the effective moments (already diluted by eta_c).
    """
    omega = np.asarray(omega, dtype=float)
    background = background or BackgroundModel()
    n, eta = bath.n_photons, atom.eta_c
    m = bath.m_complex
    r = rates_from_params(bath, atom)
    fluor, _, degenerate = fluorescence_density(bath, atom, omega)
    if not degenerate:
        roots = cubic_roots(bath, atom, r)
        fwd = correlation_tensor(bath, atom, FORWARD, r, roots)
        rev = correlation_tensor(bath, atom, REVERSE, r, roots)
        cross = (
            m * laplace_at(rev.series("+", "+"), omega)
            - m * laplace_at(fwd.series("+", "+"), omega)
            - n * laplace_at(rev.series("-", "+"), omega)
        )
    else:
        cross = (
            m * resolvent_laplace_at(bath, atom, "+", "+", REVERSE, omega, r)
            - m * resolvent_laplace_at(bath, atom, "+", "+", FORWARD, omega, r)
            - n * resolvent_laplace_at(bath, atom, "-", "+", REVERSE, omega, r)
        )
    bg = squeezer_background(omega, n, background.bandwidth, background.shape, background.curvature)
    values = bg / (2 * np.pi * eta) + (n + eta) * fluor + cross.real / np.pi
    return values, degenerate


def reflection_spectrum(bath: SqueezedBath, atom: AtomParams, grid=None,
                        background: BackgroundModel | None = None) -> SpectrumTrace:
    grid = default_grid(bath, atom) if grid is None else np.asarray(grid, dtype=float)
    values, degenerate = reflection_density(bath, atom, grid, background)
    return _trace(grid, values, atom, bath, degenerate, "reflection")


def weak_drive_lobes(bath: SqueezedBath, atom: AtomParams) -> tuple[tuple[float, float], tuple[float, float]]:
    """(area, half width) of the narrow positive and broad negative Lorentzians.

    The undriven lineshape is area_y L(gamma_y) - area_x L(gamma_x) with unit-area
    Lorentzians L; the two areas coincide when eta_c = 1.
    """
    n, m, eta = bath.n_photons, bath.m_mag, atom.eta_c
    r = rates_from_params(bath, atom)
    norm = 2 * (2 * n + 1)
    return ((m - (1 - eta) * n) / norm, r.g_y), ((m + (1 - eta) * n) / norm, r.g_x)


def weak_drive_lineshape(bath: SqueezedBath, atom: AtomParams, omega) -> np.ndarray:
    """Atomic part of the undriven reflection spectrum (background excluded)."""
    omega = np.asarray(omega, dtype=float)
    (a_y, g_y), (a_x, g_x) = weak_drive_lobes(bath, atom)
    narrow = a_y * g_y / (omega**2 + g_y**2)
    broad = a_x * g_x / (omega**2 + g_x**2)
    return (narrow - broad) / np.pi


def weak_drive_reflection(bath: SqueezedBath, atom: AtomParams, grid=None) -> SpectrumTrace:
    """Undriven reflection spectrum: flat background, narrow peak of half width
    gamma_y and broad dip of half width gamma_x. The drive amplitude in ``atom`` is ignored."""
    atom0 = atom.with_rabi(0.0)
    grid = default_grid(bath, atom0) if grid is None else np.asarray(grid, dtype=float)
    values = bath.n_photons / (2 * np.pi * atom.eta_c) + weak_drive_lineshape(bath, atom0, grid)
    return _trace(grid, values, atom0, bath, False, "no-drive")


def strong_drive_widths(bath: SqueezedBath, atom: AtomParams | None = None) -> tuple[float, float]:
    """Full widths (centre, sideband) = (2 gamma_+, gamma_N + gamma_-) in units of gamma."""
    r = rates_from_params(bath, atom)
    return 2 * r.g_plus, r.g_n + r.g_minus


def strong_drive_reflection(bath: SqueezedBath, atom: AtomParams, grid=None,
                            background: BackgroundModel | None = None) -> SpectrumTrace:
    """Three-Lorentzian limit of the reflection spectrum for Omega >> gamma.

    Centre peak of half width gamma_+ carrying eta_c/4 of the emitted
    power, sidebands at +-Omega of half width (gamma_N + gamma_-)/2 carrying
    eta_c/8 each; normalised to match ``reflection_spectrum`` in that limit.
    """
    grid = default_grid(bath, atom) if grid is None else np.asarray(grid, dtype=float)
    background = background or BackgroundModel()
    r = rates_from_params(bath, atom)
    eta, om = atom.eta_c, atom.rabi
    side_hw = (r.g_n + r.g_minus) / 2
    centre = eta / (4 * np.pi) * r.g_plus / (grid**2 + r.g_plus**2)
    sides = sum(
        eta / (8 * np.pi) * side_hw / ((grid - sign * om) ** 2 + side_hw**2) for sign in (1.0, -1.0)
    )
    bg = squeezer_background(grid, bath.n_photons, background.bandwidth, background.shape, background.curvature)
    values = bg / (2 * np.pi * eta) + centre + sides
    return _trace(grid, values, atom, bath, False, "strong-drive")
