"""Brute-force reference: density-matrix master equation, regression and quadrature.

Nothing here uses the Bloch matrix, the cubic or the closed-form amplitudes.
The state is a 2x2 density matrix in the basis (|e>, |g>); the Liouvillian is
assembled column by column from ``lindblad_rhs`` and integrated with
fixed-step classical RK4. Because the equation is linear and autonomous, one
RK4 step is the fixed matrix R(hL) = sum_{k<=4} (hL)^k / k!, and long
stretches of steps are taken as powers of that matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import czt

from .model import AtomParams, SqueezedBath
from .trace import SpectrumTrace

SIGMA_PLUS = np.array([[0, 1], [0, 0]], dtype=complex)
SIGMA_MINUS = SIGMA_PLUS.T.copy()
PAULI = {
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
    "+": SIGMA_PLUS,
    "-": SIGMA_MINUS,
}
GROUND = np.array([[0, 0], [0, 1]], dtype=complex)


class OracleError(RuntimeError):
    """Integration invariants violated or the correlator has not decayed."""


@dataclass(frozen=True)
class OracleConfig:
    """step: RK4 step (1/gamma); horizon: correlation window (1/gamma), None = automatic;
    sample_every: RK4 steps between stored correlator samples."""

    step: float | None = None
    horizon: float | None = None
    quadrature: str = "trapezoid-with-tail"
    sample_every: int | None = None
    decay_tolerance: float = 1e-6

    def __post_init__(self):
        if self.quadrature not in ("trapezoid-with-tail", "fft"):
            raise ValueError("quadrature must be 'trapezoid-with-tail' or 'fft'")
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be positive")
        if self.horizon is not None and not self.horizon > 0:
            raise ValueError("horizon must be positive")


def dissipator(a: np.ndarray, rho: np.ndarray) -> np.ndarray:
    ad = a.conj().T
    return a @ rho @ ad - 0.5 * (ad @ a @ rho + rho @ ad @ a)


def squeeze_term(a: np.ndarray, rho: np.ndarray) -> np.ndarray:
    return a @ rho @ a - 0.5 * (a @ a @ rho + rho @ a @ a)


def lindblad_rhs(rho: np.ndarray, bath: SqueezedBath, atom: AtomParams, rate_sign: float = 1.0) -> np.ndarray:
    """d(rho)/dt for the emitter in a broadband squeezed bath (time in 1/gamma).

    The drive enters as H = (Omega/2) sigma_x, the sign under which the Bloch
    vector follows the optical Bloch equations used by the analytic module.
    ``rate_sign`` exists only for harness self-tests.
    """
    n = bath.n_photons
    m = bath.m_complex
    om = atom.rabi
    sx = PAULI["x"]
    drive = -0.5j * om * (sx @ rho - rho @ sx)
    return (
        drive
        + rate_sign * (n + 1) * dissipator(SIGMA_MINUS, rho)
        + n * dissipator(SIGMA_PLUS, rho)
        - m * squeeze_term(SIGMA_PLUS, rho)
        - np.conj(m) * squeeze_term(SIGMA_MINUS, rho)
    )


def liouvillian(bath: SqueezedBath, atom: AtomParams, rate_sign: float = 1.0) -> np.ndarray:
    """4x4 matrix acting on row-major vec(rho), built from ``lindblad_rhs``."""
    cols = []
    for k in range(4):
        basis = np.zeros(4, dtype=complex)
        basis[k] = 1
        cols.append(lindblad_rhs(basis.reshape(2, 2), bath, atom, rate_sign).reshape(4))
    return np.array(cols).T


def rk4_step_matrix(lv: np.ndarray, h: float) -> np.ndarray:
    a = h * lv
    out = np.eye(4, dtype=complex)
    term = np.eye(4, dtype=complex)
    for k in range(1, 5):
        term = term @ a / k
        out = out + term
    return out


def _rates(lv: np.ndarray) -> tuple[float, float]:
    """Slowest nonzero and fastest decay rates of the Liouvillian spectrum."""
    ev = np.linalg.eigvals(lv)
    re = np.sort(-ev.real)
    if re[0] < -1e-9 or re[1] <= 0:
        raise OracleError("Liouvillian has a growing or undamped mode")
    return re[1], float(np.max(np.abs(ev)))


def default_step(bath: SqueezedBath, atom: AtomParams) -> float:
    fastest = max(2 * bath.n_photons + 1, bath.n_photons + bath.m_mag + 0.5, atom.rabi)
    return min(0.01 / fastest, 0.005)


def check_state(rho: np.ndarray, tol: float = 1e-8) -> None:
    if not np.all(np.isfinite(rho)):
        raise OracleError("density matrix diverged")
    if np.max(np.abs(rho - rho.conj().T)) > tol:
        raise OracleError("density matrix lost Hermiticity")
    if abs(np.trace(rho) - 1) > tol:
        raise OracleError(f"trace drifted to {np.trace(rho)}")
    if np.min(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))) < -max(tol, 1e-10):
        raise OracleError("density matrix lost positivity")


def evolve(rho0: np.ndarray, bath: SqueezedBath, atom: AtomParams, t: float,
           config: OracleConfig | None = None, rate_sign: float = 1.0) -> np.ndarray:
    """rho(t) by fixed-step RK4 from rho0."""
    config = config or OracleConfig()
    h = config.step or default_step(bath, atom)
    steps = int(math.ceil(t / h - 1e-9))
    h = t / steps if steps else h
    prop = rk4_step_matrix(liouvillian(bath, atom, rate_sign), h)
    vec = np.linalg.matrix_power(prop, steps) @ np.asarray(rho0, dtype=complex).reshape(4)
    rho = vec.reshape(2, 2)
    check_state(rho)
    return rho


def steady_density(bath: SqueezedBath, atom: AtomParams, config: OracleConfig | None = None,
                   rate_sign: float = 1.0) -> np.ndarray:
    """Long-time limit of evolve() from the ground state."""
    config = config or OracleConfig()
    lv = liouvillian(bath, atom, rate_sign)
    slow, _ = _rates(lv)
    t_end = 60.0 / max(slow, 1e-12)
    return evolve(GROUND, bath, atom, t_end, config, rate_sign)


def bloch_vector(rho: np.ndarray) -> np.ndarray:
    return np.array([np.trace(PAULI[k] @ rho).real for k in "xyz"])


def _operator(op) -> np.ndarray:
    return PAULI[op] if isinstance(op, str) else np.asarray(op, dtype=complex)


@dataclass(frozen=True)
class SampledCorrelator:
    times: np.ndarray
    values: np.ndarray
    mean_product: complex

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0])


def regression_correlator(a, b, ordering: str, bath: SqueezedBath, atom: AtomParams,
                          config: OracleConfig | None = None, fluctuation: bool = False,
                          rate_sign: float = 1.0, rho_ss: np.ndarray | None = None) -> SampledCorrelator:
    """Sample <a(t) b(0)> ("a(t)b(0)") or <a(0) b(t)> ("a(0)b(t)") on a uniform grid.

    Forward ordering evolves b rho_ss and traces with a; reverse ordering
    evolves rho_ss a and traces with b. With ``fluctuation=True`` the product
    of steady-state means is removed before evolution, so the samples decay to zero.
    """
    config = config or OracleConfig()
    lv = liouvillian(bath, atom, rate_sign)
    rho = steady_density(bath, atom, config, rate_sign) if rho_ss is None else rho_ss
    op_a, op_b = _operator(a), _operator(b)
    mean_a, mean_b = np.trace(op_a @ rho), np.trace(op_b @ rho)
    if ordering == "a(t)b(0)":
        start, probe = op_b @ rho, op_a
        if fluctuation:
            start = start - mean_b * rho
    elif ordering == "a(0)b(t)":
        start, probe = rho @ op_a, op_b
        if fluctuation:
            start = start - mean_a * rho
    else:
        raise ValueError("ordering must be 'a(t)b(0)' or 'a(0)b(t)'")
    h = config.step or default_step(bath, atom)
    slow, _ = _rates(lv)
    horizon = config.horizon or 30.0 / slow
    every = config.sample_every or 1
    samples = int(math.ceil(horizon / (h * every)))
    step_prop = np.linalg.matrix_power(rk4_step_matrix(lv, h), every)
    values = _propagate(step_prop, start.reshape(4), probe.T.reshape(4), samples)
    times = np.arange(samples + 1) * h * every
    return SampledCorrelator(times, values, complex(mean_a * mean_b))


def _propagate(prop: np.ndarray, vec: np.ndarray, probe: np.ndarray, samples: int, block: int = 512) -> np.ndarray:
    """probe . prop^k vec for k = 0..samples, in blocks of precomputed powers."""
    powers = np.empty((block, 4, 4), dtype=complex)
    powers[0] = np.eye(4)
    for k in range(1, block):
        powers[k] = prop @ powers[k - 1]
    jump = prop @ powers[-1]
    row = probe @ powers  # (block, 4): probe . prop^k
    out = np.empty(samples + 1, dtype=complex)
    pos = 0
    while pos <= samples:
        take = min(block, samples + 1 - pos)
        out[pos:pos + take] = row[:take] @ vec
        vec = jump @ vec
        pos += take
    return out


def one_sided_transform(corr: SampledCorrelator, omega, quadrature: str = "trapezoid-with-tail",
                        decay_tolerance: float = 1e-6) -> np.ndarray:
    """int_0^inf f(t) e^{i w t} dt: trapezoid rule plus a fitted exponential tail."""
    f = corr.values
    dt = corr.step
    omega = np.asarray(omega, dtype=float)
    scale = max(np.max(np.abs(f)), 1e-300)
    if abs(f[-1]) > decay_tolerance * max(abs(f[0]), scale):
        raise OracleError(f"correlator has only decayed to {abs(f[-1]) / scale:.2e} at the horizon")
    weights = f.copy()
    weights[0] *= 0.5
    weights[-1] *= 0.5
    if quadrature == "fft" and _is_uniform(omega):
        total = _chirp_sum(weights, omega, dt)
    else:
        total = _block_sum(weights, omega, corr.times)
    total = total * dt + _tail(corr, omega)
    return total


def _is_uniform(omega) -> bool:
    if omega.size < 2:
        return False
    d = np.diff(omega)
    return np.allclose(d, d[0], rtol=1e-12, atol=0)


def _chirp_sum(weights, omega, dt):
    # sum_k w_k exp(i omega_m t_k) for uniform omega via the chirp z-transform
    m = omega.size
    dw = omega[1] - omega[0]
    a = np.exp(-1j * omega[0] * dt)
    w = np.exp(1j * dw * dt)
    return czt(weights, m=m, w=w, a=a)


def _block_sum(weights, omega, times, block: int = 2048):
    total = np.zeros(omega.size, dtype=complex)
    phase_step = np.exp(1j * omega * times[1] * block) if times.size > 1 else None
    base = np.exp(1j * np.multiply.outer(times[:block], omega))
    for start in range(0, weights.size, block):
        chunk = weights[start:start + block]
        total += chunk @ base[: chunk.size]
        base = base * phase_step
    return total


def _tail(corr: SampledCorrelator, omega):
    """Fit f ~ A exp(mu t) over the last tenth of the window and integrate past it."""
    f, t = corr.values, corr.times
    n = max(8, f.size // 10)
    seg_f, seg_t = f[-n:], t[-n:]
    if np.any(seg_f == 0):
        return np.zeros(omega.shape, dtype=complex)
    logs = np.log(np.abs(seg_f))
    phase = np.unwrap(np.angle(seg_f))
    rate = np.polyfit(seg_t, logs, 1)[0]
    freq = np.polyfit(seg_t, phase, 1)[0]
    mu = rate + 1j * freq
    if not rate < 0:
        return np.zeros(omega.shape, dtype=complex)
    return -f[-1] * np.exp(1j * omega * t[-1]) / (mu + 1j * omega)


def default_config(bath: SqueezedBath, atom: AtomParams, omega_max: float) -> OracleConfig:
    """Integration step per the usual rule; samples spaced ~0.25 / omega_max apart."""
    h = default_step(bath, atom)
    every = max(1, int(0.25 / (max(omega_max, 1.0) * h)))
    return OracleConfig(step=h, sample_every=every, quadrature="fft")


def spectrum_numeric(bath: SqueezedBath, atom: AtomParams, grid, config: OracleConfig | None = None,
                     rate_sign: float = 1.0) -> SpectrumTrace:
    """Incoherent fluorescence spectrum (1/pi) Re int_0^inf <d sigma_+(t) d sigma_-(0)> e^{i w t} dt."""
    grid = np.asarray(grid, dtype=float)
    config = config or default_config(bath, atom, float(np.max(np.abs(grid))))
    corr = regression_correlator("+", "-", "a(t)b(0)", bath, atom, config, fluctuation=True, rate_sign=rate_sign)
    values = one_sided_transform(corr, grid, config.quadrature, config.decay_tolerance).real / np.pi
    meta = {
        "units": "gamma",
        "gamma_hz": atom.gamma_hz,
        "eta_c": atom.eta_c,
        "rabi_hz": atom.rabi * atom.gamma_hz,
        "phi_rad": bath.phi_raw,
        "n_photons": bath.n_photons,
        "m_mag": bath.m_mag,
        "kind": "fluorescence-oracle",
    }
    return SpectrumTrace(grid, values, meta)


def coherent_weight(bath: SqueezedBath, atom: AtomParams, config: OracleConfig | None = None) -> float:
    rho = steady_density(bath, atom, config)
    return float(abs(np.trace(SIGMA_PLUS @ rho)) ** 2)
