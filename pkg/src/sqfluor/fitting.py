"""Nonlinear least-squares extraction of reservoir parameters from spectra.

Three model kinds are supported:

``no-drive``
    undriven reflection lineshape (narrow peak of half width gamma_y, broad
    dip of half width gamma_x) on a parabolic background.
``three-lorentzian``
    empirical sum of three Lorentzians plus a parabola, used to track the
    centre and sideband widths of a Mollow triplet.
``full-analytic``
    the complete driven reflection spectrum, fitted jointly over traces taken
    at known relative phases.

Every model has the form ``offset + curvature * w**2 + scale * f(w)``; the
offset, curvature and scale are per-trace nuisance parameters absorbing the
gain normalisation and the reflected squeezer background.

Fits use a Levenberg-Marquardt loop with forward-difference Jacobians;
parameter covariances come from the Jacobian in physical coordinates, so
they do not depend on the internal parameterisation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import AtomParams, SqueezedBath, bath_from_gain, GainPoint, ideal_moments, squeezing_db_from_difference
from .spectra import (
    BackgroundModel,
    DegenerateRootsWarning,
    reflection_density,
    squeezer_background,
    weak_drive_lineshape,
)
from .trace import SpectrumTrace, coherent_mask

KINDS = ("no-drive", "three-lorentzian", "full-analytic")
COORDINATES = ("squashed", "direct")
MAX_ITERATIONS = 200
RELATIVE_STEP = 1e-6
RELATIVE_DECREASE = 1e-10
PIN_TOLERANCE = 1e-6
PEAKS = ("lo", "0", "hi")


class FitError(RuntimeError):
    """Raised when a fit cannot be set up or fails to converge."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class FitModel:
    """Parameter layout of a fit.

    ``coordinates="squashed"`` optimises internal variables mapped onto the
    physical region (N = u**2, M = sin(v)**2 sqrt(N(N+1)), Omega = w**2);
    ``"direct"`` optimises N, M and Omega themselves and is only safe when the
    optimum is well inside the physical region.
    """

    kind: str
    shared: tuple
    per_trace: tuple
    n_traces: int = 1
    coordinates: str = "squashed"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.coordinates not in COORDINATES:
            raise ValueError(f"coordinates must be one of {COORDINATES}")

    @property
    def names(self) -> tuple:
        if self.n_traces == 1:
            return self.shared + self.per_trace
        return self.shared + tuple(f"{p}_{k}" for k in range(self.n_traces) for p in self.per_trace)


@dataclass
class FitResult:
    kind: str
    names: tuple
    values: np.ndarray
    covariance: np.ndarray
    residual_norm: float
    dof: int
    iterations: int
    converged: bool
    warnings: tuple = ()
    derived: dict = field(default_factory=dict)

    @property
    def estimates(self) -> dict:
        return {n: float(v) for n, v in zip(self.names, self.values)}

    @property
    def uncertainties(self) -> dict:
        diag = np.clip(np.diag(self.covariance), 0.0, None)
        return {n: float(math.sqrt(d)) for n, d in zip(self.names, diag)}

    @property
    def chi2_reduced(self) -> float:
        return self.residual_norm**2 / self.dof if self.dof > 0 else float("nan")

    def __getitem__(self, name):
        if name in self.derived:
            return self.derived[name][0]
        return self.estimates[name]

    def sigma(self, name) -> float:
        if name in self.derived:
            return self.derived[name][1]
        return self.uncertainties[name]


# ---------------------------------------------------------------- model values

NUISANCE = ("scale", "offset", "curvature")


def _bath(n, m, phi=0.0, extended=False):
    if not extended:
        return SqueezedBath(n, m, phi)
    # analytic continuation past the purity bound, used only for derivatives
    bath = object.__new__(SqueezedBath)
    for name, value in (("n_photons", n), ("m_mag", m), ("phi", math.fmod(phi, math.pi) % math.pi), ("phi_raw", phi)):
        object.__setattr__(bath, name, float(value))
    return bath


def _atomic_no_drive(n, m, atom, omega, background, extended=False):
    f = weak_drive_lineshape(_bath(n, m, 0.0, extended), atom.with_rabi(0.0), omega)
    if background is not None and background.shape != "flat":
        bg = squeezer_background(omega, n, background.bandwidth, background.shape, background.curvature)
        f = f + (bg - n) / (2 * np.pi * atom.eta_c)
    return f


def _atomic_driven(n, m, rabi, phi, atom, omega, background, extended=False):
    values, _ = reflection_density(_bath(n, m, phi, extended), atom.with_rabi(rabi), omega, background)
    return values - n / (2 * np.pi * atom.eta_c)


def _lorentzians(p, omega):
    total = np.zeros_like(omega)
    for tag in PEAKS:
        x = (omega - p[f"center_{tag}"]) / p[f"width_{tag}"]
        total += p[f"height_{tag}"] / (1.0 + x * x)
    return total


def model_values(kind: str, params: dict, omega, atom: AtomParams | None = None,
                 background: BackgroundModel | None = None, extended: bool = False) -> np.ndarray:
    """Noiseless model ``offset + curvature w^2 + scale f(w)`` on offsets in units of gamma.

    ``background`` adds the departure of a frequency-dependent squeezer
    spectrum from its flat value to ``f``; fits always assume it flat and let
    the curvature term absorb the difference.
    """
    omega = np.asarray(omega, dtype=float)
    atom = atom or AtomParams()
    base = params.get("offset", 0.0) + params.get("curvature", 0.0) * omega**2
    if kind == "three-lorentzian":
        return base + _lorentzians(params, omega)
    if kind == "no-drive":
        f = _atomic_no_drive(params["n_photons"], params["m_mag"], atom, omega, background, extended)
    elif kind == "full-analytic":
        f = _atomic_driven(params["n_photons"], params["m_mag"], params["rabi"], params.get("phi", 0.0),
                           atom, omega, background, extended)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return base + params.get("scale", 1.0) * f


def synthesize_trace(kind: str, params: dict, grid, atom: AtomParams | None = None, noise: float = 0.0,
                     seed: int = 0, background: BackgroundModel | None = None, mask=None,
                     metadata: dict | None = None) -> SpectrumTrace:
    """Model trace with multiplicative Gaussian noise of relative size ``noise``.

    The same ``seed`` always gives the same trace. Noisy traces carry
    ``sigma = noise * |model|`` so fits weight points by their actual
    uncertainty. Driven traces get the coherent-peak mask by default.
    """
    atom = atom or AtomParams()
    grid = np.asarray(grid, dtype=float)
    clean = model_values(kind, params, grid, atom, background)
    rng = np.random.default_rng(seed)
    values = clean * (1.0 + noise * rng.standard_normal(grid.size)) if noise > 0 else clean.copy()
    rabi = params.get("rabi", 0.0) if kind == "full-analytic" else 0.0
    if mask is None:
        mask = coherent_mask(grid) if rabi > 0 else ()
    meta = {
        "units": "gamma",
        "gamma_hz": atom.gamma_hz,
        "eta_c": atom.eta_c,
        "rabi_hz": rabi * atom.gamma_hz,
        "phi_rad": float(params.get("phi", 0.0)),
        "kind": kind,
        "seed": int(seed),
        "noise": float(noise),
        "normalization": "vacuum-floor",
        "mask": tuple(mask),
    }
    meta.update(metadata or {})
    sigma = noise * np.abs(clean) if noise > 0 else None
    return SpectrumTrace(grid, values, meta, sigma)


DEFAULT_SCALE = 2 * np.pi


def default_nuisance(bath: SqueezedBath, atom: AtomParams, scale: float = DEFAULT_SCALE) -> dict:
    """Nuisance values of a trace normalised so the ordinary-vacuum floor is one.

    With the default scale the floor is one quantum of detection noise and the
    flat squeezer background sits at N / eta_c above it.
    """
    return {"scale": scale, "offset": 1.0 + scale * bath.n_photons / (2 * np.pi * atom.eta_c), "curvature": 0.0}


# ---------------------------------------------------------------- optimiser core


class _Problem:
    """Maps internal optimisation variables to named physical parameters."""

    def __init__(self, model: FitModel, traces, atom, background):
        self.model = model
        self.traces = traces
        self.atom = atom
        self.background = background
        self.omega = [t.offsets_in_gamma(atom.gamma_hz)[t.included] for t in traces]
        self.data = [t.values[t.included] for t in traces]
        self.weights = [
            1.0 / t.sigma[t.included] if t.sigma is not None else np.ones(int(t.included.sum())) for t in traces
        ]
        self.absolute_sigma = all(t.sigma is not None for t in traces)
        self.phase_offsets = np.zeros(len(traces))

    # internal <-> physical ------------------------------------------------
    def physical(self, u) -> np.ndarray:
        p = np.array(u, dtype=float)
        names = self.model.names
        if self.model.kind == "three-lorentzian":
            for i, n in enumerate(names):
                if n.startswith("width_"):
                    p[i] = math.exp(u[i])
            return p
        if self.model.coordinates == "squashed":
            i_n, i_m = names.index("n_photons"), names.index("m_mag")
            n = u[i_n] ** 2
            p[i_n] = n
            p[i_m] = math.sin(u[i_m]) ** 2 * math.sqrt(n * (n + 1.0))
            if "rabi" in names:
                p[names.index("rabi")] = u[names.index("rabi")] ** 2
            for i in self._scale_indices():
                p[i] = u[i] ** 2
        return p

    def internal(self, p) -> np.ndarray:
        u = np.array(p, dtype=float)
        names = self.model.names
        if self.model.kind == "three-lorentzian":
            for i, n in enumerate(names):
                if n.startswith("width_"):
                    u[i] = math.log(max(p[i], 1e-6))
            return u
        if self.model.coordinates == "squashed":
            i_n, i_m = names.index("n_photons"), names.index("m_mag")
            n = max(p[i_n], 1e-4)
            r = min(max(p[i_m] / math.sqrt(n * (n + 1.0)), 0.02), 0.98)
            u[i_n] = math.sqrt(n)
            u[i_m] = math.asin(math.sqrt(r))
            if "rabi" in names:
                u[names.index("rabi")] = math.sqrt(max(p[names.index("rabi")], 0.0))
            for i in self._scale_indices():
                u[i] = math.sqrt(max(p[i], 0.0))
        return u

    def _scale_indices(self) -> list:
        # a detection gain is positive; a negative scale would flip the feature
        return [i for i, n in enumerate(self.model.names) if n == "scale" or n.startswith("scale_")]

    # residuals -------------------------------------------------------------
    def trace_params(self, p, k) -> dict:
        named = dict(zip(self.model.names, p))
        out = {s: named[s] for s in self.model.shared}
        suffix = "" if self.model.n_traces == 1 else f"_{k}"
        for s in self.model.per_trace:
            out[s] = named[s + suffix]
        if "phi" in out:
            out["phi"] = out["phi"] + self.phase_offsets[k]
        return out

    def predict(self, p, k, extended=False) -> np.ndarray:
        return model_values(self.model.kind, self.trace_params(p, k), self.omega[k], self.atom, extended=extended)

    def residuals_physical(self, p, extended=False) -> np.ndarray:
        named = dict(zip(self.model.names, p))
        if "n_photons" in named and not extended:
            n, m = named["n_photons"], named["m_mag"]
            scales = [named[self.model.names[i]] for i in self._scale_indices()]
            if n < 0 or m < 0 or m > math.sqrt(n * (n + 1.0)) + 1e-12 or named.get("rabi", 0.0) < 0 \
                    or min(scales, default=1.0) < 0:
                return np.concatenate([np.full(d.size, 1e6) for d in self.data])
        return np.concatenate(
            [(d - self.predict(p, k, extended)) * w for k, (d, w) in enumerate(zip(self.data, self.weights))]
        )

    def residuals(self, u) -> np.ndarray:
        return self.residuals_physical(self.physical(u))

    def jacobian_physical(self, p) -> np.ndarray:
        """Forward differences in physical coordinates.

        The model is continued analytically past the purity bound so that the
        derivative in M exists on the boundary.
        """
        r0 = self.residuals_physical(p, extended=True)
        jac = np.empty((r0.size, len(p)))
        for i in range(len(p)):
            h = RELATIVE_STEP * max(abs(p[i]), 1e-3)
            q = np.array(p, dtype=float)
            q[i] += h
            jac[:, i] = (self.residuals_physical(q, extended=True) - r0) / h
        return jac

    def pinned_coordinates(self, u) -> dict:
        """Squashed coordinates sitting on a bound, with the value that pins them."""
        if self.model.kind == "three-lorentzian" or self.model.coordinates != "squashed":
            return {}
        names = self.model.names
        i_n, i_m = names.index("n_photons"), names.index("m_mag")
        pins = {}
        if u[i_n] ** 2 < PIN_TOLERANCE:
            pins[i_n] = 0.0
        r = math.sin(u[i_m]) ** 2
        if r > 1 - PIN_TOLERANCE:
            pins[i_m] = math.pi / 2
        elif r < PIN_TOLERANCE:
            pins[i_m] = 0.0
        return pins


@dataclass
class LMOutcome:
    x: np.ndarray
    residuals: np.ndarray
    iterations: int
    converged: bool
    message: str


def _forward_jacobian(fun, x, r0, rel_step):
    jac = np.empty((r0.size, x.size))
    for i in range(x.size):
        h = rel_step * max(abs(x[i]), 1e-3)
        xh = x.copy()
        xh[i] += h
        jac[:, i] = (fun(xh) - r0) / h
    return jac


def levenberg_marquardt(fun, x0, max_iterations: int = MAX_ITERATIONS, rel_step: float = RELATIVE_STEP,
                        rel_decrease: float = RELATIVE_DECREASE) -> LMOutcome:
    """Minimise ``|fun(x)|^2`` by damped Gauss-Newton steps.

    Marquardt scaling by diag(J^T J), forward-difference Jacobians with step
    ``rel_step * max(|x|, 1e-3)``. Converged when an accepted step lowers the
    cost by less than ``rel_decrease`` relative, when the cost is zero, or when
    no damping yields a decrease (a stationary point).
    """
    x = np.array(x0, dtype=float)
    r = fun(x)
    cost = float(r @ r)
    lam = 1e-3
    for it in range(1, max_iterations + 1):
        if cost == 0.0:
            return LMOutcome(x, r, it - 1, True, "zero residual")
        jac = _forward_jacobian(fun, x, r, rel_step)
        hess = jac.T @ jac
        grad = jac.T @ r
        diag = np.diag(hess).copy()
        diag = np.maximum(diag, 1e-12 * max(diag.max(), 1e-300))
        # solve in variables scaled to unit diagonal; columns of J can differ by
        # many decades when per-point weights do
        s = 1.0 / np.sqrt(diag)
        scaled = hess * s[:, None] * s[None, :]
        eye = np.eye(x.size)
        while True:
            step = s * np.linalg.lstsq(scaled + lam * eye, -grad * s, rcond=None)[0]
            x_new = x + step
            r_new = fun(x_new)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                break
            lam *= 10.0
            if lam > 1e16:
                return LMOutcome(x, r, it, True, "stationary point: no damped step decreases the cost")
        decrease = (cost - cost_new) / cost
        x, r, cost = x_new, r_new, cost_new
        lam = max(lam / 10.0, 1e-15)
        if decrease < rel_decrease:
            return LMOutcome(x, r, it, True, "relative decrease below tolerance")
    return LMOutcome(x, r, max_iterations, False, f"no convergence after {max_iterations} iterations")


def _covariance(jac) -> np.ndarray:
    """(J^T J)^+ computed with unit-diagonal scaling so tiny columns are not truncated."""
    hess = jac.T @ jac
    d = np.diag(hess).copy()
    s = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    return s[:, None] * np.linalg.pinv(hess * s[:, None] * s[None, :]) * s[None, :]


def _refit_on_bounds(problem: _Problem, out: LMOutcome, pins: dict) -> LMOutcome:
    """Freeze coordinates that ran onto a bound and polish the rest.

    The squashing maps have zero slope on their bounds, where damped
    Gauss-Newton steps oscillate instead of converging.
    """
    free = [i for i in range(out.x.size) if i not in pins]
    base = out.x.copy()
    for i, value in pins.items():
        base[i] = value

    def sub(v):
        full = base.copy()
        full[free] = v
        return problem.residuals(full)

    inner = levenberg_marquardt(sub, base[free])
    if float(inner.residuals @ inner.residuals) > float(out.residuals @ out.residuals) and out.converged:
        return out
    x = base.copy()
    x[free] = inner.x
    return LMOutcome(x, inner.residuals, out.iterations + inner.iterations, inner.converged, inner.message)


def _solve(problem: _Problem, p0) -> FitResult:
    u0 = problem.internal(np.asarray(p0, dtype=float))
    n_par = u0.size
    with warnings.catch_warnings(record=True) as log:
        warnings.simplefilter("always", DegenerateRootsWarning)
        out = levenberg_marquardt(problem.residuals, u0)
        pins = problem.pinned_coordinates(out.x)
        if pins:
            out = _refit_on_bounds(problem, out, pins)
        p = problem.physical(out.x)
        jac = problem.jacobian_physical(p)
    caught = [w for w in log if issubclass(w.category, DegenerateRootsWarning)]
    if "phi" in problem.model.names:
        i = problem.model.names.index("phi")
        p[i] = math.fmod(p[i], math.pi) + (math.pi if math.fmod(p[i], math.pi) < 0 else 0.0)
    resid = out.residuals
    dof = resid.size - n_par
    cost = float(resid @ resid)
    cov = _covariance(jac)
    if not problem.absolute_sigma:
        cov = cov * (cost / dof if dof > 0 else np.nan)
    cov = 0.5 * (cov + cov.T)
    notes = []
    if caught:
        notes.append("near-degenerate roots met during the fit; resolvent fallback used")
    if not out.converged:
        notes.append(out.message)
    return FitResult(
        kind=problem.model.kind,
        names=problem.model.names,
        values=p,
        covariance=cov,
        residual_norm=math.sqrt(cost),
        dof=dof,
        iterations=out.iterations,
        converged=out.converged,
        warnings=tuple(notes),
    )


def _finish(result: FitResult, strict: bool) -> FitResult:
    if strict and not result.converged:
        raise FitError(f"{result.kind} fit did not converge after {result.iterations} iterations", result)
    return result


def _linear_nuisance(f, omega, y, w, curvature=True):
    """Best (scale, offset, curvature) for fixed shape ``f``; returns them and the cost."""
    cols = [f, np.ones_like(omega)] + ([omega**2] if curvature else [])
    design = np.column_stack(cols) * w[:, None]
    coef, *_ = np.linalg.lstsq(design, y * w, rcond=None)
    resid = design @ coef - y * w
    if not curvature:
        coef = np.append(coef, 0.0)
    return coef, float(resid @ resid)


def _reservoir_grid():
    ns = (0.02, 0.08, 0.2, 0.4, 0.7, 1.0, 1.5, 2.2, 3.2)
    rs = (0.1, 0.4, 0.7, 0.9, 0.97)
    return [(n, r * math.sqrt(n * (n + 1.0))) for n in ns for r in rs]


def _pinned(result: FitResult) -> list:
    est = result.estimates
    notes = []
    if "n_photons" in est:
        n, m = est["n_photons"], est["m_mag"]
        bound = math.sqrt(n * (n + 1.0))
        if n < PIN_TOLERANCE:
            notes.append("n_photons pinned at the lower bound 0")
        elif bound > 0 and m > (1 - PIN_TOLERANCE) * bound:
            notes.append("m_mag pinned at the purity bound sqrt(N(N+1))")
        elif m < PIN_TOLERANCE * max(bound, 1.0):
            notes.append("m_mag pinned at the lower bound 0")
    return notes


def _add_reservoir_derived(result: FitResult) -> None:
    names = result.names
    if "n_photons" not in names:
        return
    i, j = names.index("n_photons"), names.index("m_mag")
    n, m = result.values[i], result.values[j]
    c = result.covariance
    var_diff = c[i, i] + c[j, j] - 2 * c[i, j]
    sd = math.sqrt(max(var_diff, 0.0))
    diff = m - n
    result.derived["m_minus_n"] = (float(diff), sd)
    result.derived["gamma_y"] = (float(n - m + 0.5), sd)
    result.derived["gamma_x"] = (float(n + m + 0.5), math.sqrt(max(c[i, i] + c[j, j] + 2 * c[i, j], 0.0)))
    if diff < 0.5:
        db = squeezing_db_from_difference(diff)
        result.derived["squeezing_db"] = (db, 10.0 / math.log(10.0) * sd / (0.5 - diff))


def _check_traces(traces):
    if not traces:
        raise FitError("at least one trace is required")
    for t in traces:
        if int(t.included.sum()) < 8:
            raise FitError("trace has too few unmasked points to fit")


# ---------------------------------------------------------------- public fits


def fit_no_drive(trace: SpectrumTrace, atom: AtomParams | None = None, guess: dict | None = None,
                 coordinates: str = "squashed", curvature: bool = True, strict: bool = True) -> FitResult:
    """Fit N, M and the nuisance terms to an undriven reflection trace.

    ``atom`` fixes gamma (for Hz offsets) and eta_c. Without a ``guess`` the
    starting point is the best cell of a coarse (N, purity) grid with the
    nuisance terms solved linearly.
    """
    atom = (atom or AtomParams()).with_rabi(0.0)
    _check_traces([trace])
    model = FitModel("no-drive", ("n_photons", "m_mag"), NUISANCE, 1, coordinates)
    problem = _Problem(model, [trace], atom, None)
    omega, y, w = problem.omega[0], problem.data[0], problem.weights[0]
    if guess is None:
        best = None
        for n, m in _reservoir_grid():
            f = _atomic_no_drive(n, m, atom, omega, None)
            coef, cost = _linear_nuisance(f, omega, y, w, curvature)
            if coef[0] > 0 and (best is None or cost < best[0]):
                best = (cost, n, m, coef)
        if best is None:
            raise FitError("no starting point with a positive scale; is the trace normalised?")
        _, n0, m0, coef = best
        guess = {"n_photons": n0, "m_mag": m0, "scale": coef[0], "offset": coef[1], "curvature": coef[2]}
    p0 = [guess[k] for k in model.names]
    if not curvature:
        return _fit_without_curvature(problem, p0, strict)
    result = _solve(problem, p0)
    result.warnings = result.warnings + tuple(_pinned(result))
    _add_reservoir_derived(result)
    return _finish(result, strict)


def _fit_without_curvature(problem, p0, strict):
    model = FitModel(problem.model.kind, problem.model.shared, ("scale", "offset"), 1, problem.model.coordinates)
    reduced = _Problem(model, problem.traces, problem.atom, None)
    result = _solve(reduced, p0[:-1])
    result.warnings = result.warnings + tuple(_pinned(result))
    _add_reservoir_derived(result)
    return _finish(result, strict)


def _lorentzian_guess(omega, y, rabi):
    edge = max(omega.size // 20, 2)
    offset = float(np.median(np.concatenate([y[:edge], y[-edge:]])))
    centre = np.abs(omega) < 0.5
    h0 = float(np.max(y[centre]) - offset) if centre.any() else float(np.max(y) - offset)
    if rabi is None or rabi <= 0:
        far = np.abs(omega) > 1.5
        rabi = float(np.abs(omega[far][np.argmax(y[far])])) if far.any() else 3.0
    guess = {"offset": offset, "curvature": 0.0}
    for tag, c in zip(PEAKS, (-rabi, 0.0, rabi)):
        near = np.abs(omega - c) < 0.5
        h = float(np.max(y[near]) - offset) if near.any() else h0 / 3
        guess[f"center_{tag}"] = c
        guess[f"width_{tag}"] = 0.5 if tag == "0" else 0.75
        guess[f"height_{tag}"] = max(h, 1e-3 * max(abs(h0), 1e-6))
    guess["height_0"] = h0
    return guess


def fit_three_lorentzian(trace: SpectrumTrace, atom: AtomParams | None = None, guess: dict | None = None,
                         strict: bool = True) -> FitResult:
    """Three Lorentzians (centre and two sidebands) plus a parabolic background.

    Widths are half widths at half maximum in units of gamma. The sidebands
    are flagged as unresolvable when their full width exceeds the splitting or
    their fitted height is not significantly positive.
    """
    atom = atom or AtomParams()
    _check_traces([trace])
    shared = ("offset", "curvature") + tuple(f"{q}_{t}" for t in PEAKS for q in ("center", "width", "height"))
    model = FitModel("three-lorentzian", shared, (), 1)
    problem = _Problem(model, [trace], atom, None)
    if guess is None:
        rabi_hz = trace.metadata.get("rabi_hz")
        gamma_hz = trace.metadata.get("gamma_hz") or atom.gamma_hz
        rabi = rabi_hz / gamma_hz if rabi_hz else None
        guess = _lorentzian_guess(problem.omega[0], problem.data[0], rabi)
    result = _solve(problem, [guess[k] for k in model.names])
    est, err = result.estimates, result.uncertainties
    splitting = 0.5 * (est["center_hi"] - est["center_lo"])
    side_hw = 0.5 * (est["width_lo"] + est["width_hi"])
    side_err = 0.5 * math.hypot(err["width_lo"], err["width_hi"])
    result.derived["center_hwhm"] = (est["width_0"], err["width_0"])
    result.derived["sideband_hwhm"] = (side_hw, side_err)
    result.derived["splitting"] = (splitting, 0.5 * math.hypot(err["center_hi"], err["center_lo"]))
    weak = [est[f"height_{t}"] <= 2 * err[f"height_{t}"] for t in ("lo", "hi")]
    if 2 * side_hw > splitting or any(weak):
        result.warnings = result.warnings + ("sidebands unresolvable: broadened beyond the Rabi splitting",)
        result.derived["sidebands_resolved"] = (0.0, 0.0)
    else:
        result.derived["sidebands_resolved"] = (1.0, 0.0)
    return _finish(result, strict)


def _phase_offsets(traces, phase_offsets):
    if phase_offsets is not None:
        offsets = np.asarray(phase_offsets, dtype=float)
        if offsets.size != len(traces):
            raise FitError("one phase offset per trace is required")
        return offsets
    phis = [t.metadata.get("phi_rad") for t in traces]
    if any(p is None for p in phis):
        raise FitError("relative phases unknown: pass phase_offsets or set phi_rad on every trace")
    return np.asarray(phis, dtype=float) - phis[0]


def fit_full_joint(traces, atom: AtomParams | None = None, phase_offsets=None, guess: dict | None = None,
                   coordinates: str = "squashed", strict: bool = True) -> FitResult:
    """Joint fit of the driven reflection spectrum to traces at known relative phases.

    N, M, Omega and the base phase are shared; each trace has its own scale,
    offset and curvature. Trace ``k`` is evaluated at ``phi + phase_offsets[k]``
    (default: differences of the ``phi_rad`` metadata). Omega and the base
    phase start from the first trace's metadata when no guess is given.
    """
    atom = atom or AtomParams()
    traces = list(traces)
    _check_traces(traces)
    model = FitModel("full-analytic", ("n_photons", "m_mag", "rabi", "phi"), NUISANCE, len(traces), coordinates)
    problem = _Problem(model, traces, atom, None)
    problem.phase_offsets = _phase_offsets(traces, phase_offsets)
    notes = []
    if len(traces) == 1:
        notes.append("single phase: phi and the squeezing phase term gamma_M are weakly constrained")
    first = traces[0].metadata
    if guess is None:
        guess = {}
    guess = dict(guess)
    if "rabi" not in guess:
        if not first.get("rabi_hz"):
            raise FitError("drive amplitude unknown: pass guess['rabi'] or set rabi_hz")
        guess["rabi"] = first["rabi_hz"] / (first.get("gamma_hz") or atom.gamma_hz)
    guess.setdefault("phi", float(first.get("phi_rad", 0.0)))
    if "n_photons" not in guess:
        guess.update(_joint_start(problem, guess["rabi"], guess["phi"]))
    p0 = []
    for name in model.names:
        if name in guess:
            p0.append(guess[name])
        else:
            raise FitError(f"missing starting value for {name}")
    result = _solve(problem, p0)
    result.warnings = tuple(notes) + result.warnings + tuple(_pinned(result))
    _add_reservoir_derived(result)
    return _finish(result, strict)


def _joint_start(problem: _Problem, rabi, phi) -> dict:
    best = None
    for n, m in _reservoir_grid():
        cost, coefs = 0.0, []
        for k in range(len(problem.traces)):
            f = _atomic_driven(n, m, rabi, phi + problem.phase_offsets[k], problem.atom, problem.omega[k], None)
            coef, c = _linear_nuisance(f, problem.omega[k], problem.data[k], problem.weights[k])
            cost += c
            coefs.append(coef)
        if best is None or cost < best[0]:
            best = (cost, n, m, coefs)
    _, n, m, coefs = best
    start = {"n_photons": n, "m_mag": m}
    multi = len(problem.traces) > 1
    for k, coef in enumerate(coefs):
        for name, value in zip(NUISANCE, coef):
            start[f"{name}_{k}" if multi else name] = float(value)
    return start


# ---------------------------------------------------------------- calibration fits


def fit_efficiency(gain_sweep, eta_c: float | None = None) -> FitResult:
    """Weighted one-parameter fit of eta to (gain_db, M - N, sigma) triples.

    Under linear dilution M - N = eta (M_i - N_i) with ideal moments from the
    gain, so the least-squares estimate is closed form.
    """
    rows = [tuple(map(float, r)) for r in gain_sweep]
    if len(rows) < 3:
        raise FitError("at least three gain points are required")
    gains = np.array([r[0] for r in rows])
    if np.ptp(gains) == 0:
        raise FitError("degenerate sweep: all gains are equal")
    y = np.array([r[1] for r in rows])
    sig = np.array([r[2] if len(r) > 2 else 1.0 for r in rows])
    if np.any(sig <= 0):
        raise FitError("uncertainties must be positive")
    x = np.array([ideal_moments(g)[1] - ideal_moments(g)[0] for g in gains])
    w = 1.0 / sig**2
    sxx = float(np.sum(w * x * x))
    if sxx == 0:
        raise FitError("degenerate sweep: no gain above 0 dB")
    eta = float(np.sum(w * x * y) / sxx)
    resid = (y - eta * x) / sig
    dof = len(rows) - 1
    var = 1.0 / sxx
    result = FitResult(
        kind="efficiency",
        names=("eta",),
        values=np.array([eta]),
        covariance=np.array([[var]]),
        residual_norm=float(np.sqrt(resid @ resid)),
        dof=dof,
        iterations=1,
        converged=True,
    )
    if eta_c is not None:
        result.derived["eta_loss"] = (eta / eta_c, math.sqrt(var) / eta_c)
    return result


def gain_sweep_truth(gains_db, eta: float) -> list:
    """(gain_db, M - N) pairs of the linearly diluted ideal squeezer."""
    out = []
    for g in gains_db:
        bath = bath_from_gain(GainPoint(g, eta))
        out.append((float(g), bath.m_mag - bath.n_photons))
    return out


@dataclass(frozen=True)
class Sinusoid:
    """w(phi) = mean + a cos(2 phi) + b sin(2 phi)."""

    mean: float
    a: float
    b: float
    r_squared: float

    @property
    def amplitude(self) -> float:
        return math.hypot(self.a, self.b)

    @property
    def phase(self) -> float:
        """Phase of the maximum in 2 phi."""
        return math.atan2(self.b, self.a)

    def __call__(self, phi):
        phi = np.asarray(phi, dtype=float)
        return self.mean + self.a * np.cos(2 * phi) + self.b * np.sin(2 * phi)


def fit_sinusoid(phi, widths) -> Sinusoid:
    """Linear least-squares fit of a period-pi sinusoid to widths sampled at ``phi``."""
    phi = np.asarray(phi, dtype=float)
    widths = np.asarray(widths, dtype=float)
    if phi.size < 3:
        raise FitError("at least three phases are required")
    design = np.column_stack([np.ones_like(phi), np.cos(2 * phi), np.sin(2 * phi)])
    coef, *_ = np.linalg.lstsq(design, widths, rcond=None)
    return Sinusoid(*map(float, coef), r_squared=r_squared(widths, design @ coef))


def r_squared(observed, predicted) -> float:
    observed = np.asarray(observed, dtype=float)
    ss_res = float(np.sum((observed - np.asarray(predicted)) ** 2))
    ss_tot = float(np.sum((observed - observed.mean()) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
