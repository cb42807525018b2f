"""Sampled spectra with acquisition metadata."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UNITS = ("gamma", "hz")


@dataclass
class SpectrumTrace:
    """Power samples on a strictly increasing frequency-offset grid.

    Offsets are measured from the atomic resonance, either in units of gamma
    or in Hz (``metadata["units"]``). ``mask`` lists excluded sample indices,
    e.g. the points swallowed by the coherent (elastic) peak. ``sigma`` holds
    optional per-point uncertainties used as fit weights.
    """

    offsets: np.ndarray
    values: np.ndarray
    metadata: dict = field(default_factory=dict)
    sigma: np.ndarray | None = None

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.metadata = dict(self.metadata)
        self.metadata.setdefault("units", "gamma")
        if self.offsets.ndim != 1 or self.offsets.shape != self.values.shape:
            raise ValueError("offsets and values must be 1-D sequences of equal length")
        if self.offsets.size and np.any(np.diff(self.offsets) <= 0):
            raise ValueError("offsets must be strictly increasing")
        if not np.all(np.isfinite(self.values)) or not np.all(np.isfinite(self.offsets)):
            raise ValueError("trace contains non-finite samples")
        if self.metadata["units"] not in UNITS:
            raise ValueError(f"units must be one of {UNITS}")
        mask = tuple(sorted({int(i) for i in self.metadata.get("mask", ())}))
        if mask and (mask[0] < 0 or mask[-1] >= self.offsets.size):
            raise ValueError("excluded-point mask index out of range")
        self.metadata["mask"] = mask
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=float)
            if self.sigma.shape != self.values.shape or np.any(self.sigma <= 0):
                raise ValueError("sigma must be positive and match values")

    def __len__(self):
        return self.offsets.size

    def __eq__(self, other):
        if not isinstance(other, SpectrumTrace):
            return NotImplemented
        same_sigma = (self.sigma is None and other.sigma is None) or (
            self.sigma is not None
            and other.sigma is not None
            and np.array_equal(self.sigma, other.sigma)
        )
        return (
            np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.values, other.values)
            and self.metadata == other.metadata
            and same_sigma
        )

    @property
    def mask(self) -> tuple:
        return self.metadata["mask"]

    @property
    def included(self) -> np.ndarray:
        keep = np.ones(self.offsets.size, dtype=bool)
        keep[list(self.mask)] = False
        return keep

    def offsets_in_gamma(self, gamma_hz: float | None = None) -> np.ndarray:
        if self.metadata["units"] == "gamma":
            return self.offsets
        gamma_hz = gamma_hz or self.metadata.get("gamma_hz")
        if not gamma_hz:
            raise ValueError("converting Hz offsets needs gamma_hz")
        return self.offsets / gamma_hz

    def to_units(self, units: str, gamma_hz: float | None = None) -> "SpectrumTrace":
        if units == self.metadata["units"]:
            return self
        gamma_hz = gamma_hz or self.metadata.get("gamma_hz")
        if not gamma_hz or not math.isfinite(gamma_hz):
            raise ValueError("unit conversion needs gamma_hz")
        factor = gamma_hz if units == "hz" else 1.0 / gamma_hz
        meta = dict(self.metadata, units=units, gamma_hz=gamma_hz)
        return SpectrumTrace(self.offsets * factor, self.values.copy(), meta, self.sigma)

    def with_mask(self, indices) -> "SpectrumTrace":
        meta = dict(self.metadata, mask=tuple(indices))
        return SpectrumTrace(self.offsets, self.values, meta, self.sigma)


def coherent_mask(offsets, half_width: int = 3) -> tuple:
    """Indices within ``half_width`` samples of the sample nearest zero offset."""
    offsets = np.asarray(offsets, dtype=float)
    centre = int(np.argmin(np.abs(offsets)))
    lo, hi = max(centre - half_width, 0), min(centre + half_width, offsets.size - 1)
    return tuple(range(lo, hi + 1))
