"""Spectra of a coherently driven two-level emitter in a squeezed reservoir."""

__version__ = "0.1.0"

from .model import (
    AtomParams,
    GainPoint,
    RateSet,
    SqueezedBath,
    UnphysicalBathError,
    bath_from_gain,
    quadrature_variance,
    rates_from_params,
    squeezing_db,
    validity_check,
)
from .spectra import (
    BackgroundModel,
    BlochState,
    SpectralDecomposition,
    bloch_matrix,
    correlator,
    cubic_roots,
    decomposition,
    fluorescence_spectrum,
    reflection_spectrum,
    squeezer_background,
    steady_state,
    strong_drive_reflection,
    weak_drive_reflection,
)
from .trace import SpectrumTrace
