"""SiV photophysics - three-level rate model, photon statistics and dipole emission near metals."""

__version__ = "0.1.0"

from .correlation import correlate
from .dipole import DipoleEnvironment, collection_efficiency, decay_rates
from .emitter import SimConfig, TimestampStream, simulate
from .fitting import fit_g2, fit_power_dependence, fit_saturation
from .rate_model import RateCoefficients, shape_from_rates, steady_state

__all__ = [
    "DipoleEnvironment",
    "RateCoefficients",
    "SimConfig",
    "TimestampStream",
    "collection_efficiency",
    "correlate",
    "decay_rates",
    "fit_g2",
    "fit_power_dependence",
    "fit_saturation",
    "shape_from_rates",
    "simulate",
    "steady_state",
]
