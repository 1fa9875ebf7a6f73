"""Closed-form mathematics of the extended three-level system.

Levels: 1 ground, 2 excited, 3 shelving. Transitions 1→2 (pump, k12 = σP),
2→1 (k21, radiative), 2→3 (k23) and 3→1 (k31, de-shelving that saturates with
excitation power).

Units are fixed across the package: rates in MHz, powers in µW, g² delays and
relaxation times in ns. The factor 1000 between 1/MHz (µs) and ns is applied
only inside this module.
"""

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy import constants, special

from .errors import (
    ComplexEigenvalue,
    InvalidLimits,
    InvalidParameters,
    UnknownCalibration,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

NS_PER_US = 1000.0

# photons·s⁻¹·cm⁻² per µW at the focus, keyed by excitation wavelength (nm)
PHOTON_FLUX_PER_UW: Dict[int, float] = {671: 2.87e20, 695: 2.97e20}


@dataclass(frozen=True)
class RateCoefficients:
    """Rate coefficients of the de-shelving model.

    Attributes:
        k21: Radiative decay rate 2→1 (MHz)
        k23: Shelving rate 2→3 (MHz)
        k31_0: Power-independent de-shelving rate 3→1 (MHz)
        d: Saturating de-shelving amplitude (MHz)
        c: De-shelving saturation power (µW)
        sigma: Pump slope, k12 = sigma * P (MHz/µW)
    """

    k21: float
    k23: float
    k31_0: float
    d: float = 0.0
    c: float = 0.0
    sigma: float = 0.0

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise InvalidParameters(f"{name} must be finite and >= 0, got {value}")
        if self.k21 <= 0:
            raise InvalidParameters("k21 must be > 0")
        if self.k31_0 <= 0:
            raise InvalidParameters("k31_0 must be > 0")

    @property
    def model_valid(self) -> bool:
        """Whether k21 + k23 > k31_0, the ordering the limit inversion assumes."""
        return self.k21 + self.k23 > self.k31_0

    def with_updates(self, **changes: float) -> "RateCoefficients":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class PumpState:
    """Power-dependent rates at one excitation power."""

    power: float
    k12: float
    k31: float


@dataclass(frozen=True)
class RateAggregates:
    """Sum (A) and pairwise-product (B) aggregates of the four rates."""

    A: float
    B: float

    @property
    def discriminant(self) -> float:
        return self.A * self.A - 4.0 * self.B


@dataclass(frozen=True)
class G2Shape:
    """Observable parameters of g²(τ) = 1 − (1+a)e^(−|τ|/τ₁) + a·e^(−|τ|/τ₂).

    ``degenerate`` marks shapes whose bunching time is not identifiable
    (no shelving, or bunching unresolved by a fit).
    """

    a: float
    tau1: float
    tau2: float
    degenerate: bool = False

    def __post_init__(self) -> None:
        if not self.tau1 > 0:
            raise InvalidParameters(f"tau1 must be > 0, got {self.tau1}")
        if not self.degenerate and not self.tau2 > self.tau1:
            raise InvalidParameters(f"tau2 ({self.tau2}) must exceed tau1 ({self.tau1})")

    def to_dict(self) -> Dict[str, float]:
        return {"a": self.a, "tau1": self.tau1, "tau2": self.tau2}


@dataclass(frozen=True)
class LimitingValues:
    """g² parameters in the vanishing- and infinite-power limits (times in ns)."""

    tau1_0: float
    tau2_0: float
    tau2_inf: float
    a_inf: float

    def __post_init__(self) -> None:
        for name in ("tau1_0", "tau2_0", "tau2_inf"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidLimits(f"{name} must be a positive time, got {value}")
        if not (math.isfinite(self.a_inf) and self.a_inf >= 0):
            raise InvalidLimits(f"a_inf must be >= 0, got {self.a_inf}")

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class SteadyState:
    """Stationary level occupation probabilities."""

    n1: float
    n2: float
    n3: float


def deshelving_rate(rc: RateCoefficients, power: float) -> float:
    """
    Saturating de-shelving rate k31(P) = d·P/(P+c) + k31_0.

    Args:
        rc: Rate coefficients
        power: Excitation power in µW, may be ``math.inf``

    Returns:
        De-shelving rate in MHz
    """
    if power < 0:
        raise InvalidParameters(f"power must be >= 0, got {power}")
    if power == 0:
        return rc.k31_0
    if math.isinf(power):
        return rc.k31_0 + rc.d
    return rc.d * power / (power + rc.c) + rc.k31_0


def pump_state(rc: RateCoefficients, power: float) -> PumpState:
    """Pump and de-shelving rates at a finite excitation power."""
    if not math.isfinite(power):
        raise InvalidParameters("pump state requires a finite power")
    return PumpState(power=power, k12=rc.sigma * power, k31=deshelving_rate(rc, power))


def rate_aggregates(k12: float, k21: float, k23: float, k31: float) -> RateAggregates:
    A = k12 + k21 + k23 + k31
    B = k12 * k23 + k12 * k31 + k21 * k31 + k23 * k31
    return RateAggregates(A=A, B=B)


def shape_from_rates(rc: RateCoefficients, power: float) -> G2Shape:
    """
    Forward map from rate coefficients to the g² shape at one power.

    Args:
        rc: Rate coefficients including sigma
        power: Finite excitation power in µW

    Returns:
        G2Shape with tau1 < tau2 in ns

    Raises:
        ComplexEigenvalue: If A² <= 4B
    """
    pump = pump_state(rc, power)
    if rc.k23 == 0:
        # shelving decoupled: two-level antibunching, bunching time unidentifiable
        return G2Shape(
            a=0.0,
            tau1=NS_PER_US / (pump.k12 + rc.k21),
            tau2=NS_PER_US / pump.k31,
            degenerate=True,
        )

    agg = rate_aggregates(pump.k12, rc.k21, rc.k23, pump.k31)
    disc = agg.discriminant
    if disc <= 0:
        raise ComplexEigenvalue(
            f"A^2 - 4B = {disc:.6g} <= 0 at P = {power} µW; relaxation times are not real"
        )
    lam_fast = 0.5 * (agg.A + math.sqrt(disc))
    # product form avoids cancellation in A - sqrt(A^2 - 4B)
    lam_slow = agg.B / lam_fast
    t1 = 1.0 / lam_fast
    t2 = 1.0 / lam_slow
    a = (1.0 - t2 * pump.k31) / (pump.k31 * (t2 - t1))
    return G2Shape(a=a, tau1=t1 * NS_PER_US, tau2=t2 * NS_PER_US)


def generator_matrix(rc: RateCoefficients, power: float) -> np.ndarray:
    """Rate-equation generator M with dN/dt = M·N for N = (n1, n2, n3)."""
    pump = pump_state(rc, power)
    k12, k31 = pump.k12, pump.k31
    return np.array(
        [
            [-k12, rc.k21, k31],
            [k12, -(rc.k21 + rc.k23), 0.0],
            [0.0, rc.k23, -k31],
        ]
    )


def eigen_shape(rc: RateCoefficients, power: float) -> Tuple[float, float]:
    """
    Relaxation rates from a dense eigen-solve of the generator matrix.

    Returns:
        (fast, slow) relaxation rates in MHz, i.e. 1000/tau1 and 1000/tau2
    """
    eigenvalues = np.linalg.eigvals(generator_matrix(rc, power))
    rates = np.sort(-eigenvalues.real)
    # the stationary mode has eigenvalue 0
    return float(rates[2]), float(rates[1])


def g2_analytic(shape: G2Shape, tau: ArrayLike) -> ArrayLike:
    """g²(τ) of the three-level model; tau in ns."""
    t = np.abs(np.asarray(tau, dtype=float))
    value = 1.0 - (1.0 + shape.a) * np.exp(-t / shape.tau1)
    if shape.a != 0:
        value = value + shape.a * np.exp(-t / shape.tau2)
    return value if np.ndim(value) else float(value)


def g2_with_background(g2: ArrayLike, pe: float) -> ArrayLike:
    """Correlation measured with a fraction 1 − pe of uncorrelated background."""
    if not 0.0 <= pe <= 1.0:
        raise InvalidParameters(f"pe must lie in [0, 1], got {pe}")
    value = 1.0 + (np.asarray(g2, dtype=float) - 1.0) * pe**2
    return value if np.ndim(value) else float(value)


def _smeared_exponential(tau: np.ndarray, decay: float, width: float) -> np.ndarray:
    """e^(−|τ|/decay) convolved with a unit-area Gaussian of standard deviation width."""
    out = np.zeros_like(tau)
    for sign in (1.0, -1.0):
        u = (width / decay - sign * tau / width) / math.sqrt(2.0)
        term = np.empty_like(tau)
        pos = u >= 0
        term[pos] = np.exp(-tau[pos] ** 2 / (2.0 * width**2)) * special.erfcx(u[pos])
        neg = ~pos
        term[neg] = np.exp(width**2 / (2.0 * decay**2) - sign * tau[neg] / decay) * special.erfc(
            u[neg]
        )
        out += 0.5 * term
    return out


def exponential_response(tau: np.ndarray, decay: float, irf_sigma: float) -> np.ndarray:
    """e^(−|τ|/decay) as seen through a Gaussian response of width irf_sigma (ns)."""
    t = np.atleast_1d(np.asarray(tau, dtype=float))
    if irf_sigma == 0:
        return np.exp(-np.abs(t) / decay)
    return _smeared_exponential(t, decay, irf_sigma)


def g2_irf_convolved(shape: G2Shape, pe: float, irf_sigma: float, tau: ArrayLike) -> ArrayLike:
    """
    Background-corrected g² convolved with a Gaussian instrument response.

    Args:
        shape: g² shape parameters
        pe: Probability that a detected photon stems from the emitter
        irf_sigma: Standard deviation of the timing jitter in ns
        tau: Delay(s) in ns

    Returns:
        Model value(s) at tau
    """
    if irf_sigma < 0:
        raise InvalidParameters(f"irf_sigma must be >= 0, got {irf_sigma}")
    if irf_sigma == 0:
        return g2_with_background(g2_analytic(shape, tau), pe)
    if not 0.0 <= pe <= 1.0:
        raise InvalidParameters(f"pe must lie in [0, 1], got {pe}")

    t = np.atleast_1d(np.asarray(tau, dtype=float))
    deviation = -(1.0 + shape.a) * _smeared_exponential(t, shape.tau1, irf_sigma)
    if shape.a != 0:
        deviation += shape.a * _smeared_exponential(t, shape.tau2, irf_sigma)
    value = 1.0 + pe**2 * deviation
    return value if np.ndim(tau) else float(value[0])


def limiting_values(rc: RateCoefficients) -> LimitingValues:
    """Closed-form P→0 and P→∞ limits of (tau1, tau2, a) in ns."""
    k31_inf = rc.k31_0 + rc.d
    return LimitingValues(
        tau1_0=NS_PER_US / (rc.k21 + rc.k23),
        tau2_0=NS_PER_US / rc.k31_0,
        tau2_inf=NS_PER_US / (rc.k23 + k31_inf),
        a_inf=rc.k23 / k31_inf,
    )


def rates_from_limits(lv: LimitingValues) -> RateCoefficients:
    """
    Invert limiting values to (k21, k23, k31_0, d).

    Returns:
        RateCoefficients with c and sigma left at zero

    Raises:
        InvalidLimits: If a derived rate is not positive (d, k23 may be zero)
            or k21 + k23 <= k31_0
    """
    inv_tau2_0 = NS_PER_US / lv.tau2_0
    inv_tau2_inf = NS_PER_US / lv.tau2_inf
    k31_0 = inv_tau2_0
    d = (inv_tau2_inf - (1.0 + lv.a_inf) * inv_tau2_0) / (lv.a_inf + 1.0)
    k23 = inv_tau2_inf - k31_0 - d
    k21 = NS_PER_US / lv.tau1_0 - k23

    if d < 0:
        raise InvalidLimits(f"derived d = {d:.6g} MHz < 0: 1/tau2_inf < (1 + a_inf)/tau2_0")
    if k23 < 0:
        raise InvalidLimits(f"derived k23 = {k23:.6g} MHz < 0")
    if k21 <= 0:
        raise InvalidLimits(f"derived k21 = {k21:.6g} MHz <= 0")
    if not k21 + k23 > k31_0:
        raise InvalidLimits("k21 + k23 > k31_0 is violated by these limits")
    return RateCoefficients(k21=k21, k23=k23, k31_0=k31_0, d=d)


def sigma_constant_rate_model(k21: float, k23: float, k31: float, psat: float) -> float:
    """Pump slope (MHz/µW) of the constant-rate model from the saturation power."""
    if min(k21, k23 + k31, psat) <= 0 or k23 < 0 or k31 <= 0:
        raise InvalidParameters("rates and psat must be > 0")
    return (k23 * k31 + k21 * k31) / ((k23 + k31) * psat)


def constant_rate_coefficients(rc: RateCoefficients, psat: float) -> RateCoefficients:
    """
    Constant-rate model deduced from the same limiting values.

    The de-shelving rate is frozen at its high-power value k31_0 + d and the
    pump slope follows from the saturation power.
    """
    k31 = rc.k31_0 + rc.d
    return RateCoefficients(
        k21=rc.k21,
        k23=rc.k23,
        k31_0=k31,
        sigma=sigma_constant_rate_model(rc.k21, rc.k23, k31, psat),
    )


def steady_state(rc: RateCoefficients, power: float) -> SteadyState:
    """
    Stationary populations at excitation power P (µW, ``math.inf`` allowed).
    """
    if power < 0:
        raise InvalidParameters(f"power must be >= 0, got {power}")
    k31 = deshelving_rate(rc, power)
    if math.isinf(power):
        n2 = 1.0 / (1.0 + rc.k23 / k31)
        return SteadyState(n1=0.0, n2=n2, n3=1.0 - n2)
    ratio_21 = rc.sigma * power / (rc.k21 + rc.k23)
    ratio_31 = ratio_21 * rc.k23 / k31
    total = 1.0 + ratio_21 + ratio_31
    return SteadyState(n1=1.0 / total, n2=ratio_21 / total, n3=ratio_31 / total)


def saturation_curve(i_inf: float, psat: float, c_backgr: float, power: ArrayLike) -> ArrayLike:
    """Detected count rate I = I∞·P/(P+Psat) + c_backgr·P in cps."""
    if i_inf <= 0 or psat <= 0 or c_backgr < 0:
        raise InvalidParameters("i_inf and psat must be > 0, c_backgr >= 0")
    p = np.asarray(power, dtype=float)
    rate = i_inf * p / (p + psat) + c_backgr * p
    return rate if np.ndim(rate) else float(rate)


def _calibration(wavelength_nm: float, calibration: Optional[float]) -> float:
    if calibration is not None:
        if calibration <= 0:
            raise InvalidParameters("calibration must be > 0")
        return calibration
    key = int(round(wavelength_nm))
    if key != wavelength_nm or key not in PHOTON_FLUX_PER_UW:
        known = ", ".join(str(k) for k in sorted(PHOTON_FLUX_PER_UW))
        raise UnknownCalibration(
            f"no photon-flux calibration for {wavelength_nm} nm (known: {known}); "
            "supply one explicitly"
        )
    return PHOTON_FLUX_PER_UW[key]


def power_to_photon_flux(
    power: float, wavelength_nm: float, calibration: Optional[float] = None
) -> float:
    """Photon flux at the focus (photons·s⁻¹·cm⁻²) for an excitation power in µW."""
    return power * _calibration(wavelength_nm, calibration)


def absorption_cross_section(
    sigma: float, wavelength_nm: float, calibration: Optional[float] = None
) -> float:
    """Absorption cross-section in cm² from the pump slope sigma (MHz/µW)."""
    if sigma <= 0:
        raise InvalidParameters(f"sigma must be > 0, got {sigma}")
    return sigma * 1e6 / _calibration(wavelength_nm, calibration)


def intensity_to_photon_flux(intensity_w_cm2: float, wavelength_nm: float) -> float:
    """Photon flux (photons·s⁻¹·cm⁻²) carried by an intensity in W/cm²."""
    photon_energy = constants.h * constants.c / (wavelength_nm * 1e-9)
    return intensity_w_cm2 / photon_energy


def peak_intensity(
    power: float, wavelength_nm: float, calibration: Optional[float] = None
) -> float:
    """Focal intensity in W/cm² for an excitation power in µW."""
    photon_energy = constants.h * constants.c / (wavelength_nm * 1e-9)
    return power_to_photon_flux(power, wavelength_nm, calibration) * photon_energy
