"""
Least-squares estimation for saturation curves, g² histograms and the staged
power-dependence fit of the de-shelving model.

All nonlinear fits run Levenberg-Marquardt over the logarithms of positive
parameters with a central-difference Jacobian; reported estimates and
covariances are transformed back to linear parameters.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from .correlation import G2Histogram
from .errors import (
    ComplexEigenvalue,
    InvalidParameters,
    NoConvergence,
    OutOfRange,
    StageDivergence,
)
from .rate_model import (
    G2Shape,
    LimitingValues,
    RateCoefficients,
    exponential_response,
    g2_irf_convolved,
    rates_from_limits,
    shape_from_rates,
    steady_state,
)

logger = logging.getLogger(__name__)

JACOBIAN_STEP = 1e-6
XTOL = 1e-10
FTOL = 1e-12
GTOL = 1e-15
MAX_ITERATIONS = 500
CONDITION_LIMIT = 1e12
# a below this many standard errors counts as no bunching
BUNCHING_SIGMAS = 3.0
# residual returned where the model has no real relaxation times
INFEASIBLE_RESIDUAL = 1e6

ILL_CONDITIONED = "IllConditioned"
BUNCHING_UNRESOLVED = "BunchingUnresolved"
C_UNIDENTIFIABLE = "CUnidentifiable"
# sigma and c were fitted in more than one round
STAGES_ALTERNATED = "StagesAlternated"


@dataclass
class FitResult:
    """Outcome of one least-squares fit."""

    parameters: Dict[str, float]
    covariance: np.ndarray
    residual_norm: float
    n_points: int
    converged: bool
    iterations: int
    flags: List[str] = field(default_factory=list)
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def uncertainties(self) -> Dict[str, float]:
        variances = np.diag(self.covariance)
        return {
            name: float(math.sqrt(v)) if v >= 0 else math.nan
            for name, v in zip(self.parameters, variances)
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "parameters": dict(self.parameters),
            "uncertainties": self.uncertainties,
            "covariance": self.covariance.tolist(),
            "residual_norm": self.residual_norm,
            "n_points": self.n_points,
            "converged": self.converged,
            "iterations": self.iterations,
            "flags": list(self.flags),
            "diagnostics": dict(self.diagnostics),
        }


@dataclass(frozen=True, eq=False)
class PowerSeries:
    """A quantity measured or fitted at a set of excitation powers (µW)."""

    powers: np.ndarray
    values: np.ndarray
    uncertainties: Optional[np.ndarray] = None
    quantity: str = ""

    def __post_init__(self) -> None:
        powers = np.asarray(self.powers, dtype=float)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "powers", powers)
        object.__setattr__(self, "values", values)
        if powers.ndim != 1 or powers.shape != values.shape:
            raise InvalidParameters("powers and values must be 1-D arrays of equal length")
        if powers.size == 0 or np.any(powers <= 0) or np.any(np.diff(powers) <= 0):
            raise InvalidParameters("powers must be positive and strictly increasing")
        if self.uncertainties is not None:
            unc = np.asarray(self.uncertainties, dtype=float)
            if unc.shape != values.shape or np.any(~np.isfinite(unc)) or np.any(unc <= 0):
                raise InvalidParameters("uncertainties must be positive, one per point")
            object.__setattr__(self, "uncertainties", unc)

    @property
    def weights(self) -> np.ndarray:
        if self.uncertainties is None:
            return np.ones_like(self.values)
        return 1.0 / self.uncertainties

    def to_dict(self) -> Dict[str, Any]:
        return {
            "quantity": self.quantity,
            "powers": self.powers.tolist(),
            "values": self.values.tolist(),
            "uncertainties": None if self.uncertainties is None else self.uncertainties.tolist(),
        }


@dataclass(frozen=True, eq=False)
class PowerCurves:
    """Model g² shape parameters over a power grid."""

    powers: np.ndarray
    a: np.ndarray
    tau1: np.ndarray
    tau2: np.ndarray

    def to_dict(self) -> Dict[str, List[float]]:
        return {
            "powers": self.powers.tolist(),
            "a": self.a.tolist(),
            "tau1": self.tau1.tolist(),
            "tau2": self.tau2.tolist(),
        }


@dataclass
class PowerDependenceFit:
    """Result of the staged power-dependence fit."""

    fit: FitResult
    rates: RateCoefficients
    limits: LimitingValues
    tau2_curve: PowerCurves
    refinements: int = 0

    @property
    def flags(self) -> List[str]:
        return self.fit.flags


def _central_jacobian(fun: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    columns = []
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = JACOBIAN_STEP
        columns.append((fun(x + step) - fun(x - step)) / (2.0 * JACOBIAN_STEP))
    return np.column_stack(columns)


def _solve(
    fun: Callable[[np.ndarray], np.ndarray],
    x0: Sequence[float],
    names: Sequence[str],
    absolute_sigma: bool,
    max_iterations: int = MAX_ITERATIONS,
) -> FitResult:
    """Levenberg-Marquardt over log-parameters; ``fun`` returns weighted residuals."""
    start = np.asarray(x0, dtype=float)
    solution = optimize.least_squares(
        fun,
        start,
        jac=lambda x: _central_jacobian(fun, x),
        method="lm",
        xtol=XTOL,
        ftol=FTOL,
        gtol=GTOL,
        max_nfev=max_iterations,
    )
    if solution.status <= 0:
        raise NoConvergence(solution.message, iterations=int(solution.nfev))

    params = np.exp(solution.x)
    jtj = solution.jac.T @ solution.jac
    flags = []
    condition = np.linalg.cond(jtj)
    if not np.isfinite(condition) or condition > CONDITION_LIMIT:
        flags.append(ILL_CONDITIONED)
        logger.warning("Fit of %s is ill-conditioned (cond = %.3g)", ", ".join(names), condition)

    ssr = float(solution.fun @ solution.fun)
    covariance = np.linalg.pinv(jtj)
    if not absolute_sigma:
        covariance = covariance * ssr / max(solution.fun.size - start.size, 1)
    covariance = covariance * np.outer(params, params)

    logger.debug("Converged after %d evaluations: %s", solution.nfev, solution.message)
    return FitResult(
        parameters={name: float(value) for name, value in zip(names, params)},
        covariance=covariance,
        residual_norm=ssr,
        n_points=int(solution.fun.size),
        converged=True,
        iterations=int(solution.nfev),
        flags=flags,
    )


def _half_max_power(powers: np.ndarray, values: np.ndarray) -> float:
    half = 0.5 * values.max()
    above = np.flatnonzero(values >= half)
    idx = int(above[0]) if above.size else powers.size - 1
    if idx == 0:
        return float(powers[0])
    lo, hi = idx - 1, idx
    frac = (half - values[lo]) / (values[hi] - values[lo])
    return float(powers[lo] + frac * (powers[hi] - powers[lo]))


def fit_saturation(data: PowerSeries) -> FitResult:
    """
    Fit I(P) = I∞·P/(P+Psat) + c_backgr·P to a count-rate series.

    Psat is found by Levenberg-Marquardt; for each trial Psat, I∞ and c_backgr
    follow from a non-negative linear least-squares solve.

    Args:
        data: Count rates (cps) versus power (µW), at least 4 points

    Returns:
        FitResult with parameters I_inf, Psat and c_backgr

    Raises:
        InvalidParameters: With fewer than 4 points
        NoConvergence: If the Psat search does not converge
    """
    if data.powers.size < 4:
        raise InvalidParameters("a saturation fit needs at least 4 points")
    powers, values, weights = data.powers, data.values, data.weights

    def linear_part(psat: float) -> Tuple[np.ndarray, np.ndarray]:
        design = np.column_stack([powers / (powers + psat), powers]) * weights[:, None]
        coeffs, _ = optimize.nnls(design, values * weights)
        return coeffs, design @ coeffs - values * weights

    def residuals(x: np.ndarray) -> np.ndarray:
        return linear_part(math.exp(x[0]))[1]

    psat0 = _half_max_power(powers, values)
    fit = _solve(
        residuals, [math.log(psat0)], ["Psat"], absolute_sigma=data.uncertainties is not None
    )
    psat = fit.parameters["Psat"]
    (i_inf, c_backgr), res = linear_part(psat)
    if i_inf <= 0:
        raise NoConvergence("saturation fit drove I_inf to zero")

    jac = np.column_stack(
        [
            powers / (powers + psat),
            -i_inf * powers / (powers + psat) ** 2,
            powers,
        ]
    ) * weights[:, None]
    ssr = float(res @ res)
    covariance = np.linalg.pinv(jac.T @ jac)
    if data.uncertainties is None:
        covariance *= ssr / max(powers.size - 3, 1)

    flags = list(fit.flags)
    if np.linalg.cond(jac.T @ jac) > CONDITION_LIMIT and ILL_CONDITIONED not in flags:
        flags.append(ILL_CONDITIONED)
    logger.info("Saturation fit: I_inf=%.4g cps, Psat=%.4g µW, c=%.4g", i_inf, psat, c_backgr)
    return FitResult(
        parameters={"I_inf": float(i_inf), "Psat": psat, "c_backgr": float(c_backgr)},
        covariance=covariance,
        residual_norm=ssr,
        n_points=int(powers.size),
        converged=True,
        iterations=fit.iterations,
        flags=flags,
    )


def signal_fraction(fit: FitResult, power: Any) -> Any:
    """pe(P): fraction of detected counts that stem from the emitter."""
    p = np.asarray(power, dtype=float)
    signal = fit.parameters["I_inf"] * p / (p + fit.parameters["Psat"])
    total = signal + fit.parameters["c_backgr"] * p
    pe = np.where(total > 0, signal / np.where(total > 0, total, 1.0), 1.0)
    return pe if np.ndim(pe) else float(pe)


def _grid_guess(
    x: np.ndarray, y: np.ndarray, w: np.ndarray, pe: float, irf_sigma: float, bin_width: float
) -> Tuple[float, float, float, float]:
    """Best (a, tau1, tau2) on a log grid with a solved linearly; returns a's standard error too."""
    span = float(np.abs(x).max())
    tau1_grid = np.geomspace(max(bin_width / 4.0, 1e-3), span / 3.0, 40)
    tau2_grid = np.geomspace(bin_width, 20.0 * span, 50)
    w2 = w**2
    responses2 = np.array([exponential_response(x, t, irf_sigma) for t in tau2_grid])

    best = (math.inf, 0.0, float(tau1_grid[0]), float(tau2_grid[-1]), math.inf)
    for tau1 in tau1_grid:
        e1 = exponential_response(x, tau1, irf_sigma)
        target = y - 1.0 + pe**2 * e1
        basis = pe**2 * (responses2 - e1)
        norm = (w2 * basis**2).sum(axis=1)
        valid = (tau2_grid > 1.2 * tau1) & (norm > 0)
        if not valid.any():
            continue
        a = np.where(valid, (w2 * target * basis).sum(axis=1) / np.where(norm > 0, norm, 1.0), 0.0)
        a = np.maximum(a, 0.0)
        chi2 = (w2 * (target - a[:, None] * basis) ** 2).sum(axis=1)
        chi2 = np.where(valid, chi2, np.inf)
        k = int(np.argmin(chi2))
        if chi2[k] < best[0]:
            best = (float(chi2[k]), float(a[k]), float(tau1), float(tau2_grid[k]), float(norm[k]))
    _, a, tau1, tau2, norm = best
    return a, tau1, tau2, 1.0 / math.sqrt(norm) if norm > 0 else math.inf


def _with_tau2(gap_fit: FitResult) -> FitResult:
    """Map a fit over (a, tau1, gap) to (a, tau1, tau2 = tau1 + gap)."""
    p = gap_fit.parameters
    jac = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 1.0]])
    gap_fit.parameters = {"a": p["a"], "tau1": p["tau1"], "tau2": p["tau1"] + p["gap"]}
    gap_fit.covariance = jac @ gap_fit.covariance @ jac.T
    return gap_fit


def _g2_model(
    a: float, tau1: float, tau2: float, pe: float, irf_sigma: float, x: np.ndarray
) -> np.ndarray:
    shape = G2Shape(a=a, tau1=tau1, tau2=tau2, degenerate=True)
    return g2_irf_convolved(shape, pe, irf_sigma, x)


def fit_g2(
    hist: G2Histogram,
    pe: float = 1.0,
    irf_sigma: float = 0.0,
    initial: Optional[G2Shape] = None,
) -> FitResult:
    """
    Fit the background-corrected, IRF-convolved three-level g² to a histogram.

    Args:
        hist: Coincidence histogram
        pe: Fixed emitter fraction of detected photons
        irf_sigma: Fixed instrument response width in ns
        initial: Starting shape; a grid search is used when omitted

    Returns:
        FitResult with parameters a, tau1, tau2 (ns). When the bunching is not
        resolved the two-level form is fitted instead, a = 0, tau2 = nan and
        the BunchingUnresolved flag is set.

    Raises:
        NoConvergence: If the fit does not converge
    """
    x = hist.centers
    y = hist.normalized
    sigma_y = np.sqrt(np.maximum(hist.counts, 1.0)) / hist.norm_constant
    w = 1.0 / sigma_y

    if initial is None:
        a0, tau1_0, tau2_0, a_err = _grid_guess(x, y, w, pe, irf_sigma, hist.bin_width)
    else:
        tau1_0, tau2_0 = sorted((initial.tau1, initial.tau2))
        a0, a_err = initial.a, 0.0
    resolved = a0 > BUNCHING_SIGMAS * a_err and a0 > 0

    result = None
    if resolved:

        # tau2 = tau1 + gap keeps the bunching slower than the antibunching
        def residuals(logp: np.ndarray) -> np.ndarray:
            a, tau1, gap = np.exp(logp)
            return (_g2_model(a, tau1, tau1 + gap, pe, irf_sigma, x) - y) * w

        gap0 = max(tau2_0 - tau1_0, 0.2 * tau1_0)
        try:
            result = _with_tau2(
                _solve(
                    residuals,
                    np.log([a0, tau1_0, gap0]),
                    ["a", "tau1", "gap"],
                    absolute_sigma=True,
                )
            )
        except NoConvergence:
            if a0 > 10 * BUNCHING_SIGMAS * a_err:
                raise
            logger.warning("Three-level g2 fit did not converge; trying the two-level form")
        else:
            a_sd = result.uncertainties["a"]
            if result.parameters["a"] <= BUNCHING_SIGMAS * a_sd:
                result = None

    if result is None:

        def two_level(logp: np.ndarray) -> np.ndarray:
            return (_g2_model(0.0, math.exp(logp[0]), math.inf, pe, irf_sigma, x) - y) * w

        single = _solve(two_level, [math.log(tau1_0)], ["tau1"], absolute_sigma=True)
        covariance = np.zeros((3, 3))
        covariance[1, 1] = single.covariance[0, 0]
        result = FitResult(
            parameters={"a": 0.0, "tau1": single.parameters["tau1"], "tau2": math.nan},
            covariance=covariance,
            residual_norm=single.residual_norm,
            n_points=single.n_points,
            converged=True,
            iterations=single.iterations,
            flags=single.flags + [BUNCHING_UNRESOLVED],
        )
        logger.warning("Bunching unresolved; reporting the two-level antibunching time")

    p = result.parameters
    tau2 = p["tau2"] if math.isfinite(p["tau2"]) else math.inf
    centre = int(np.argmin(np.abs(x)))
    fit_zero = _g2_model(p["a"], p["tau1"], tau2, pe, irf_sigma, np.array([0.0]))[0]
    result.diagnostics = {
        "delta_g2_0": float(abs(fit_zero - y[centre])),
        "g2_0_fit": float(fit_zero),
        "reduced_chi2": result.residual_norm / max(result.n_points - 3, 1),
        "pe": pe,
        "irf_sigma": irf_sigma,
    }
    return result


def predict_curves(rc: RateCoefficients, powers: Sequence[float]) -> PowerCurves:
    """(a, tau1, tau2) from the forward map at each power."""
    grid = np.asarray(powers, dtype=float)
    shapes = [shape_from_rates(rc, p) for p in grid]
    return PowerCurves(
        powers=grid,
        a=np.array([s.a for s in shapes]),
        tau1=np.array([s.tau1 for s in shapes]),
        tau2=np.array([s.tau2 for s in shapes]),
    )


def constant_rate_prediction(
    k21: float, k23: float, k31: float, sigma: float, powers: Sequence[float]
) -> PowerCurves:
    """Curves of the three-level model with a power-independent de-shelving rate."""
    if min(k21, k31, sigma) <= 0 or k23 < 0:
        raise InvalidParameters("rates and sigma must be > 0")
    rc = RateCoefficients(k21=k21, k23=k23, k31_0=k31, sigma=sigma)
    return predict_curves(rc, powers)


def estimate_limits(
    series_a: PowerSeries,
    series_tau1: PowerSeries,
    series_tau2: PowerSeries,
    n_low: int = 2,
    n_high: int = 3,
) -> LimitingValues:
    """
    Plateau estimates of the limiting values.

    tau2_0 is the mean of the lowest-power n_low points, tau2_inf and a_inf
    the means of the highest-power n_high points. tau1_0 comes from a straight
    line through 1/tau1 over the lowest three powers, extrapolated to P = 0.
    """
    tau2_0 = float(series_tau2.values[:n_low].mean())
    tau2_inf = float(series_tau2.values[-n_high:].mean())
    a_inf = max(float(series_a.values[-n_high:].mean()), 0.0)

    n_fit = min(3, series_tau1.powers.size)
    if n_fit >= 2:
        slope, intercept = np.polyfit(
            series_tau1.powers[:n_fit], 1.0 / series_tau1.values[:n_fit], 1
        )
    else:
        intercept = 0.0
    tau1_0 = 1.0 / intercept if intercept > 0 else float(series_tau1.values[0])
    return LimitingValues(tau1_0=tau1_0, tau2_0=tau2_0, tau2_inf=tau2_inf, a_inf=a_inf)


def _series_model(
    base: RateCoefficients, sigma: float, c: float, powers: np.ndarray, quantity: str
) -> np.ndarray:
    rc = base.with_updates(sigma=sigma, c=c)
    return np.array([getattr(shape_from_rates(rc, p), quantity) for p in powers])


def _fit_stage(
    stage: str,
    series: PowerSeries,
    model: Callable[[float], np.ndarray],
    grid: np.ndarray,
) -> FitResult:
    """One-parameter stage fit, started from the best point of a log grid."""

    def residuals(x: np.ndarray) -> np.ndarray:
        try:
            return (model(math.exp(x[0])) - series.values) * series.weights
        except ComplexEigenvalue:
            return np.full(series.values.size, INFEASIBLE_RESIDUAL)

    scores = [float(np.sum(residuals(np.array([math.log(g)])) ** 2)) for g in grid]
    start = math.log(grid[int(np.argmin(scores))])
    try:
        return _solve(
            residuals, [start], [stage], absolute_sigma=series.uncertainties is not None
        )
    except NoConvergence as exc:
        raise StageDivergence(stage, str(exc)) from exc


def _fit_sigma_and_c(
    base: RateCoefficients,
    series_a: PowerSeries,
    series_tau1: PowerSeries,
    c_start: float,
    max_rounds: int,
) -> Tuple[FitResult, Optional[FitResult], int]:
    """sigma on tau1(P) with c held, then c on a(P) with sigma held; repeated up to max_rounds."""
    sigma_grid = np.geomspace(1e-3, 1e3, 61)
    powers = np.concatenate([series_a.powers, series_tau1.powers])
    c_grid = np.geomspace(powers.min() / 100.0, powers.max() * 100.0, 61)

    c = 0.0 if base.d == 0 else c_start
    sigma_prev = math.nan
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        sigma_fit = _fit_stage(
            "sigma",
            series_tau1,
            lambda s, c=c: _series_model(base, s, c, series_tau1.powers, "tau1"),
            sigma_grid,
        )
        sigma = sigma_fit.parameters["sigma"]
        if base.d == 0:
            return sigma_fit, None, rounds
        c_fit = _fit_stage(
            "c",
            series_a,
            lambda cc, s=sigma: _series_model(base, s, cc, series_a.powers, "a"),
            c_grid,
        )
        c = c_fit.parameters["c"]
        if abs(sigma - sigma_prev) <= 1e-8 * sigma:
            break
        sigma_prev = sigma
    return sigma_fit, c_fit, rounds


def _endpoint_mean(values: np.ndarray, low: bool, n: int) -> float:
    return float(values[:n].mean() if low else values[-n:].mean())


def _refine_limits(
    lv: LimitingValues,
    rc: RateCoefficients,
    series_a: PowerSeries,
    series_tau1: PowerSeries,
    series_tau2: PowerSeries,
) -> LimitingValues:
    """Scale each limit by the data/model ratio of the plateau it was read from."""

    def ratio(series: PowerSeries, quantity: str, low: bool, n: int) -> float:
        model = _series_model(rc, rc.sigma, rc.c, series.powers, quantity)
        predicted = _endpoint_mean(model, low, n)
        observed = _endpoint_mean(series.values, low, n)
        return observed / predicted if predicted > 0 and observed > 0 else 1.0

    return LimitingValues(
        tau1_0=lv.tau1_0 * ratio(series_tau1, "tau1", True, 3),
        tau2_0=lv.tau2_0 * ratio(series_tau2, "tau2", True, 2),
        tau2_inf=lv.tau2_inf * ratio(series_tau2, "tau2", False, 3),
        a_inf=lv.a_inf * ratio(series_a, "a", False, 3),
    )


def fit_power_dependence(
    series_a: PowerSeries,
    series_tau1: PowerSeries,
    series_tau2: PowerSeries,
    lv: Optional[LimitingValues] = None,
    c0: Optional[float] = None,
    max_rounds: int = 20,
    max_refinements: int = 50,
    refinement_tol: float = 1e-8,
    single_pass: bool = False,
) -> PowerDependenceFit:
    """
    Staged fit of the de-shelving model to a(P), tau1(P) and tau2(P).

    Stage 1 inverts the limiting values to k21, k23, k31_0 and d. Stage 2 fits
    sigma on tau1(P) with c held; stage 3 holds sigma and fits c on a(P).
    Stages 2 and 3 alternate until sigma settles and the result carries the
    StagesAlternated flag; with single_pass each runs once, c held at c0 while
    sigma is fitted. Stage 4 predicts tau2(P).
    When lv is not supplied it is estimated from the series plateaus and then
    refined until the fitted model reproduces those plateaus.

    Args:
        series_a: Bunching amplitude versus power
        series_tau1: Antibunching time (ns) versus power
        series_tau2: Bunching time (ns) versus power
        lv: Limiting values; estimated when omitted
        c0: Starting value for c (µW); geometric mean of the powers by default
        single_pass: Fit sigma and then c once instead of alternating

    Returns:
        PowerDependenceFit with sigma and c, the full RateCoefficients and the
        predicted tau2 curve

    Raises:
        InvalidLimits: If the limits do not invert to positive rates
        StageDivergence: If a stage fit fails
    """
    refine = lv is None
    if lv is None:
        lv = estimate_limits(series_a, series_tau1, series_tau2)
    all_powers = np.concatenate([series_a.powers, series_tau1.powers, series_tau2.powers])
    c_start = c0 if c0 is not None else float(np.exp(np.mean(np.log(all_powers))))

    refinements = 0
    while True:
        base = rates_from_limits(lv)
        sigma_fit, c_fit, rounds = _fit_sigma_and_c(
            base, series_a, series_tau1, c_start, 1 if single_pass else max_rounds
        )
        sigma = sigma_fit.parameters["sigma"]
        c = c_fit.parameters["c"] if c_fit is not None else 0.0
        rc = base.with_updates(sigma=sigma, c=c)
        if not refine or refinements >= max_refinements:
            break
        updated = _refine_limits(lv, rc, series_a, series_tau1, series_tau2)
        change = max(
            abs(getattr(updated, name) / getattr(lv, name) - 1.0)
            for name in ("tau1_0", "tau2_0", "tau2_inf")
        )
        if lv.a_inf > 0:
            change = max(change, abs(updated.a_inf / lv.a_inf - 1.0))
        lv = updated
        refinements += 1
        c_start = c if c > 0 else c_start
        if change < refinement_tol:
            break
    if refine and refinements >= max_refinements:
        logger.warning("Limit refinement stopped after %d rounds", refinements)

    flags = list(sigma_fit.flags)
    variances = [sigma_fit.covariance[0, 0], 0.0]
    iterations = sigma_fit.iterations
    residual = sigma_fit.residual_norm
    n_points = sigma_fit.n_points
    if c_fit is None:
        flags.append(C_UNIDENTIFIABLE)
        logger.warning("d = 0: the de-shelving saturation power c is not identifiable")
    else:
        flags.extend(f for f in c_fit.flags if f not in flags)
        variances[1] = c_fit.covariance[0, 0]
        if rounds > 1:
            flags.append(STAGES_ALTERNATED)
        iterations += c_fit.iterations
        residual += c_fit.residual_norm
        n_points += c_fit.n_points

    dense = np.geomspace(all_powers.min() / 10.0, all_powers.max() * 10.0, 200)
    fit = FitResult(
        parameters={"sigma": sigma, "c": c},
        covariance=np.diag(variances),
        residual_norm=residual,
        n_points=n_points,
        converged=True,
        iterations=iterations,
        flags=flags,
        diagnostics={"limits": lv.to_dict(), "refinements": refinements, "stage_rounds": rounds},
    )
    logger.info("Power-dependence fit: sigma=%.4g MHz/µW, c=%.4g µW", sigma, c)
    return PowerDependenceFit(
        fit=fit,
        rates=rc,
        limits=lv,
        tau2_curve=predict_curves(rc, dense),
        refinements=refinements,
    )


def series_from_fits(
    powers: Sequence[float], fits: Sequence[FitResult]
) -> Tuple[PowerSeries, PowerSeries, PowerSeries]:
    """
    Collect per-power g² fits into a, tau1 and tau2 series.

    Points whose parameter is undefined (unresolved bunching) are left out of
    the a and tau2 series. Missing or zero uncertainties are replaced by the
    median of the valid ones in the same series.
    """
    out = []
    for name in ("a", "tau1", "tau2"):
        rows = [
            (p, f.parameters[name], f.uncertainties[name])
            for p, f in zip(powers, fits)
            if math.isfinite(f.parameters[name])
            and not (name != "tau1" and BUNCHING_UNRESOLVED in f.flags)
        ]
        if not rows:
            raise InvalidParameters(f"no power point has a defined {name}")
        grid, values, unc = (np.array(col, dtype=float) for col in zip(*rows))
        valid = np.isfinite(unc) & (unc > 0)
        if valid.all():
            uncertainties: Optional[np.ndarray] = unc
        elif valid.any():
            uncertainties = np.where(valid, unc, np.median(unc[valid]))
        else:
            uncertainties = None
        out.append(PowerSeries(grid, values, uncertainties, quantity=name))
    return out[0], out[1], out[2]


def estimate_quantum_efficiency(
    i_inf: float, rc: RateCoefficients, eta_det_int: float, eta_coll: float
) -> float:
    """
    Quantum efficiency from the saturated count rate.

    ηqe = I∞ / (ηdet_int · ηcoll · k21 · N2∞), with N2∞ the excited-state
    population at infinite power.

    Raises:
        OutOfRange: If the result exceeds 1
    """
    for name, value in (("eta_det_int", eta_det_int), ("eta_coll", eta_coll)):
        if not 0.0 < value <= 1.0:
            raise InvalidParameters(f"{name} must lie in (0, 1], got {value}")
    if i_inf < 0:
        raise InvalidParameters("i_inf must be >= 0")
    n2_inf = steady_state(rc, math.inf).n2
    eta_qe = i_inf / (eta_det_int * eta_coll * rc.k21 * 1e6 * n2_inf)
    if eta_qe > 1.0:
        raise OutOfRange(f"quantum efficiency {eta_qe:.3g} > 1: inputs are inconsistent")
    return eta_qe

