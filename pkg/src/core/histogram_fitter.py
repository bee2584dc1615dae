#!/usr/bin/env python3
"""
Histogram Fitter - damped least squares of coincidence histograms against
the comb coincidence model

Positive scale parameters (tau_F, T_R, omega_c, C1) are fitted in log space,
C2 is clipped at its lower bound of zero, tau0 is fitted directly.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

from src.core.correlation_model import (
    CoincidenceModelParams,
    coincidence_model,
    fwhm_to_resolving_time,
)
from src.core.errors import InvalidParamsError, SingularMatrixError, TooFewPeaksError
from src.core.pair_simulator import Histogram

logger = logging.getLogger(__name__)

PARAM_NAMES = CoincidenceModelParams.NAMES
LOG_PARAMS = (True, True, True, True, False, False)
WEIGHT_SCHEMES = ("poisson", "uniform")

MIN_NONZERO_BINS = 20
DERIVATIVE_STEP = 1e-6
PARAM_TOLERANCE = 1e-8
COST_TOLERANCE = 1e-10
MAX_DAMPING = 1e16

DEFAULT_BOUNDS = {
    "tau_F": (0.0, np.inf),
    "t_r": (0.0, np.inf),
    "omega_c": (0.0, np.inf),
    "c1": (0.0, np.inf),
    "c2": (0.0, np.inf),
    "tau0": (-np.inf, np.inf),
}


@dataclass
class FitProblem:
    histogram: Histogram
    weights: str = "poisson"
    frozen: Tuple[str, ...] = ()
    bounds: Dict[str, Tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    n_window: int = 1
    max_iter: int = 200

    def __post_init__(self):
        if self.weights not in WEIGHT_SCHEMES:
            raise InvalidParamsError(f"weights must be one of {WEIGHT_SCHEMES}, got '{self.weights}'",
                                     field="weights")
        unknown = set(self.frozen) - set(PARAM_NAMES)
        if unknown:
            raise InvalidParamsError(f"unknown parameters to freeze: {sorted(unknown)}", field="frozen")
        self.frozen = tuple(self.frozen)
        if len(set(self.frozen)) == len(PARAM_NAMES):
            raise InvalidParamsError("every parameter is frozen; nothing to fit", field="frozen")
        merged = dict(DEFAULT_BOUNDS)
        for name, (lo, hi) in self.bounds.items():
            if name not in PARAM_NAMES:
                raise InvalidParamsError(f"bounds given for unknown parameter '{name}'", field="bounds")
            if not lo < hi:
                raise InvalidParamsError(f"bounds for {name} are inconsistent: {lo} >= {hi}", field=name)
            merged[name] = (float(lo), float(hi))
        self.bounds = merged
        nonzero = int(np.count_nonzero(self.histogram.counts))
        if nonzero < MIN_NONZERO_BINS:
            raise InvalidParamsError(
                f"histogram has {nonzero} non-empty bins, at least {MIN_NONZERO_BINS} are needed",
                field="histogram",
            )
        if self.max_iter < 1:
            raise InvalidParamsError("max_iter must be >= 1", field="max_iter")

    @property
    def free_mask(self) -> np.ndarray:
        return np.array([name not in self.frozen for name in PARAM_NAMES])

    def weight_vector(self) -> np.ndarray:
        counts = self.histogram.counts.astype(float)
        if self.weights == "poisson":
            return 1.0 / np.maximum(counts, 1.0)
        return np.ones_like(counts)


@dataclass
class FitResult:
    params: CoincidenceModelParams
    covariance: np.ndarray
    reduced_chi2: float
    n_iterations: int
    converged: bool
    residuals: np.ndarray
    weights: np.ndarray
    model: np.ndarray
    centers: np.ndarray
    cost: float
    dof: int
    free: np.ndarray
    damping: float
    n_window: int = 1
    stalled: bool = False  # damping could not find a lower cost

    @property
    def standardized_residuals(self) -> np.ndarray:
        return self.residuals * np.sqrt(self.weights)


@dataclass(frozen=True)
class GoodnessOfFit:
    reduced_chi2: float
    runs: int
    runs_z: float
    runs_p_value: float
    max_abs_residual: float
    max_residual_bin: int
    max_residual_center: float


def _to_internal(params: CoincidenceModelParams) -> np.ndarray:
    values = params.as_array()
    return np.array([math.log(v) if is_log else v for v, is_log in zip(values, LOG_PARAMS)])


def _to_physical(theta: np.ndarray) -> np.ndarray:
    return np.array([math.exp(v) if is_log else v for v, is_log in zip(theta, LOG_PARAMS)])


def _internal_bounds(bounds: Dict[str, Tuple[float, float]]) -> Tuple[np.ndarray, np.ndarray]:
    lower, upper = [], []
    for name, is_log in zip(PARAM_NAMES, LOG_PARAMS):
        lo, hi = bounds[name]
        if is_log:
            lower.append(math.log(lo) if lo > 0 else -np.inf)
            upper.append(math.log(hi) if np.isfinite(hi) else np.inf)
        else:
            lower.append(lo)
            upper.append(hi)
    return np.array(lower), np.array(upper)


class _Objective:
    """Weighted residuals of one problem as a function of internal parameters"""

    def __init__(self, problem: FitProblem, guess: CoincidenceModelParams):
        self.problem = problem
        self.seed = guess.as_array()
        self.frozen = ~problem.free_mask
        self.centers = problem.histogram.centers
        self.counts = problem.histogram.counts.astype(float)
        self.weights = problem.weight_vector()
        self.sqrt_w = np.sqrt(self.weights)
        self.free = np.flatnonzero(problem.free_mask)
        self.lower, self.upper = _internal_bounds(problem.bounds)
        self.typical = np.array([1.0, 1.0, 1.0, 1.0, 1e-2, problem.histogram.bin_width])

    def physical(self, theta: np.ndarray) -> np.ndarray:
        """Physical parameters; frozen ones are the seed values bit for bit"""
        values = _to_physical(theta)
        values[self.frozen] = self.seed[self.frozen]
        return values

    def model(self, theta: np.ndarray) -> np.ndarray:
        params = CoincidenceModelParams.from_array(self.physical(theta))
        return coincidence_model(params, self.centers, self.problem.n_window)

    def residuals(self, theta: np.ndarray) -> np.ndarray:
        return self.sqrt_w * (self.counts - self.model(theta))

    def jacobian(self, theta: np.ndarray) -> np.ndarray:
        """Central differences with relative step 1e-6, one-sided at a bound"""
        columns = []
        for i in self.free:
            h = DERIVATIVE_STEP * max(abs(theta[i]), self.typical[i])
            up, down = theta.copy(), theta.copy()
            up[i] += h
            down[i] -= h
            if down[i] < self.lower[i]:
                down[i] = theta[i]
            if up[i] > self.upper[i]:
                up[i] = theta[i]
            columns.append((self.residuals(up) - self.residuals(down)) / (up[i] - down[i]))
        return np.column_stack(columns)

    def clip(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)


def _check_conditioning(normal: np.ndarray) -> None:
    diagonal = np.diag(normal)
    if np.any(diagonal <= 0) or not np.all(np.isfinite(normal)):
        raise SingularMatrixError("normal matrix has a zero or non-finite diagonal")
    scale = np.sqrt(diagonal)
    correlation = normal / np.outer(scale, scale)
    if np.linalg.cond(correlation) > 1e14:
        raise SingularMatrixError("normal matrix is singular: some parameters are not identifiable")


def fit(problem: FitProblem, guess: CoincidenceModelParams) -> FitResult:
    """Levenberg-Marquardt fit of the coincidence model to a histogram

    Cost is sum_b w_b (counts_b - model_b)^2. A step is accepted only when it
    lowers the cost (damping then shrinks tenfold), otherwise damping grows
    tenfold and the step is retried. Stops when the relative parameter change
    drops below 1e-8 or the relative cost change below 1e-10. When only
    extra damping makes the step that small, or damping runs past 1e16, the
    result is marked stalled and not converged.
    """
    objective = _Objective(problem, guess)
    theta = _to_internal(guess)
    if np.any(theta < objective.lower) or np.any(theta > objective.upper):
        raise InvalidParamsError("initial guess lies outside the bounds", field="guess")

    free = objective.free
    residuals = objective.residuals(theta)
    cost = float(residuals @ residuals)
    damping = 1e-3
    converged = False
    stalled = False
    iteration = 0

    for iteration in range(1, problem.max_iter + 1):
        if cost == 0.0:
            converged = True
            break
        jac = objective.jacobian(theta)
        normal = jac.T @ jac
        gradient = jac.T @ residuals
        _check_conditioning(normal)
        diagonal = np.diag(normal)

        accepted = False
        first_try = True
        while damping <= MAX_DAMPING:
            try:
                step = np.linalg.solve(normal + damping * np.diag(diagonal), -gradient)
            except np.linalg.LinAlgError as e:
                raise SingularMatrixError(f"damped normal equations are singular: {e}")
            trial = theta.copy()
            trial[free] += step
            trial = objective.clip(trial)
            change = np.max(np.abs(trial - theta) / np.maximum(np.abs(theta), objective.typical))
            if change < PARAM_TOLERANCE:
                # a step shrunk only by extra damping says nothing about the minimum
                converged = first_try
                stalled = not first_try
                break
            trial_residuals = objective.residuals(trial)
            trial_cost = float(trial_residuals @ trial_residuals)
            if trial_cost < cost:
                relative_drop = (cost - trial_cost) / cost
                theta, residuals, cost = trial, trial_residuals, trial_cost
                damping = max(damping / 10.0, 1e-12)
                accepted = True
                if relative_drop < COST_TOLERANCE:
                    converged = True
                break
            if trial_cost - cost <= COST_TOLERANCE * cost:
                # cost flat to rounding along the step
                converged = True
                break
            damping *= 10.0
            first_try = False

        logger.debug("iteration %d: cost=%.6g damping=%.1e accepted=%s", iteration, cost, damping, accepted)
        if converged or stalled:
            break
        if not accepted:
            stalled = True
            break

    return _finish(problem, objective, theta, residuals, cost, iteration, converged, damping, stalled)


def _finish(problem: FitProblem, objective: _Objective, theta: np.ndarray, residuals: np.ndarray,
            cost: float, iteration: int, converged: bool, damping: float, stalled: bool = False) -> FitResult:
    free = objective.free
    n_bins = len(objective.counts)
    dof = max(n_bins - len(free), 1)
    reduced = cost / dof

    jac = objective.jacobian(theta)
    normal = jac.T @ jac
    _check_conditioning(normal)
    cov_internal = np.linalg.inv(normal) * reduced
    cov_internal = 0.5 * (cov_internal + cov_internal.T)

    physical = objective.physical(theta)
    derivative = np.array([physical[i] if LOG_PARAMS[i] else 1.0 for i in free])
    covariance = np.zeros((len(PARAM_NAMES), len(PARAM_NAMES)))
    covariance[np.ix_(free, free)] = cov_internal * np.outer(derivative, derivative)

    params = CoincidenceModelParams.from_array(physical)
    model = coincidence_model(params, objective.centers, problem.n_window)
    if converged:
        logger.info("fit converged in %d iterations, reduced chi2 = %.4f", iteration, reduced)
    elif stalled:
        logger.warning("fit stalled after %d iterations at damping %.1e (reduced chi2 = %.4f)",
                       iteration, damping, reduced)
    else:
        logger.warning("fit did not converge after %d iterations (reduced chi2 = %.4f)", iteration, reduced)
    return FitResult(
        params=params,
        covariance=covariance,
        reduced_chi2=reduced,
        n_iterations=iteration,
        converged=converged,
        residuals=objective.counts - model,
        weights=objective.weights,
        model=model,
        centers=objective.centers,
        cost=cost,
        dof=dof,
        free=problem.free_mask,
        damping=damping,
        n_window=problem.n_window,
        stalled=stalled,
    )


def standard_errors(result: FitResult) -> Dict[str, float]:
    variances = np.clip(np.diag(result.covariance), 0.0, None)
    return {name: float(math.sqrt(v)) for name, v in zip(PARAM_NAMES, variances)}


def fitted_curve(result: FitResult, tau: Sequence[float]) -> np.ndarray:
    return np.asarray(coincidence_model(result.params, np.asarray(tau, dtype=float), result.n_window))


def _smooth(counts: np.ndarray) -> np.ndarray:
    padded = np.pad(counts, 1, mode="edge")
    return np.convolve(padded, np.ones(3) / 3.0, mode="valid")


def _half_max_width(values: np.ndarray, index: int, level: float, bin_width: float) -> float:
    """Full width at `level` around values[index], linearly interpolated"""
    left = index
    while left > 0 and values[left - 1] >= level:
        left -= 1
    right = index
    while right < len(values) - 1 and values[right + 1] >= level:
        right += 1
    if left == 0 or right == len(values) - 1:
        raise TooFewPeaksError("tallest peak runs into the edge of the window")
    # fractional crossing positions between the bins either side of the plateau
    lf = (values[left] - level) / (values[left] - values[left - 1])
    rf = (values[right] - level) / (values[right] - values[right + 1])
    return (right - left + lf + rf) * bin_width


def find_peaks(values: np.ndarray, threshold: float, half_window: int) -> np.ndarray:
    """Indices of local maxima above threshold

    A bin is a peak when it is strictly higher than the half_window bins
    before it and at least as high as the half_window bins after it, so the
    earlier of two tied bins wins.
    """
    w = max(int(half_window), 1)
    padded = np.pad(values.astype(float), w, mode="constant", constant_values=-np.inf)
    windows = sliding_window_view(padded, 2 * w + 1)
    left = windows[:, :w].max(axis=1)
    right = windows[:, w + 1:].max(axis=1)
    is_peak = (values > left) & (values >= right) & (values > threshold)
    return np.flatnonzero(is_peak)


def _decay_rate(distance: np.ndarray, heights: np.ndarray, span: float) -> float:
    """Envelope rate from a weighted log-linear fit of peak heights against |tau - tau0|"""
    usable = heights > 0
    if np.count_nonzero(usable) >= 2 and np.ptp(distance[usable]) > 0:
        slope, _ = np.polyfit(distance[usable], np.log(heights[usable]), 1, w=np.sqrt(heights[usable]))
        if np.isfinite(slope) and slope < 0:
            return -float(slope)
    logger.warning("peak heights show no decay; falling back to omega_c = 2 / window span")
    return 2.0 / span


def _linear_amplitudes(h: Histogram, shape: CoincidenceModelParams) -> Tuple[float, float]:
    """Floor and peak amplitude by weighted linear least squares at fixed shape"""
    counts = h.counts.astype(float)
    sqrt_w = 1.0 / np.sqrt(np.maximum(counts, 1.0))
    design = np.column_stack((np.ones_like(counts), coincidence_model(shape, h.centers)))
    (floor, amplitude), *_ = np.linalg.lstsq(design * sqrt_w[:, None], counts * sqrt_w, rcond=None)
    return float(floor), float(amplitude)


def initial_guess(h: Histogram) -> CoincidenceModelParams:
    """Starting point for fit() read off the histogram shape

    The floor is first taken as the median of the lowest fifth of the bins,
    which still carries peak tails; once the peak shape is known the floor and
    C1 are refined by a linear solve and the envelope rate is re-estimated.
    """
    counts = h.counts.astype(float)
    centers = h.centers
    bin_width = h.bin_width
    span = float(centers[-1] - centers[0])

    low = counts[counts <= np.percentile(counts, 20)]
    floor = float(np.median(low))
    smooth = _smooth(counts)
    threshold = floor + 5.0 * math.sqrt(max(floor, 1.0))

    top = int(np.argmax(smooth))
    if smooth[top] <= threshold:
        raise TooFewPeaksError("no peak rises above the accidental floor")
    level = floor + 0.5 * (smooth[top] - floor)
    fwhm = _half_max_width(smooth, top, level, bin_width)

    peaks = find_peaks(smooth, threshold, int(round(fwhm / bin_width)))
    if len(peaks) < 3:
        raise TooFewPeaksError(f"found {len(peaks)} resolvable peaks, need at least 3")
    positions = centers[peaks]
    gaps = np.diff(positions)
    tau_F = float(np.median(gaps))
    tau0 = float(centers[top])

    # refine the spacing by regressing positions on peak order; a missing peak counts twice
    order = np.concatenate(([0.0], np.cumsum(np.rint(gaps / tau_F))))
    if np.ptp(order) > 0:
        tau_F = float(np.polyfit(order, positions, 1)[0])

    distance = np.abs(positions - tau0)
    t_r = fwhm_to_resolving_time(fwhm)
    omega_c = _decay_rate(distance, counts[peaks] - floor, span)

    c1 = max(counts[top] - floor, 1.0)
    c2 = max(floor, 0.0) / c1
    for _ in range(2):
        shape = CoincidenceModelParams(tau_F=tau_F, t_r=t_r, omega_c=omega_c, c1=1.0, c2=0.0, tau0=tau0)
        fitted_floor, amplitude = _linear_amplitudes(h, shape)
        if not amplitude > 0:
            break
        c1, c2 = amplitude, max(fitted_floor, 0.0) / amplitude
        omega_c = _decay_rate(distance, counts[peaks] - max(fitted_floor, 0.0), span)

    guess = CoincidenceModelParams(tau_F=tau_F, t_r=t_r, omega_c=omega_c, c1=c1, c2=c2, tau0=tau0)
    logger.debug("initial guess from %d peaks: %s", len(peaks), guess)
    return guess


def goodness_of_fit(r: FitResult) -> GoodnessOfFit:
    """Reduced chi2, Wald-Wolfowitz runs test on residual signs, worst bin"""
    if not r.converged:
        logger.warning("goodness of fit requested for a non-converged result")
    signs = np.sign(r.residuals)
    signs = signs[signs != 0]
    n_pos = int(np.count_nonzero(signs > 0))
    n_neg = int(np.count_nonzero(signs < 0))
    n = n_pos + n_neg
    runs = int(1 + np.count_nonzero(signs[1:] != signs[:-1])) if n else 0

    if n_pos and n_neg and n > 1:
        mean = 2.0 * n_pos * n_neg / n + 1.0
        variance = 2.0 * n_pos * n_neg * (2.0 * n_pos * n_neg - n) / (n * n * (n - 1.0))
        z = (runs - mean) / math.sqrt(variance) if variance > 0 else 0.0
        p_value = float(2.0 * stats.norm.sf(abs(z)))
    else:
        z, p_value = 0.0, 1.0

    standardized = np.abs(r.standardized_residuals)
    worst = int(np.argmax(standardized))
    return GoodnessOfFit(
        reduced_chi2=float(r.reduced_chi2),
        runs=runs,
        runs_z=float(z),
        runs_p_value=p_value,
        max_abs_residual=float(standardized[worst]),
        max_residual_bin=worst,
        max_residual_center=float(r.centers[worst]),
    )
