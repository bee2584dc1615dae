#!/usr/bin/env python3
"""
Correlation Model - analytic layer for multimode photon pairs from a
degenerate OPO below threshold

Internal units are seconds for times and rad/s for angular rates. The
boundary layers (config, CLI, files) convert from ns / ps / MHz.
"""

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike
from scipy import integrate
from scipy.optimize import brentq

from src.core.constants import (
    COMB_TAIL_TOLERANCE,
    FEJER_SERIES_THRESHOLD,
    LN2,
    SPEED_OF_LIGHT,
    TWO_PI,
)
from src.core.errors import (
    InconsistentInputsError,
    InvalidGeometryError,
    InvalidParamsError,
    QuadratureError,
)

logger = logging.getLogger(__name__)

Scalar = Union[float, np.ndarray]

FAR_BELOW_THRESHOLD = 0.01


def _as_output(values: np.ndarray, like: ArrayLike) -> Scalar:
    """Return a Python float for scalar input, an array otherwise"""
    if np.ndim(like) == 0:
        return float(values)
    return values


@dataclass(frozen=True)
class OpoParams:
    """Physical cavity and pump parameters

    gamma1 and gamma2 are the output-coupler and loss couplings, epsilon the
    single-pass parametric amplitude gain, all as angular rates. omega0 is the
    degenerate carrier and is kept as metadata only.
    """

    gamma1: float
    gamma2: float
    epsilon: float
    omega_F: float
    n_modes_half: int
    omega0: float = 0.0

    def __post_init__(self):
        if not self.gamma1 > 0:
            raise InvalidParamsError(f"gamma1 must be > 0, got {self.gamma1}", field="gamma1")
        if not self.gamma2 >= 0:
            raise InvalidParamsError(f"gamma2 must be >= 0, got {self.gamma2}", field="gamma2")
        if not self.epsilon >= 0:
            raise InvalidParamsError(f"epsilon must be >= 0, got {self.epsilon}", field="epsilon")
        if not self.omega_F > 0:
            raise InvalidParamsError(f"omega_F must be > 0, got {self.omega_F}", field="omega_F")
        if int(self.n_modes_half) != self.n_modes_half or self.n_modes_half < 0:
            raise InvalidParamsError(
                f"n_modes_half must be a non-negative integer, got {self.n_modes_half}",
                field="n_modes_half",
            )
        if self.threshold_ratio >= 1.0:
            raise InvalidParamsError(
                f"OPO at or above threshold: 2*epsilon/omega_c = {self.threshold_ratio:.3f}",
                field="epsilon",
            )

    @classmethod
    def from_cavity(cls, omega_c: float, tau_F: float, escape_efficiency: float,
                    threshold_ratio: float, n_modes_half: int) -> "OpoParams":
        """Build parameters from bandwidth, round-trip time, F/F0 and 2*epsilon/omega_c"""
        if not 0 < escape_efficiency <= 1:
            raise InvalidParamsError("escape efficiency must lie in (0, 1]", field="escape_efficiency")
        if not omega_c > 0 or not tau_F > 0:
            raise InvalidParamsError("omega_c and tau_F must be positive")
        gamma1 = escape_efficiency * omega_c
        return cls(
            gamma1=gamma1,
            gamma2=omega_c - gamma1,
            epsilon=0.5 * threshold_ratio * omega_c,
            omega_F=TWO_PI / tau_F,
            n_modes_half=n_modes_half,
        )

    @property
    def omega_c(self) -> float:
        return self.gamma1 + self.gamma2

    @property
    def finesse_ratio(self) -> float:
        """F/F0, the output-coupler escape efficiency"""
        return self.gamma1 / (self.gamma1 + self.gamma2)

    @property
    def tau_F(self) -> float:
        return TWO_PI / self.omega_F

    @property
    def n_modes(self) -> int:
        return 2 * int(self.n_modes_half) + 1

    @property
    def threshold_ratio(self) -> float:
        return 2.0 * self.epsilon / (self.gamma1 + self.gamma2)

    def is_far_below_threshold(self) -> bool:
        return self.threshold_ratio ** 2 < FAR_BELOW_THRESHOLD


@dataclass(frozen=True)
class SpectralCoefficients:
    omega: Scalar
    G1: Scalar
    g1: Scalar
    G2: Scalar
    g2: Scalar

    def unitarity_defect(self) -> Scalar:
        """| |G1|^2 + |G2|^2 - 1 |, zero up to rounding"""
        return np.abs(np.abs(self.G1) ** 2 + np.abs(self.G2) ** 2 - 1.0)


@dataclass(frozen=True)
class JitterModel:
    """Double-exponential detector timing jitter with FWHM t_r"""

    t_r: float

    def __post_init__(self):
        if not self.t_r > 0:
            raise InvalidParamsError(f"resolving time must be > 0, got {self.t_r}", field="t_r")

    @property
    def rate(self) -> float:
        return 2.0 * LN2 / self.t_r

    def density(self, tau: ArrayLike) -> Scalar:
        tau = np.asarray(tau, dtype=float)
        return _as_output((LN2 / self.t_r) * np.exp(-self.rate * np.abs(tau)), tau)

    def autocorrelation(self, delta: ArrayLike) -> Scalar:
        """Closed form of the integral of p(t) p(t + delta) over t"""
        delta = np.asarray(delta, dtype=float)
        value = (LN2 / (2.0 * self.t_r)) * peak_shape(delta, self.t_r)
        return _as_output(np.asarray(value), delta)

    def normalization_numeric(self) -> float:
        # integrate in units of 1/rate so quad sees O(1) numbers
        f = lambda u: self.density(u / self.rate) / self.rate
        left, _ = integrate.quad(f, -np.inf, 0.0, epsabs=0.0, epsrel=1e-12)
        right, _ = integrate.quad(f, 0.0, np.inf, epsabs=0.0, epsrel=1e-12)
        return left + right

    def autocorrelation_numeric(self, delta: float) -> float:
        b = self.rate
        shift = b * float(delta)

        def integrand(u):
            return self.density(u / b) * self.density(u / b + delta) / b

        lo, hi = sorted((0.0, -shift))
        total = 0.0
        for a, c in ((-np.inf, lo), (lo, hi), (hi, np.inf)):
            if a == c:
                continue
            value, _ = integrate.quad(integrand, a, c, epsabs=0.0, epsrel=1e-12, limit=200)
            total += value
        return total


@dataclass(frozen=True)
class CoincidenceModelParams:
    """The six parameters of the coincidence-count model"""

    tau_F: float
    t_r: float
    omega_c: float
    c1: float
    c2: float
    tau0: float

    NAMES = ("tau_F", "t_r", "omega_c", "c1", "c2", "tau0")

    def __post_init__(self):
        for name in ("tau_F", "t_r", "omega_c", "c1"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise InvalidParamsError(f"{name} must be > 0, got {value}", field=name)
        if not (np.isfinite(self.c2) and self.c2 >= 0):
            raise InvalidParamsError(f"c2 must be >= 0, got {self.c2}", field="c2")
        if not np.isfinite(self.tau0):
            raise InvalidParamsError("tau0 must be finite", field="tau0")

    @property
    def is_resolvable(self) -> bool:
        """Comb peaks are visible only when T_R < tau_F"""
        return self.t_r < self.tau_F

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in self.NAMES], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "CoincidenceModelParams":
        return cls(*(float(v) for v in values))

    def replace(self, **changes) -> "CoincidenceModelParams":
        data = {name: getattr(self, name) for name in self.NAMES}
        data.update(changes)
        return CoincidenceModelParams(**data)


@dataclass(frozen=True)
class LossReport:
    finesse: float
    total_loss: float
    other_loss: float
    output_coupler: float


def spectral_coefficients(p: OpoParams, omega: ArrayLike) -> SpectralCoefficients:
    """Evaluate G1, g1, G2, g2 at offset omega from the degenerate frequency"""
    if not p.gamma1 > 0:
        raise InvalidParamsError("gamma1 must be > 0", field="gamma1")
    omega = np.asarray(omega, dtype=float)
    denom = p.gamma1 + p.gamma2 - 2j * omega
    root = math.sqrt(p.gamma1 * p.gamma2)
    G1 = (p.gamma1 - p.gamma2 + 2j * omega) / denom
    g1 = 4.0 * p.epsilon * p.gamma1 / denom ** 2
    G2 = 2.0 * root / denom
    g2 = 4.0 * p.epsilon * root / denom ** 2
    if omega.ndim == 0:
        return SpectralCoefficients(float(omega), complex(G1), complex(g1), complex(G2), complex(g2))
    return SpectralCoefficients(omega, G1, g1, G2, g2)


def fejer_comb(omega_F: float, n_half: int, tau: ArrayLike) -> Scalar:
    """sin^2[(2N+1) x] / sin^2(x) with x = omega_F tau / 2

    Continuous everywhere: within |sin x| < 1e-6 of a removable singularity the
    ratio is replaced by its series M^2 [1 - (M^2 - 1) d^2 / 3], d the
    distance of x from the nearest multiple of pi.
    """
    if n_half < 0 or not omega_F > 0:
        raise InvalidParamsError("fejer_comb needs n_half >= 0 and omega_F > 0")
    tau = np.asarray(tau, dtype=float)
    m = 2 * int(n_half) + 1
    x = 0.5 * omega_F * tau
    s = np.sin(x)
    near = np.abs(s) < FEJER_SERIES_THRESHOLD
    out = np.empty_like(x, dtype=float)

    far = ~near
    out[far] = (np.sin(m * x[far]) / s[far]) ** 2

    d = x[near] - np.pi * np.rint(x[near] / np.pi)
    out[near] = m * m * (1.0 - (m * m - 1.0) * d * d / 3.0)
    return _as_output(out, tau)


def gamma_exact(p: OpoParams, tau: ArrayLike) -> Scalar:
    """Intensity correlation of the OPO output, higher-order terms in epsilon retained"""
    tau = np.asarray(tau, dtype=float)
    r = p.threshold_ratio
    prefactor = p.epsilon ** 2 * p.finesse_ratio ** 2
    floor = (r * p.n_modes) ** 2
    comb = np.exp(-p.omega_c * np.abs(tau)) * fejer_comb(p.omega_F, p.n_modes_half, tau)
    return _as_output(prefactor * (floor + comb * (1.0 + r * r)), tau)


def peak_shape(delta: ArrayLike, t_r: float) -> Scalar:
    """(1 + u) exp(-u) with u = 2 |delta| ln2 / t_r"""
    u = 2.0 * LN2 * np.abs(np.asarray(delta, dtype=float)) / t_r
    return (1.0 + u) * np.exp(-u)


def peak_half_width_parameter() -> float:
    """Root u* of (1 + u) exp(-u) = 1/2"""
    return brentq(lambda u: (1.0 + u) * math.exp(-u) - 0.5, 0.5, 5.0, xtol=1e-14)


def fwhm_to_resolving_time(fwhm: float) -> float:
    """Invert the peak FWHM, u* t_r / ln2, back to the jitter FWHM t_r"""
    return fwhm * LN2 / peak_half_width_parameter()


def _comb_peak_sum(rel: np.ndarray, tau_F: float, t_r: float, n_window: int) -> np.ndarray:
    """Sum of peak_shape(rel - n tau_F) over n, window auto-extended

    Starts from |n - n_nearest| <= n_window and keeps adding the next pair of
    peaks until a geometric bound on the dropped tail falls below
    COMB_TAIL_TOLERANCE of the retained sum.
    """
    n_center = np.rint(rel / tau_F)
    total = peak_shape(rel - n_center * tau_F, t_r)
    for k in range(1, n_window + 1):
        total = total + peak_shape(rel - (n_center + k) * tau_F, t_r)
        total = total + peak_shape(rel - (n_center - k) * tau_F, t_r)

    # successive peaks shrink at least by q = (1 + d) exp(-d), d = 2 ln2 tau_F / t_r
    d = 2.0 * LN2 * tau_F / t_r
    q = (1.0 + d) * math.exp(-d)
    k = n_window
    while True:
        k += 1
        nxt = peak_shape(rel - (n_center + k) * tau_F, t_r) + peak_shape(rel - (n_center - k) * tau_F, t_r)
        if np.all(nxt / (1.0 - q) <= COMB_TAIL_TOLERANCE * total):
            break
        total = total + nxt
    return total


def coincidence_model(m: CoincidenceModelParams, tau: ArrayLike, n_window: int = 1) -> Scalar:
    """Expected coincidence counts at delay tau

    C1 [C2 + exp(-omega_c |tau - tau0|) sum_n peak(tau - n tau_F - tau0)],
    with the envelope kept outside the sum.
    """
    if n_window < 1:
        raise InvalidParamsError(f"n_window must be >= 1, got {n_window}", field="n_window")
    tau = np.asarray(tau, dtype=float)
    rel = tau - m.tau0
    peaks = _comb_peak_sum(rel, m.tau_F, m.t_r, n_window)
    values = m.c1 * (m.c2 + np.exp(-m.omega_c * np.abs(rel)) * peaks)
    return _as_output(values, tau)


def gamma_bar_delta(p: OpoParams, j: JitterModel, tau: ArrayLike) -> Scalar:
    """Jitter-averaged correlation with the comb replaced by a train of delta functions

    Keeps the [1 + (2 epsilon / omega_c)^2] factor so the peak term matches
    gamma_exact's normalization.
    """
    tau = np.asarray(tau, dtype=float)
    r = p.threshold_ratio
    prefactor = p.epsilon ** 2 * p.finesse_ratio ** 2
    floor = (r * p.n_modes) ** 2
    peaks = (LN2 / (2.0 * j.t_r)) * _comb_peak_sum(tau, p.tau_F, j.t_r, 1)
    comb = p.tau_F * p.n_modes * np.exp(-p.omega_c * np.abs(tau)) * peaks
    return _as_output(prefactor * (floor + (1.0 + r * r) * comb), tau)


def coincidence_params_from_opo(p: OpoParams, j: JitterModel, tau0: float,
                                scale: float = 1.0) -> CoincidenceModelParams:
    """Map physical parameters onto the coincidence model

    coincidence_model(result, tau) == scale * gamma_bar_delta(p, j, tau - tau0)
    """
    r = p.threshold_ratio
    prefactor = p.epsilon ** 2 * p.finesse_ratio ** 2
    amplitude = scale * prefactor * (1.0 + r * r) * p.tau_F * p.n_modes * LN2 / (2.0 * j.t_r)
    floor = scale * prefactor * (r * p.n_modes) ** 2
    if amplitude <= 0:
        raise InvalidParamsError("epsilon must be > 0 to produce coincidences", field="epsilon")
    return CoincidenceModelParams(
        tau_F=p.tau_F,
        t_r=j.t_r,
        omega_c=p.omega_c,
        c1=amplitude,
        c2=floor / amplitude,
        tau0=tau0,
    )


def _tail_extent(j: JitterModel, rtol: float) -> float:
    """Half-width beyond which the jitter autocorrelation is negligible"""
    target = 1e-3 * rtol
    u = brentq(lambda v: (1.0 + v) * math.exp(-v) - target, 1e-9, 800.0)
    return u / j.rate


def gamma_bar_numeric(p: OpoParams, j: JitterModel, tau: float, rtol: float = 1e-6,
                      limit: int = 100) -> float:
    """Jitter-averaged correlation by adaptive quadrature

    The double integral over the two jitter variables reduces to a single
    integral of gamma against the jitter autocorrelation. The delay-independent
    floor integrates to itself; the comb part is integrated piecewise between
    the zeros of the Fejer kernel, the envelope cusp at 0 and the
    autocorrelation centre at tau.
    """
    if not rtol > 0:
        raise InvalidParamsError("rtol must be > 0", field="rtol")
    tau = float(tau)
    r = p.threshold_ratio
    prefactor = p.epsilon ** 2 * p.finesse_ratio ** 2
    floor = prefactor * (r * p.n_modes) ** 2
    peak_scale = prefactor * (1.0 + r * r)

    half_span = _tail_extent(j, rtol)
    lo, hi = tau - half_span, tau + half_span
    spacing = p.tau_F / p.n_modes
    breaks = np.arange(math.ceil(lo / spacing), math.floor(hi / spacing) + 1) * spacing
    extra = [x for x in (0.0, tau) if lo < x < hi]
    points = np.unique(np.concatenate(([lo, hi], breaks, extra)))

    omega_c = p.omega_c
    omega_F = p.omega_F
    n_half = p.n_modes_half

    def integrand(t1):
        comb = math.exp(-omega_c * abs(t1)) * fejer_comb(omega_F, n_half, t1)
        return comb * j.autocorrelation(tau - t1)

    estimate = max(abs(gamma_bar_delta(p, j, tau) - floor) / max(peak_scale, 1e-300), 1e-300)
    epsabs = 1e-2 * rtol * estimate / max(len(points) - 1, 1)

    total = 0.0
    error = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        for a, b in zip(points[:-1], points[1:]):
            value, err = integrate.quad(integrand, a, b, epsabs=epsabs, epsrel=0.1 * rtol, limit=limit)
            total += value
            error += err

    if error > rtol * abs(total) and error > len(points) * epsabs:
        raise QuadratureError(f"averaged correlation at tau={tau:.3e} s did not converge", error / max(abs(total), 1e-300))
    logger.debug("gamma_bar_numeric tau=%.4e intervals=%d err=%.2e", tau, len(points) - 1, error)
    return floor + peak_scale * total


def finesse(omega_c: float, tau_F: float) -> float:
    """FSR over bandwidth, (2 pi / tau_F) / omega_c"""
    if not omega_c > 0 or not tau_F > 0:
        raise InvalidParamsError("omega_c and tau_F must be positive")
    return (TWO_PI / tau_F) / omega_c


def loss_report(omega_c: float, tau_F: float, t_output_coupler: float) -> LossReport:
    """Split the round-trip loss into output coupling and everything else

    Uses L_total = 2 pi / F = omega_c tau_F, valid for low-loss cavities.
    """
    if not 0 < t_output_coupler < 1:
        raise InvalidParamsError(
            f"output-coupler transmittance must lie in (0, 1), got {t_output_coupler}",
            field="t_output_coupler",
        )
    f = finesse(omega_c, tau_F)
    total = omega_c * tau_F
    other = total - t_output_coupler
    if other < 0:
        if other > -1e-12 * total:
            other = 0.0
        else:
            raise InconsistentInputsError(
                f"output coupler transmittance {t_output_coupler:.4f} exceeds the total "
                f"round-trip loss {total:.4f}",
                hint="check the bandwidth and round-trip time against the coupler",
            )
    return LossReport(finesse=f, total_loss=total, other_loss=other, output_coupler=t_output_coupler)


def estimate_intracavity_loss(omega_c: float, tau_F: float, t_output_coupler: float) -> float:
    return loss_report(omega_c, tau_F, t_output_coupler).other_loss


def round_trip_time_from_length(path_length: float,
                                refractive_segments: Iterable[Tuple[float, float]] = ()) -> float:
    """Round-trip time of a cavity, lengths in metres

    path_length is the geometric round trip; each (length, index) segment is a
    part of it filled with a medium of that refractive index. A 560 mm cavity
    with a 10 mm crystal is therefore (0.560, [(0.010, n)]), giving
    (0.550 + 0.010 n) / c, not 0.560 m of air plus the crystal. Times add
    over consecutive pieces of the path.
    """
    if not path_length > 0:
        raise InvalidGeometryError(f"path length must be > 0, got {path_length}", field="path_length")
    optical = float(path_length)
    inside = 0.0
    for length, index in refractive_segments:
        if not length > 0:
            raise InvalidGeometryError(f"segment length must be > 0, got {length}", field="refractive_segments")
        if not index >= 1:
            raise InvalidGeometryError(f"refractive index must be >= 1, got {index}", field="refractive_segments")
        inside += length
        optical += length * (index - 1.0)
    if inside > path_length * (1.0 + 1e-12):
        raise InvalidGeometryError(
            f"segments ({inside:.4g} m) are longer than the round trip ({path_length:.4g} m)",
            field="refractive_segments",
        )
    return optical / SPEED_OF_LIGHT
