import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.core.constants import LN2, SPEED_OF_LIGHT, TWO_PI
from src.core.correlation_model import (
    CoincidenceModelParams,
    JitterModel,
    OpoParams,
    coincidence_model,
    coincidence_params_from_opo,
    estimate_intracavity_loss,
    fejer_comb,
    finesse,
    fwhm_to_resolving_time,
    gamma_bar_delta,
    gamma_bar_numeric,
    gamma_exact,
    loss_report,
    peak_half_width_parameter,
    peak_shape,
    round_trip_time_from_length,
    spectral_coefficients,
)
from src.core.errors import (
    InconsistentInputsError,
    InvalidGeometryError,
    InvalidParamsError,
)

TAU_F = 2.07e-9
OMEGA_C = TWO_PI * 11e6
T_R = 285e-12


def opo(n_half=50, threshold_ratio=1e-3, escape=0.7):
    return OpoParams.from_cavity(OMEGA_C, TAU_F, escape, threshold_ratio, n_half)


def caption_params(**changes):
    base = CoincidenceModelParams(tau_F=TAU_F, t_r=T_R, omega_c=OMEGA_C, c1=1446.0, c2=0.067, tau0=39e-9)
    return base.replace(**changes)


def test_from_cavity_derived_quantities():
    p = opo(escape=0.7, threshold_ratio=0.02)
    assert p.omega_c == pytest.approx(OMEGA_C)
    assert p.finesse_ratio == pytest.approx(0.7)
    assert p.tau_F == pytest.approx(TAU_F)
    assert p.n_modes == 101
    assert p.threshold_ratio == pytest.approx(0.02)
    assert p.is_far_below_threshold()


def test_opo_above_threshold_rejected():
    with pytest.raises(InvalidParamsError) as excinfo:
        OpoParams(gamma1=1e7, gamma2=1e7, epsilon=1e7, omega_F=TWO_PI / TAU_F, n_modes_half=1)
    assert excinfo.value.field == "epsilon"


@pytest.mark.parametrize("kwargs", [
    {"gamma1": 0.0},
    {"gamma2": -1.0},
    {"n_modes_half": -1},
    {"n_modes_half": 1.5},
])
def test_opo_invalid_fields(kwargs):
    base = {"gamma1": 5e7, "gamma2": 2e7, "epsilon": 1e4, "omega_F": TWO_PI / TAU_F, "n_modes_half": 3}
    base.update(kwargs)
    with pytest.raises(InvalidParamsError):
        OpoParams(**base)


def test_spectral_coefficients_unitary_on_grid():
    p = opo(threshold_ratio=0.3)
    half = np.geomspace(1e-4 * OMEGA_C, 100 * OMEGA_C, 500)
    omega = np.concatenate((-half[::-1], half))
    c = spectral_coefficients(p, omega)
    assert np.max(c.unitarity_defect()) < 1e-12


def test_spectral_coefficients_at_degeneracy():
    p = OpoParams(gamma1=3.0e7, gamma2=1.0e7, epsilon=1.0e6, omega_F=TWO_PI / TAU_F, n_modes_half=0)
    c = spectral_coefficients(p, 0.0)
    assert c.G1 == pytest.approx(0.5)
    assert c.g1 == pytest.approx(4 * 1.0e6 * 3.0e7 / (4.0e7) ** 2)
    assert abs(c.G2) ** 2 == pytest.approx(0.75)


def test_spectral_coefficients_lossless_cavity():
    p = OpoParams(gamma1=3.0e7, gamma2=0.0, epsilon=1.0e6, omega_F=TWO_PI / TAU_F, n_modes_half=0)
    c = spectral_coefficients(p, np.array([-1e8, 0.0, 2e8]))
    assert_allclose(np.abs(c.G1), 1.0, rtol=1e-12)
    assert_allclose(c.G2, 0.0)


def test_fejer_comb_peak_height_and_periodicity():
    omega_F = TWO_PI / TAU_F
    m = 101
    assert fejer_comb(omega_F, 50, 0.0) == pytest.approx(m * m)
    assert fejer_comb(omega_F, 50, 3 * TAU_F) == pytest.approx(m * m, rel=1e-9)

    tau = np.linspace(-0.5 * TAU_F, 0.5 * TAU_F, 2001)
    assert_allclose(fejer_comb(omega_F, 50, tau + TAU_F), fejer_comb(omega_F, 50, tau), rtol=1e-6, atol=1e-6)


def test_fejer_comb_continuous_across_singularity():
    omega_F = TWO_PI / TAU_F
    near = np.array([-1e-16, -1e-20, 0.0, 1e-20, 1e-16]) + TAU_F
    values = fejer_comb(omega_F, 50, near)
    assert_allclose(values, 101 ** 2, rtol=1e-9)
    # just outside the series threshold the direct ratio takes over smoothly
    x = 2e-6 / (0.5 * omega_F)
    assert fejer_comb(omega_F, 50, x) == pytest.approx(101 ** 2, rel=1e-6)


def test_fejer_comb_single_mode_is_flat():
    tau = np.linspace(-5e-9, 5e-9, 101)
    assert_allclose(fejer_comb(TWO_PI / TAU_F, 0, tau), 1.0, rtol=1e-12)


def test_fejer_comb_zeros_between_peaks():
    omega_F = TWO_PI / TAU_F
    zeros = np.arange(1, 10) * TAU_F / 101
    assert np.max(fejer_comb(omega_F, 50, zeros)) < 1e-20


def test_gamma_exact_single_mode_is_two_sided_exponential():
    p = opo(n_half=0, threshold_ratio=0.05)
    tau = np.linspace(-100e-9, 100e-9, 401)
    r = p.threshold_ratio
    pref = p.epsilon ** 2 * p.finesse_ratio ** 2
    expected = pref * (r * r + np.exp(-OMEGA_C * np.abs(tau)) * (1 + r * r))
    assert_allclose(gamma_exact(p, tau), expected, rtol=1e-12)
    assert_allclose(gamma_exact(p, tau), gamma_exact(p, -tau), rtol=1e-12)


def test_gamma_exact_scalar_returns_float():
    assert isinstance(gamma_exact(opo(), 1e-9), float)


def test_gamma_exact_floor_and_peak_scale_with_pump_field():
    weak, strong = opo(n_half=2, threshold_ratio=1e-3), opo(n_half=2, threshold_ratio=2e-3)
    assert strong.epsilon == pytest.approx(2 * weak.epsilon, rel=1e-12)
    # envelope underflows to zero, leaving the floor alone
    floor_weak, floor_strong = gamma_exact(weak, 1.0), gamma_exact(strong, 1.0)
    assert floor_strong / floor_weak == pytest.approx(16.0, rel=1e-12)
    peak_ratio = (gamma_exact(strong, 0.0) - floor_strong) / (gamma_exact(weak, 0.0) - floor_weak)
    assert 3.99 <= peak_ratio <= 4.01


def test_floor_to_peak_ratio_doubles_with_pump_power():
    j = JitterModel(T_R)
    low = coincidence_params_from_opo(opo(threshold_ratio=1e-3), j, 0.0)
    # pump power scales as epsilon squared
    high = coincidence_params_from_opo(opo(threshold_ratio=math.sqrt(2) * 1e-3), j, 0.0)
    assert high.c2 / low.c2 == pytest.approx(2.0, rel=1e-3)


def test_jitter_density_normalized():
    j = JitterModel(T_R)
    assert j.normalization_numeric() == pytest.approx(1.0, rel=1e-10)
    assert j.density(T_R / 2) == pytest.approx(0.5 * j.density(0.0))


@pytest.mark.parametrize("delta", [0.0, 50e-12, 285e-12, -400e-12, 1.5e-9])
def test_jitter_autocorrelation_matches_quadrature(delta):
    j = JitterModel(T_R)
    assert j.autocorrelation_numeric(delta) == pytest.approx(j.autocorrelation(delta), rel=1e-8)


def test_jitter_rejects_nonpositive_resolving_time():
    with pytest.raises(InvalidParamsError):
        JitterModel(0.0)


def test_peak_shape_half_maximum():
    u_star = peak_half_width_parameter()
    assert u_star == pytest.approx(1.678, abs=1e-3)
    fwhm = u_star * T_R / LN2
    assert peak_shape(fwhm / 2, T_R) == pytest.approx(0.5, rel=1e-12)
    assert fwhm_to_resolving_time(fwhm) == pytest.approx(T_R, rel=1e-12)


def test_coincidence_model_peaks_and_envelope():
    m = caption_params()
    assert coincidence_model(m, m.tau0) > coincidence_model(m, m.tau0 + 0.5 * TAU_F)
    floor = m.c1 * m.c2
    first = coincidence_model(m, m.tau0) - floor
    tenth = coincidence_model(m, m.tau0 + 10 * TAU_F) - floor
    assert tenth / first == pytest.approx(math.exp(-OMEGA_C * 10 * TAU_F), rel=1e-3)


def test_coincidence_model_symmetric_about_tau0():
    m = caption_params()
    offsets = np.linspace(0, 20e-9, 301)
    assert_allclose(coincidence_model(m, m.tau0 + offsets), coincidence_model(m, m.tau0 - offsets), rtol=1e-10)


def test_coincidence_model_tail_extension_matches_brute_force():
    m = caption_params()
    tau = np.linspace(0, 50e-9, 1001)
    rel = tau - m.tau0
    brute = sum(peak_shape(rel - n * TAU_F, T_R) for n in range(-60, 61))
    expected = m.c1 * (m.c2 + np.exp(-OMEGA_C * np.abs(rel)) * brute)
    assert_allclose(coincidence_model(m, tau), expected, rtol=1e-9)
    assert_allclose(coincidence_model(m, tau, n_window=5), expected, rtol=1e-9)


def test_coincidence_model_neighbour_tail_at_peak_centre():
    # the nearest-peak-only sum misses the neighbours' tails at tau0
    m = caption_params(c2=0.0)
    full = coincidence_model(m, m.tau0) / m.c1
    assert full - 1.0 == pytest.approx(2 * peak_shape(TAU_F, T_R), rel=1e-3)
    assert 5e-4 < full - 1.0 < 2e-3


def test_coincidence_model_rejects_bad_window():
    with pytest.raises(InvalidParamsError):
        coincidence_model(caption_params(), 0.0, n_window=0)


@pytest.mark.parametrize("name,value", [("tau_F", 0.0), ("c1", -1.0), ("c2", -0.1), ("t_r", float("nan"))])
def test_coincidence_params_validation(name, value):
    with pytest.raises(InvalidParamsError):
        caption_params(**{name: value})


def test_is_resolvable():
    assert caption_params().is_resolvable
    assert not caption_params(t_r=3e-9).is_resolvable


def test_params_from_opo_reproduce_delta_approximation():
    p = opo(threshold_ratio=0.01)
    j = JitterModel(T_R)
    m = coincidence_params_from_opo(p, j, tau0=39e-9, scale=2.5)
    tau = np.linspace(0, 50e-9, 501)
    assert_allclose(coincidence_model(m, tau), 2.5 * gamma_bar_delta(p, j, tau - 39e-9), rtol=1e-12)


def test_params_from_opo_need_pump():
    p = OpoParams(gamma1=5e7, gamma2=2e7, epsilon=0.0, omega_F=TWO_PI / TAU_F, n_modes_half=2)
    with pytest.raises(InvalidParamsError):
        coincidence_params_from_opo(p, JitterModel(T_R), 0.0)


def test_gamma_bar_numeric_close_to_delta_approximation():
    p = opo(n_half=50, threshold_ratio=0.01)
    # jitter ten times the Fejer lobe width
    j = JitterModel(10 * TAU_F / p.n_modes)
    numeric = gamma_bar_numeric(p, j, 0.0, rtol=1e-6)
    approx = gamma_bar_delta(p, j, 0.0)
    assert numeric == pytest.approx(approx, rel=0.02)
    assert numeric < approx


@pytest.mark.parametrize("tau", [3e-9, 10e-9, -7e-9])
def test_gamma_bar_numeric_reduces_to_gamma_for_sharp_jitter(tau):
    p = opo(n_half=0, threshold_ratio=0.01)
    assert gamma_bar_numeric(p, JitterModel(1e-12), tau, rtol=1e-8) == pytest.approx(
        gamma_exact(p, tau), rel=1e-5)


def test_gamma_bar_numeric_rejects_bad_tolerance():
    with pytest.raises(InvalidParamsError):
        gamma_bar_numeric(opo(n_half=2), JitterModel(T_R), 0.0, rtol=0.0)


def test_finesse_and_loss_budget():
    assert finesse(OMEGA_C, TAU_F) == pytest.approx(43.9, abs=0.1)
    report = loss_report(OMEGA_C, TAU_F, 0.10)
    assert report.total_loss == pytest.approx(OMEGA_C * TAU_F)
    assert report.other_loss == pytest.approx(report.total_loss - 0.10)
    assert 0.03 <= estimate_intracavity_loss(OMEGA_C, TAU_F, 0.10) <= 0.05


def test_loss_with_coupler_equal_to_total():
    assert estimate_intracavity_loss(OMEGA_C, TAU_F, OMEGA_C * TAU_F) == 0.0


def test_loss_with_coupler_above_total():
    with pytest.raises(InconsistentInputsError):
        estimate_intracavity_loss(OMEGA_C, TAU_F, 0.2)


def test_round_trip_time_with_crystal():
    tau = round_trip_time_from_length(0.560, [(0.010, 2.2)])
    assert 1.8e-9 <= tau <= 2.0e-9
    assert tau == pytest.approx((0.560 + 0.010 * 1.2) / SPEED_OF_LIGHT)


def test_round_trip_time_empty_cavity():
    assert round_trip_time_from_length(0.3) == pytest.approx(0.3 / SPEED_OF_LIGHT)


@pytest.mark.parametrize("length,segments", [
    (0.0, []),
    (0.1, [(0.2, 2.0)]),
    (0.5, [(0.01, 0.9)]),
])
def test_round_trip_time_invalid_geometry(length, segments):
    with pytest.raises(InvalidGeometryError):
        round_trip_time_from_length(length, segments)


def test_round_trip_time_adds_over_path_pieces():
    first = round_trip_time_from_length(0.30, [(0.010, 2.2)])
    second = round_trip_time_from_length(0.26, [(0.020, 1.5)])
    whole = round_trip_time_from_length(0.56, [(0.010, 2.2), (0.020, 1.5)])
    assert whole == pytest.approx(first + second, rel=1e-12)


def test_round_trip_time_split_crystal_matches_whole():
    split = round_trip_time_from_length(0.560, [(0.004, 2.2), (0.006, 2.2)])
    assert split == pytest.approx(round_trip_time_from_length(0.560, [(0.010, 2.2)]), rel=1e-12)
