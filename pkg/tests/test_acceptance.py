"""End-to-end checks against the 13 uW / 6.5 uW coincidence data"""

import numpy as np
import pytest

from src.core.constants import TWO_PI
from src.core.correlation_model import (
    JitterModel,
    OpoParams,
    estimate_intracavity_loss,
    gamma_bar_delta,
    gamma_bar_numeric,
    round_trip_time_from_length,
)
from src.core.histogram_fitter import FitProblem, find_peaks, fit, goodness_of_fit, initial_guess
from src.core.pair_simulator import (
    DetectorConfig,
    EmissionConfig,
    TacConfig,
    expected_coincidence_params,
    simulate,
)
from src.utils.run_config import RunConfig


def run_and_fit(pump_scale, seed):
    config = RunConfig(pump_scale=pump_scale, seed=seed, workers=4)
    emission = config.to_emission()
    detector = config.to_detector()
    tac = config.to_tac()
    histogram = simulate(emission, (detector, detector), tac, workers=config.workers, n_slices=config.n_slices)
    truth = expected_coincidence_params(emission, (detector, detector), tac)
    result = fit(FitProblem(histogram), initial_guess(histogram))
    return histogram, truth, result


@pytest.fixture(scope="module")
def full_pump():
    return run_and_fit(1.0, seed=13)


@pytest.fixture(scope="module")
def half_pump():
    return run_and_fit(0.5, seed=65)


def test_fit_closes_on_simulation_inputs(full_pump):
    histogram, truth, result = full_pump
    assert 1300 <= histogram.counts.max() <= 1700
    p = result.params
    assert result.converged
    assert p.tau_F == pytest.approx(2.07e-9, rel=0.005)
    assert p.t_r == pytest.approx(285e-12, rel=0.05)
    assert p.omega_c == pytest.approx(TWO_PI * 11e6, rel=0.1)
    assert p.c2 == pytest.approx(truth.c2, rel=0.15)
    assert abs(p.tau0 - 39e-9) < 0.2e-9
    assert 0.8 <= result.reduced_chi2 <= 1.2
    assert goodness_of_fit(result).runs_p_value > 1e-4


def test_halving_the_pump_reproduces_amplitude_ratios(full_pump, half_pump):
    high, low = full_pump[2].params, half_pump[2].params
    assert 1.8 <= high.c1 / low.c1 <= 2.6
    assert 1.7 <= high.c2 / low.c2 <= 3.0


def test_best_fit_residuals_have_no_outlier_bins(full_pump):
    histogram, _, result = full_pump
    z = (histogram.counts - result.model) / np.sqrt(result.model)
    assert np.count_nonzero(np.abs(z) > 4) <= 0.001 * len(z)


def test_comb_spacing_read_off_the_histogram(full_pump):
    histogram, truth, _ = full_pump
    counts, centers = histogram.counts.astype(float), histogram.centers
    floor = truth.c1 * truth.c2
    peaks = find_peaks(counts, threshold=2 * floor, half_window=20)
    peaks = peaks[(peaks >= 8) & (peaks < len(counts) - 8)]
    assert len(peaks) >= 10
    centroids = []
    for i in peaks:
        excess = counts[i - 8:i + 9] - floor
        centroids.append(np.sum(excess * centers[i - 8:i + 9]) / np.sum(excess))
    centroids = np.array(centroids)
    order = np.rint((centroids - centroids[0]) / 2.07e-9)
    spacing = np.polyfit(order, centroids, 1)[0]
    assert abs(spacing - 2.07e-9) < 0.5 * histogram.bin_width


def test_intracavity_loss_is_about_four_percent():
    assert 0.03 <= estimate_intracavity_loss(TWO_PI * 11e6, 2.07e-9, 0.10) <= 0.05


def test_round_trip_time_from_cavity_length():
    tau_F = round_trip_time_from_length(0.560, [(0.010, 2.2)])
    assert 1.8e-9 <= tau_F <= 2.0e-9


def test_delta_approximation_improves_with_resolving_time():
    p = OpoParams.from_cavity(TWO_PI * 11e6, 2.07e-9, 0.7, 1e-3, 50)
    errors = []
    for k in (2, 5, 10):
        j = JitterModel(k * p.tau_F / p.n_modes)
        for tau in (0.0, p.tau_F):
            numeric = gamma_bar_numeric(p, j, tau)
            approx = gamma_bar_delta(p, j, tau)
            errors.append((k, abs(numeric - approx) / approx))
    by_k = {k: max(e for kk, e in errors if kk == k) for k in (2, 5, 10)}
    assert by_k[10] <= 0.02
    assert by_k[2] > by_k[5] > by_k[10]


def test_accidental_floor_grows_with_rate_squared():
    # broad cavity: the comb has died out long before the floor region
    opo = OpoParams.from_cavity(TWO_PI * 100e6, 2.07e-9, 0.7, 1e-3, 50)
    detector = DetectorConfig(JitterModel(285e-12), 0.5)
    tac = TacConfig(electronic_delay=39e-9)
    rates = np.array([0.5e6, 1e6, 2e6])
    floors = []
    for i, rate in enumerate(rates):
        emission = EmissionConfig(pair_rate=rate, opo=opo, duration=1.0, seed=100 + i)
        h = simulate(emission, (detector, detector), tac, workers=4, n_slices=8)
        floors.append(h.counts[h.centers < 14e-9].mean())
    slope = np.polyfit(np.log(rates), np.log(floors), 1)[0]
    assert slope == pytest.approx(2.0, abs=0.15)


def test_fitted_amplitude_and_floor_scale_with_rate():
    opo = OpoParams.from_cavity(TWO_PI * 11e6, 2.07e-9, 0.7, 1e-3, 50)
    detector = DetectorConfig(JitterModel(285e-12), 0.5)
    tac = TacConfig(electronic_delay=39e-9)
    rates = np.array([4e5, 8e5, 1.6e6])
    c1, floors = [], []
    for i, rate in enumerate(rates):
        emission = EmissionConfig(pair_rate=rate, opo=opo, duration=10.0, seed=300 + i)
        h = simulate(emission, (detector, detector), tac, workers=4, n_slices=16)
        params = fit(FitProblem(h), initial_guess(h)).params
        c1.append(params.c1)
        floors.append(params.c1 * params.c2)
    assert np.polyfit(np.log(rates), np.log(c1), 1)[0] == pytest.approx(1.0, abs=0.1)
    assert np.polyfit(np.log(rates), np.log(floors), 1)[0] == pytest.approx(2.0, abs=0.15)
