#!/usr/bin/env python3
"""
Pair Simulator - event-level Monte Carlo of the coincidence experiment

Photon pairs are born as a Poisson process, their relative delay follows the
comb-shaped correlation of the OPO output, each photon picks a detector at a
50/50 beamsplitter, is jittered and thinned by the detector efficiency, and
the resulting streams are histogrammed with start-stop TAC semantics.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Dict, Iterable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid

from src.core.constants import LN2, MIN_INVERSE_CDF_POINTS
from src.core.correlation_model import (
    CoincidenceModelParams,
    JitterModel,
    OpoParams,
    coincidence_model,
    fejer_comb,
)
from src.core.errors import InvalidParamsError, TabulationError

logger = logging.getLogger(__name__)

DETECTOR_IDS = (1, 2)


@dataclass(frozen=True)
class EmissionConfig:
    pair_rate: float  # pairs/s, proportional to pump power
    opo: OpoParams
    duration: float  # s
    seed: int = 0

    def __post_init__(self):
        if not self.pair_rate > 0:
            raise InvalidParamsError(f"pair_rate must be > 0, got {self.pair_rate}", field="pair_rate")
        if not self.duration > 0:
            raise InvalidParamsError(f"duration must be > 0, got {self.duration}", field="duration")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise InvalidParamsError("seed must be a 64-bit unsigned integer", field="seed")


@dataclass(frozen=True)
class DetectorConfig:
    jitter: JitterModel
    efficiency: float = 1.0

    def __post_init__(self):
        if not 0 < self.efficiency <= 1:
            raise InvalidParamsError(f"efficiency must lie in (0, 1], got {self.efficiency}", field="efficiency")


@dataclass(frozen=True)
class TacConfig:
    """Start-stop converter settings, all times in seconds

    The window is expressed in TAC coordinates, t_stop + electronic_delay - t_start.
    """

    electronic_delay: float
    bin_width: float = 50e-12
    window: Tuple[float, float] = (0.0, 50e-9)
    start_channel: int = 1
    stop_channel: int = 2

    def __post_init__(self):
        if not self.bin_width > 0:
            raise InvalidParamsError(f"bin_width must be > 0, got {self.bin_width}", field="bin_width")
        start, stop = self.window
        if not start < stop:
            raise InvalidParamsError(f"window start {start} must precede stop {stop}", field="window")
        if {self.start_channel, self.stop_channel} != set(DETECTOR_IDS):
            raise InvalidParamsError("start and stop channels must be detectors 1 and 2", field="start_channel")
        if not start <= self.electronic_delay <= stop:
            logger.warning("electronic delay %.3g s lies outside the TAC window", self.electronic_delay)

    @property
    def n_bins(self) -> int:
        start, stop = self.window
        return int(round((stop - start) / self.bin_width))

    @property
    def bin_edges(self) -> np.ndarray:
        return self.window[0] + self.bin_width * np.arange(self.n_bins + 1)


@dataclass(frozen=True)
class EventRecord:
    detector_id: int
    timestamp: float


@dataclass
class EventStream:
    """Time-ordered detector events held as parallel arrays"""

    detector_ids: np.ndarray
    timestamps: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.detector_ids = np.asarray(self.detector_ids, dtype=np.int8)
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if self.detector_ids.shape != self.timestamps.shape:
            raise InvalidParamsError("detector ids and timestamps differ in length")

    def __len__(self) -> int:
        return len(self.timestamps)

    def __iter__(self) -> Iterator[EventRecord]:
        for det, ts in zip(self.detector_ids.tolist(), self.timestamps.tolist()):
            yield EventRecord(det, ts)

    @classmethod
    def from_records(cls, records: Iterable[EventRecord]) -> "EventStream":
        records = list(records)
        return cls(
            np.array([r.detector_id for r in records], dtype=np.int8),
            np.array([r.timestamp for r in records], dtype=float),
        )

    def channel(self, detector_id: int) -> np.ndarray:
        """Sorted timestamps of one detector"""
        return np.sort(self.timestamps[self.detector_ids == detector_id], kind="stable")


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.counts = np.asarray(self.counts)
        if len(self.counts) != len(self.bin_edges) - 1:
            raise InvalidParamsError(
                f"{len(self.counts)} counts do not match {len(self.bin_edges)} bin edges")
        if self.counts.size and (np.any(self.counts < 0) or not np.all(np.isfinite(self.counts))):
            raise InvalidParamsError("counts must be finite and non-negative")
        # measured histograms are integral; expected-count histograms stay float
        if np.all(np.mod(self.counts, 1) == 0):
            self.counts = self.counts.astype(np.int64)
        else:
            self.counts = self.counts.astype(float)

    @property
    def is_integral(self) -> bool:
        return np.issubdtype(self.counts.dtype, np.integer)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])

    @property
    def total(self) -> float:
        return self.counts.sum().item()

    def merged(self, other: "Histogram") -> "Histogram":
        if not np.array_equal(self.bin_edges, other.bin_edges):
            raise InvalidParamsError("cannot merge histograms with different bins")
        return Histogram(self.bin_edges, self.counts + other.counts, dict(self.meta))

    def shifted(self, delta: float) -> "Histogram":
        """Same counts on a delay axis moved by delta"""
        return Histogram(self.bin_edges + delta, self.counts.copy(), dict(self.meta))


class PairDelaySampler:
    """Two-stage sampler for the relative delay of the two photons of a pair

    Stage one picks the comb peak index n, stage two the offset inside the
    peak lobe by inverting a tabulated CDF of the lobe density. Lobes n > 0
    share one shape (envelope exp(-omega_c s) times the Fejer kernel), lobes
    n < 0 are its mirror image, the central lobe has its own table.
    """

    def __init__(self, opo: OpoParams, n_points: Optional[int] = None):
        self.opo = opo
        tau_F = opo.tau_F
        n_points = n_points or max(MIN_INVERSE_CDF_POINTS, 64 * opo.n_modes)
        self.grid = np.linspace(-0.5 * tau_F, 0.5 * tau_F, n_points + 1)
        kernel = fejer_comb(opo.omega_F, opo.n_modes_half, self.grid)

        self.cdf_center, mass_center = self._tabulate(np.exp(-opo.omega_c * np.abs(self.grid)) * kernel)
        self.cdf_side, mass_side = self._tabulate(np.exp(-opo.omega_c * self.grid) * kernel)

        self.q = math.exp(-opo.omega_c * tau_F)
        side_total = 2.0 * mass_side * self.q / (1.0 - self.q)
        self.p_center = mass_center / (mass_center + side_total)
        logger.debug("pair delay sampler: %d points, P(n=0)=%.4f, q=%.5f", n_points, self.p_center, self.q)

    def _tabulate(self, density: np.ndarray) -> Tuple[np.ndarray, float]:
        cdf = cumulative_trapezoid(density, self.grid, initial=0.0)
        mass = float(cdf[-1])
        if not mass > 0:
            raise TabulationError("peak lobe has zero mass")
        cdf = cdf / mass
        if not np.all(np.diff(cdf) > 0):
            raise TabulationError("inverse-CDF table is not strictly increasing")
        cdf[-1] = 1.0
        return cdf, mass

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> Union[float, np.ndarray]:
        n = 1 if size is None else int(size)
        pick = rng.random(n)
        order = rng.geometric(1.0 - self.q, n)
        sign = np.where(rng.random(n) < 0.5, -1, 1)
        u = rng.random(n)

        center = pick < self.p_center
        index = np.where(center, 0, sign * order)
        offset = np.where(
            center,
            np.interp(u, self.cdf_center, self.grid),
            sign * np.interp(u, self.cdf_side, self.grid),
        )
        delays = index * self.opo.tau_F + offset
        if size is None:
            return float(delays[0])
        return delays


@lru_cache(maxsize=16)
def _sampler_for(opo: OpoParams) -> PairDelaySampler:
    return PairDelaySampler(opo)


def sample_pair_delay(opo: OpoParams, rng: np.random.Generator,
                      size: Optional[int] = None) -> Union[float, np.ndarray]:
    """Draw relative pair delays from the normalized delay-dependent correlation"""
    return _sampler_for(opo).sample(rng, size)


def _check_detectors(detectors: Sequence[DetectorConfig]) -> Tuple[DetectorConfig, DetectorConfig]:
    if len(detectors) != 2:
        raise InvalidParamsError("exactly two detectors are required", field="detectors")
    return detectors[0], detectors[1]


def _generate_interval(e: EmissionConfig, detectors: Sequence[DetectorConfig], t_begin: float,
                       t_end: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Detector events from pairs born in [t_begin, t_end)"""
    det1, det2 = _check_detectors(detectors)
    n_pairs = int(rng.poisson(e.pair_rate * (t_end - t_begin)))
    births = rng.uniform(t_begin, t_end, n_pairs)
    delays = sample_pair_delay(e.opo, rng, n_pairs)

    # column 0 is the early photon, column 1 the late one
    times = np.stack((births - 0.5 * delays, births + 0.5 * delays), axis=1)
    routes = rng.integers(1, 3, size=(n_pairs, 2)).astype(np.int8)

    scales = np.where(routes == 1, 1.0 / det1.jitter.rate, 1.0 / det2.jitter.rate)
    times = times + rng.laplace(0.0, 1.0, size=times.shape) * scales

    efficiency = np.where(routes == 1, det1.efficiency, det2.efficiency)
    kept = rng.random(times.shape) < efficiency
    return routes[kept], times[kept]


def _finish_stream(ids: np.ndarray, times: np.ndarray, duration: float, meta: Dict[str, Any]) -> EventStream:
    inside = (times >= 0.0) & (times < duration)
    ids, times = ids[inside], times[inside]
    order = np.argsort(times, kind="stable")
    return EventStream(ids[order], times[order], meta)


def generate_events(e: EmissionConfig, detectors: Sequence[DetectorConfig],
                    rng: Optional[np.random.Generator] = None) -> EventStream:
    """Events of one acquisition of length e.duration

    Accidental coincidences are not injected: they arise from photons of
    different pairs landing in the same TAC window.
    """
    rng = rng if rng is not None else np.random.default_rng(e.seed)
    ids, times = _generate_interval(e, detectors, 0.0, e.duration, rng)
    return _finish_stream(ids, times, e.duration, {"duration": e.duration, "seed": e.seed, "slices": 1})


def tac_mca_histogram(events: Union[EventStream, Iterable[EventRecord]], t: TacConfig,
                      segments: Optional[Sequence[float]] = None, workers: int = 1) -> Histogram:
    """Start-stop histogram of the delay between the two detectors

    Each start event arms the converter; the first stop-arm event (delayed by
    the electronic delay) inside the window converts to one count. The
    converter ignores further starts until conversion or window expiry.
    When segments are given the converter is re-armed at each boundary and
    the segments are processed independently.
    """
    if not isinstance(events, EventStream):
        events = EventStream.from_records(events)
    starts = events.channel(t.start_channel)
    stops = events.channel(t.stop_channel) + t.electronic_delay

    if segments is None:
        segments = [-np.inf, np.inf]
    bounds = np.asarray(segments, dtype=float)
    pieces = [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]

    def run(piece):
        lo, hi = np.searchsorted(starts, piece, side="left")
        return _convert(starts[lo:hi], stops, t)

    if workers > 1 and len(pieces) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, pieces))
    else:
        results = [run(piece) for piece in pieces]

    counts = np.zeros(t.n_bins, dtype=np.int64)
    n_accepted = 0
    for part, accepted in results:
        counts += part
        n_accepted += accepted

    meta = dict(getattr(events, "meta", {}) or {})
    meta.update({
        "n_start_events": int(len(starts)),
        "n_stop_events": int(len(stops)),
        "n_starts": int(n_accepted),
        "electronic_delay": t.electronic_delay,
        "bin_width": t.bin_width,
    })
    return Histogram(t.bin_edges, counts, meta)


def _convert(starts: np.ndarray, stops: np.ndarray, t: TacConfig) -> Tuple[np.ndarray, int]:
    counts = np.zeros(t.n_bins, dtype=np.int64)
    if len(starts) == 0:
        return counts, 0
    w0, w1 = t.window

    # starts without a later stop time out at the end of the window
    first = np.searchsorted(stops, starts + w0, side="left")
    has_stop = first < len(stops)
    stop_time = np.full(len(starts), np.inf)
    stop_time[has_stop] = stops[first[has_stop]]
    converted = stop_time < starts + w1
    busy_until = np.where(converted, stop_time, starts + w1)

    following = np.searchsorted(starts, busy_until, side="left")
    following = np.maximum(following, np.arange(1, len(starts) + 1)).tolist()

    accepted = []
    i = 0
    n = len(starts)
    while i < n:
        accepted.append(i)
        i = following[i]
    accepted = np.asarray(accepted, dtype=np.int64)

    hits = accepted[converted[accepted]]
    delay = stop_time[hits] - starts[hits]
    index = np.floor((delay - w0) / t.bin_width).astype(np.int64)
    index = index[(index >= 0) & (index < t.n_bins)]
    counts += np.bincount(index, minlength=t.n_bins)[: t.n_bins]
    return counts, len(accepted)


def slice_bounds(duration: float, n_slices: int) -> np.ndarray:
    if n_slices < 1:
        raise InvalidParamsError(f"n_slices must be >= 1, got {n_slices}", field="slices")
    return np.linspace(0.0, duration, n_slices + 1)


def generate_sliced_events(e: EmissionConfig, detectors: Sequence[DetectorConfig], n_slices: int = 16,
                           workers: int = 1) -> EventStream:
    """Events of the whole acquisition, generated slice by slice

    Slice i draws from the i-th child of SeedSequence(seed), so the result
    depends on the slice count but not on the number of workers.
    """
    _check_detectors(detectors)
    bounds = slice_bounds(e.duration, n_slices)
    children = np.random.SeedSequence(int(e.seed)).spawn(n_slices)

    def run(i):
        rng = np.random.default_rng(children[i])
        return _generate_interval(e, detectors, bounds[i], bounds[i + 1], rng)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(n_slices)))
    else:
        parts = [run(i) for i in range(n_slices)]

    for i, (ids, _) in enumerate(parts):
        logger.debug("slice %d: %d detected photons", i, len(ids))
    ids = np.concatenate([p[0] for p in parts])
    times = np.concatenate([p[1] for p in parts])
    meta = {"duration": e.duration, "seed": int(e.seed), "slices": n_slices, "pair_rate": e.pair_rate}
    return _finish_stream(ids, times, e.duration, meta)


def simulate(e: EmissionConfig, detectors: Sequence[DetectorConfig], t: TacConfig, workers: int = 1,
             n_slices: int = 16, events: Optional[EventStream] = None) -> Histogram:
    """Run the whole acquisition and return the merged coincidence histogram

    Stops are shared across slice boundaries, so a start near the end of a
    slice still sees stops from the next one.
    """
    if events is None:
        events = generate_sliced_events(e, detectors, n_slices=n_slices, workers=workers)
    bounds = slice_bounds(e.duration, n_slices)
    bounds[0], bounds[-1] = -np.inf, np.inf
    histogram = tac_mca_histogram(events, t, segments=bounds, workers=workers)
    histogram.meta.update({
        "duration": e.duration,
        "pair_rate": e.pair_rate,
        "seed": int(e.seed),
        "slices": n_slices,
        "efficiency_1": detectors[0].efficiency,
        "efficiency_2": detectors[1].efficiency,
    })
    logger.info("simulated %.3g s at %.3g pairs/s: %d events, %d coincidences",
                e.duration, e.pair_rate, len(events), histogram.total)
    return histogram


def expected_coincidence_params(e: EmissionConfig, detectors: Sequence[DetectorConfig],
                                t: TacConfig) -> CoincidenceModelParams:
    """Coincidence-model parameters a simulation is expected to produce

    True coincidences per bin at the central peak are
    T r eta1 eta2 w ln2 / (4 T_R S) with S = coth(omega_c tau_F / 2), the
    accidental floor is T (eta1 r)(eta2 r) w. Both are corrected for the
    converter's busy time and for earlier stops pre-empting the conversion.
    The floor also loses the starts whose own partner stops first; that loss
    rises across the window, so the returned C2 is its window average.
    Pairs with both photons on one detector are not modelled, which holds
    while eta * r * window stays at the percent level.
    """
    det1, det2 = _check_detectors(detectors)
    if not math.isclose(det1.jitter.t_r, det2.jitter.t_r, rel_tol=1e-9):
        logger.warning("detectors have different resolving times; using their mean")
    t_r = 0.5 * (det1.jitter.t_r + det2.jitter.t_r)
    opo = e.opo
    r = e.pair_rate
    w0, w1 = t.window
    span = w1 - w0

    start_rate = det1.efficiency * r
    stop_rate = det2.efficiency * r
    busy = (1.0 - math.exp(-stop_rate * span)) / stop_rate
    accepted = 1.0 / (1.0 + start_rate * busy)
    survival_peak = math.exp(-stop_rate * max(t.electronic_delay - w0, 0.0))

    s = 1.0 / math.tanh(0.5 * opo.omega_c * opo.tau_F)
    per_start_peak = det2.efficiency * t.bin_width * LN2 / (4.0 * t_r * s)
    centers = 0.5 * (t.bin_edges[:-1] + t.bin_edges[1:])
    shape = CoincidenceModelParams(tau_F=opo.tau_F, t_r=t_r, omega_c=opo.omega_c, c1=1.0, c2=0.0,
                                   tau0=t.electronic_delay)
    # probability that a start's own partner converts in each bin
    partner = per_start_peak * coincidence_model(shape, centers)
    partner_before = np.cumsum(partner) - 0.5 * partner
    survival_floor = float(np.mean(np.exp(-stop_rate * (centers - w0)) * (1.0 - partner_before)))

    c1 = e.duration * start_rate * per_start_peak * accepted * survival_peak
    floor = e.duration * start_rate * stop_rate * t.bin_width * accepted * survival_floor
    return CoincidenceModelParams(
        tau_F=opo.tau_F,
        t_r=t_r,
        omega_c=opo.omega_c,
        c1=c1,
        c2=floor / c1,
        tau0=t.electronic_delay,
    )


def pair_rate_for_floor_ratio(c2: float, opo: OpoParams, t_r: float) -> float:
    """Pair rate at which the accidental floor sits at c2 times the peak amplitude"""
    s = 1.0 / math.tanh(0.5 * opo.omega_c * opo.tau_F)
    return c2 * LN2 / (4.0 * t_r * s)
