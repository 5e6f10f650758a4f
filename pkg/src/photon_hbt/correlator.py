"""Streaming cross-correlation and second-order correlation estimators.

The correlation convention is tau = t2 - t1 with channel 1 as "start":
every ordered (channel-1 tag, channel-2 tag) pair whose delay falls in the
histogram range is counted, in a single pass with a sliding window over
the sorted stream.  The g2(0) estimator normalizes the coincidences
integrated around tau = 0 by the mean coincidences in the side peaks that
form at multiples of the repetition period, and subtracts the estimated
accidental-coincidence background

    C_B = T_exp * T_rep * (R_T1 * R_B2 + R_B1 * R_T2 - R_B1 * R_B2)

with first-order error propagation throughout.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numba
import numpy as np

from .sequence import CycleTimeline, in_gate
from .tagstream import TagStream


class Measured(NamedTuple):
    """A value with a one-sigma uncertainty."""

    value: float
    sigma: float


class DegenerateDenominatorError(ValueError):
    """Side-peak mean does not exceed the background estimate."""


@dataclass(frozen=True)
class RateSet:
    """Gated singles rates: totals and residual backgrounds per channel."""

    r_t1: Measured
    r_b1: Measured
    r_t2: Measured
    r_b2: Measured

    def __post_init__(self):
        for name in ("r_t1", "r_b1", "r_t2", "r_b2"):
            rate = getattr(self, name)
            if rate.value < 0 or rate.sigma < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.r_b1.value > self.r_t1.value or self.r_b2.value > self.r_t2.value:
            raise ValueError("background rate exceeds total rate")


@dataclass(frozen=True)
class G2Report:
    c0: Measured
    c_tau: Measured
    c_b: Measured
    n_side_peaks: int
    g2_raw: Measured
    g2_corrected: Measured


@dataclass
class CorrelationHistogram:
    """Coincidence counts binned by delay tau = t2 - t1.

    Bin b covers [tau_min_ps + b * bin_width_ps, tau_min_ps + (b+1) * bin_width_ps).
    """

    bin_width_ps: int
    tau_min_ps: int
    tau_max_ps: int
    counts: np.ndarray

    def __post_init__(self):
        if self.bin_width_ps <= 0:
            raise ValueError("bin_width_ps must be positive")
        if (self.tau_max_ps - self.tau_min_ps) % self.bin_width_ps != 0:
            raise ValueError("tau range must be divisible by bin width")
        n = (self.tau_max_ps - self.tau_min_ps) // self.bin_width_ps
        if self.counts.shape != (n,):
            raise ValueError(f"counts must have length {n}")

    @property
    def n_bins(self) -> int:
        return self.counts.size

    def bin_lower_edges(self) -> np.ndarray:
        return self.tau_min_ps + self.bin_width_ps * np.arange(self.n_bins, dtype=np.int64)

    def total(self) -> int:
        return int(self.counts.sum())


def gate_stream(stream: TagStream, timeline: CycleTimeline) -> TagStream:
    """Keep exactly the tags inside the software gate window."""
    keep = in_gate(stream.times, timeline)
    meta = dict(stream.meta)
    meta["gate_start_ps"] = timeline.gate_start_ps
    meta["gate_width_ps"] = timeline.gate_width_ps
    return TagStream(
        duration_ps=stream.duration_ps,
        rep_period_ps=stream.rep_period_ps,
        channels=stream.channels[keep],
        times=stream.times[keep],
        meta=meta,
    )


@numba.njit(cache=True, nogil=True)
def _xcorr_kernel(t1, t2, tau_min, tau_max, bin_width, counts):
    j_lo = 0
    n2 = t2.size
    for i in range(t1.size):
        start = t1[i]
        lo = start + tau_min
        hi = start + tau_max
        while j_lo < n2 and t2[j_lo] < lo:
            j_lo += 1
        j = j_lo
        while j < n2 and t2[j] < hi:
            counts[(t2[j] - start - tau_min) // bin_width] += 1
            j += 1


def cross_correlate(
    stream: TagStream,
    bin_width_ps: int = 1000,
    tau_min_ps: int = -50_000_000,
    tau_max_ps: int = 50_000_000,
    n_shards: int = 1,
    threads: int = 1,
) -> CorrelationHistogram:
    """Histogram all (channel-1, channel-2) pair delays in [tau_min, tau_max).

    Single pass over the sorted stream with a sliding channel-2 window, so
    memory stays bounded by the window occupancy plus the histogram.  The
    channel-1 tags may be split into ``n_shards`` contiguous shards whose
    partial histograms are summed; the result is independent of the shard
    count (each pair is attributed to exactly one start tag).
    """
    if bin_width_ps <= 0:
        raise ValueError("bin_width_ps must be positive")
    if (tau_max_ps - tau_min_ps) % bin_width_ps != 0 or tau_max_ps <= tau_min_ps:
        raise ValueError("tau range must be positive and divisible by bin width")
    if n_shards < 1:
        raise ValueError("n_shards must be >= 1")
    stream.validate()

    t1 = np.ascontiguousarray(stream.channel_times(1))
    t2 = np.ascontiguousarray(stream.channel_times(2))
    n_bins = (tau_max_ps - tau_min_ps) // bin_width_ps
    if t1.size == 0 or t2.size == 0:
        return CorrelationHistogram(bin_width_ps, tau_min_ps, tau_max_ps,
                                    np.zeros(n_bins, dtype=np.int64))

    bounds = np.linspace(0, t1.size, n_shards + 1).astype(np.int64)

    def job(k):
        part = np.zeros(n_bins, dtype=np.int64)
        chunk = t1[bounds[k]:bounds[k + 1]]
        if chunk.size:
            lo = np.searchsorted(t2, chunk[0] + tau_min_ps)
            _xcorr_kernel(chunk, t2[lo:], tau_min_ps, tau_max_ps,
                          bin_width_ps, part)
        return part

    if threads > 1 and n_shards > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, range(n_shards)))
    else:
        parts = [job(k) for k in range(n_shards)]
    counts = np.sum(parts, axis=0, dtype=np.int64) if parts else np.zeros(n_bins, np.int64)
    return CorrelationHistogram(bin_width_ps, tau_min_ps, tau_max_ps, counts)


def integrate_peak(hist: CorrelationHistogram, center_ps: int,
                   half_width_ps: int = 10_000) -> int:
    """Sum the bins fully covered by [center - half_width, center + half_width]."""
    lo = center_ps - half_width_ps
    hi = center_ps + half_width_ps
    if lo < hist.tau_min_ps or hi > hist.tau_max_ps:
        raise ValueError(
            f"window [{lo}, {hi}] outside histogram range "
            f"[{hist.tau_min_ps}, {hist.tau_max_ps}]")
    bw = hist.bin_width_ps
    b_lo = -((-(lo - hist.tau_min_ps)) // bw)  # ceil division
    b_hi = (hi - hist.tau_min_ps) // bw        # exclusive
    return int(hist.counts[b_lo:b_hi].sum())


def side_peak_stats(hist: CorrelationHistogram, rep_period_ps: int,
                    n_peaks: int, half_width_ps: int = 10_000):
    """Integrate the side peaks at k * rep_period for k = +-1 .. +-n_peaks/2.

    Returns (mean, standard error of the mean, per-peak counts array).
    """
    if n_peaks < 2 or n_peaks % 2 != 0:
        raise ValueError("n_peaks must be an even number >= 2 (symmetric set)")
    if 2 * half_width_ps > rep_period_ps:
        raise ValueError("peak windows overlap: 2 * half_width exceeds the period")
    orders = [k for k in range(-(n_peaks // 2), n_peaks // 2 + 1) if k != 0]
    peaks = np.array([integrate_peak(hist, k * rep_period_ps, half_width_ps)
                      for k in orders], dtype=np.float64)
    mean = float(peaks.mean())
    sem = float(peaks.std(ddof=1) / math.sqrt(len(peaks)))
    return mean, sem, peaks


def expected_background(rates: RateSet, t_exp_s: float, rep_period_s: float) -> Measured:
    """Estimated accidental coincidences in one integration window.

    Value T_exp * T_rep * (R_T1 * R_B2 + R_B1 * R_T2 - R_B1 * R_B2) with the
    error propagated to first order from the four rate uncertainties.
    """
    if t_exp_s <= 0 or rep_period_s <= 0:
        raise ValueError("t_exp_s and rep_period_s must be positive")
    scale = t_exp_s * rep_period_s
    rt1, rb1, rt2, rb2 = rates.r_t1, rates.r_b1, rates.r_t2, rates.r_b2
    value = scale * (rt1.value * rb2.value + rb1.value * rt2.value
                     - rb1.value * rb2.value)
    d_rt1 = scale * rb2.value
    d_rb1 = scale * (rt2.value - rb2.value)
    d_rt2 = scale * rb1.value
    d_rb2 = scale * (rt1.value - rb1.value)
    sigma = math.hypot(
        d_rt1 * rt1.sigma, d_rb1 * rb1.sigma, d_rt2 * rt2.sigma, d_rb2 * rb2.sigma
    )
    return Measured(value, sigma)


def g2_zero(c0: float, c_tau: Measured, c_b: Measured,
            n_side_peaks: int = 0) -> G2Report:
    """Background-corrected and raw g2(0) with propagated uncertainties.

    g2_corrected = (C0 - C_B) / (C_tau - C_B) and g2_raw = C0 / C_tau, with
    sigma(C0) = sqrt(C0) (Poisson), the side-peak standard error of the
    mean, and the background error combined to first order.
    """
    if c0 < 0:
        raise ValueError("c0 must be nonnegative")
    if c_tau.value <= c_b.value:
        raise DegenerateDenominatorError(
            f"side-peak mean {c_tau.value} does not exceed background {c_b.value}")
    s0 = math.sqrt(c0)
    num = c0 - c_b.value
    den = c_tau.value - c_b.value
    g2c = num / den
    g2c_sigma = math.hypot(
        s0 / den,
        num * c_tau.sigma / den**2,
        (num - den) * c_b.sigma / den**2,
    )
    g2r = c0 / c_tau.value
    g2r_sigma = math.hypot(
        s0 / c_tau.value,
        c0 * c_tau.sigma / c_tau.value**2,
    )
    return G2Report(
        c0=Measured(c0, s0),
        c_tau=c_tau,
        c_b=c_b,
        n_side_peaks=n_side_peaks,
        g2_raw=Measured(g2r, g2r_sigma),
        g2_corrected=Measured(g2c, g2c_sigma),
    )


def g2_n_prediction(n: int) -> float:
    """Second-order correlation of n independent emitters: 1 - 1/n."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return 1.0 - 1.0 / n


def multiphoton_bound(p1: float, g2: float) -> float:
    """Upper bound on the two-emission infidelity: P(2)/P(1) ~= p1 * g2 / 2."""
    if not 0.0 < p1 <= 1.0:
        raise ValueError("p1 must be in (0, 1]")
    if g2 < 0.0:
        raise ValueError("g2 must be nonnegative")
    return 0.5 * p1 * g2


def measure_rates(stream: TagStream, background: TagStream,
                  timeline: CycleTimeline) -> RateSet:
    """Gated singles rates of a signal run and a no-emitter background run.

    Rates are gated counts divided by the run duration, with Poisson
    standard errors.
    """
    def gated_rate(s: TagStream, channel: int) -> Measured:
        n = int(np.count_nonzero(
            in_gate(s.channel_times(channel), timeline)))
        t = s.duration_s()
        if t <= 0:
            raise ValueError("stream duration must be positive")
        return Measured(n / t, math.sqrt(n) / t)

    return RateSet(
        r_t1=gated_rate(stream, 1),
        r_b1=gated_rate(background, 1),
        r_t2=gated_rate(stream, 2),
        r_b2=gated_rate(background, 2),
    )


def analyze_stream(
    stream: TagStream,
    timeline: CycleTimeline,
    rates: RateSet,
    bin_width_ps: int = 1000,
    peak_half_width_ps: int = 10_000,
    n_side_peaks: int = 32,
    n_shards: int = 1,
    threads: int = 1,
):
    """Full pulsed-g2 pipeline: gate, correlate, integrate, estimate.

    Returns (gated correlation histogram, G2Report).
    """
    gated = gate_stream(stream, timeline)
    reach = (n_side_peaks // 2) * stream.rep_period_ps + 2 * peak_half_width_ps
    reach = -(-reach // bin_width_ps) * bin_width_ps
    hist = cross_correlate(gated, bin_width_ps=bin_width_ps,
                           tau_min_ps=-reach, tau_max_ps=reach,
                           n_shards=n_shards, threads=threads)
    c0 = integrate_peak(hist, 0, peak_half_width_ps)
    mean, sem, _peaks = side_peak_stats(hist, stream.rep_period_ps,
                                        n_side_peaks, peak_half_width_ps)
    c_b = expected_background(rates, stream.duration_s(),
                              stream.rep_period_ps * 1e-12)
    report = g2_zero(c0, Measured(mean, sem), c_b, n_side_peaks=n_side_peaks)
    return hist, report


def offline_report(c0: float, c_tau_mean: float, n_side_peaks: int,
                   rates: RateSet, t_exp_s: float, rep_period_s: float) -> G2Report:
    """g2(0) from already-integrated counts (no stream required).

    Without per-peak data the side-peak standard error falls back on the
    Poisson estimate sqrt(mean / n_peaks).
    """
    if n_side_peaks < 1:
        raise ValueError("n_side_peaks must be >= 1")
    c_tau = Measured(c_tau_mean, math.sqrt(c_tau_mean / n_side_peaks))
    c_b = expected_background(rates, t_exp_s, rep_period_s)
    return g2_zero(c0, c_tau, c_b, n_side_peaks=n_side_peaks)


def format_g2_report(report: G2Report, extra: dict | None = None) -> str:
    """Structured-text report with every intermediate quantity."""
    lines = ["# g2 analysis report"]
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    lines += [
        f"c0 = {report.c0.value:.9g}",
        f"c0_sigma = {report.c0.sigma:.9g}",
        f"c_tau_mean = {report.c_tau.value:.9g}",
        f"c_tau_sem = {report.c_tau.sigma:.9g}",
        f"n_side_peaks = {report.n_side_peaks}",
        f"c_b = {report.c_b.value:.9g}",
        f"c_b_sigma = {report.c_b.sigma:.9g}",
        f"g2_raw = {report.g2_raw.value:.9g}",
        f"g2_raw_sigma = {report.g2_raw.sigma:.9g}",
        f"g2_corrected = {report.g2_corrected.value:.9g}",
        f"g2_corrected_sigma = {report.g2_corrected.sigma:.9g}",
    ]
    return "\n".join(lines) + "\n"


def parse_g2_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_histogram_csv(hist: CorrelationHistogram, sink, extra: dict | None = None):
    """Text export: '#' metadata header then one 'tau_ps,count' row per bin."""
    lines = [
        "# correlation histogram",
        f"# bin_width_ps={hist.bin_width_ps}",
        f"# tau_min_ps={hist.tau_min_ps}",
        f"# tau_max_ps={hist.tau_max_ps}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"# {key}={value}")
    edges = hist.bin_lower_edges()
    lines.extend(f"{int(tau)},{int(count)}"
                 for tau, count in zip(edges, hist.counts))
    text = "\n".join(lines) + "\n"
    if hasattr(sink, "write"):
        sink.write(text)
    else:
        with open(sink, "w") as fh:
            fh.write(text)


def read_histogram_csv(source) -> CorrelationHistogram:
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source) as fh:
            text = fh.read()
    header = {}
    counts = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if value:
                header[key.strip()] = value.strip()
        else:
            _tau, count = line.split(",")
            counts.append(int(count))
    return CorrelationHistogram(
        bin_width_ps=int(header["bin_width_ps"]),
        tau_min_ps=int(header["tau_min_ps"]),
        tau_max_ps=int(header["tau_max_ps"]),
        counts=np.asarray(counts, dtype=np.int64),
    )
