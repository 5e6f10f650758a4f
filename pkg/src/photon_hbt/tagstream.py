"""Detector response, time-tag streams and the bit-exact stream file format.

Emission events are turned into two-channel detector tags: a beamsplitter
routes each photon, per-channel efficiencies thin the stream, Gaussian
timing jitter is added, Poisson dark counts cover the whole cycle while
pulsed-scatter background is confined to the gate window, and a per-channel
dead time suppresses tags that follow an accepted one too closely.

Two generators exist.  ``simulate_stream`` is the production path: it
samples detected events directly (the detection probability per cycle is
tiny, so this is O(tags), not O(cycles)) and shards the cycle index space
over counter-based random streams so the output is independent of thread
count.  ``simulate_stream_reference`` routes every sampled emission and is
the statistical oracle the fast path is tested against.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import exp
from typing import NamedTuple

import numba
import numpy as np

from .rng import bernoulli_positions, shard_rng
from .sequence import CycleTimeline
from .simcore import EmitterModel, sample_emissions_batch

SHARD_CYCLES = 1 << 24

_MAGIC = b"TTAG"
_VERSION = 1
_HEADER = struct.Struct("<4sHHQQQ")  # magic, version, reserved, duration, rep, count
_RECORD_DTYPE = np.dtype([("channel", "u1"), ("t", "<u8")])
assert _HEADER.size == 32 and _RECORD_DTYPE.itemsize == 9


class TimeTag(NamedTuple):
    channel: int
    t_ps: int


class StreamOrderError(ValueError):
    """Tags violate the (t_ps, channel) sort order or the header bounds."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class ParseError(ValueError):
    """A stream file is malformed; ``offset`` is the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class DetectorModel:
    """HBT detection chain: splitter, efficiencies, backgrounds, dead time."""

    eta_1: float
    eta_2: float
    split: float = 0.5
    dark_rate_1: float = 0.0  # counts/s, uniform over the cycle
    dark_rate_2: float = 0.0
    scatter_per_cycle_1: float = 0.0  # mean gated scatter counts per cycle
    scatter_per_cycle_2: float = 0.0
    dead_time_ps: int = 20_000
    jitter_sigma_ps: int = 100

    def __post_init__(self):
        for name in ("eta_1", "eta_2", "split"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.eta_1 * self.split + self.eta_2 * (1.0 - self.split) > 1.0:
            raise ValueError("combined detection probability exceeds 1")
        for name in ("dark_rate_1", "dark_rate_2", "scatter_per_cycle_1",
                     "scatter_per_cycle_2", "dead_time_ps", "jitter_sigma_ps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(eq=False)
class TagStream:
    """Sorted two-channel tag record plus header metadata.

    ``channels`` is uint8 with values in {1, 2}; ``times`` is int64
    picoseconds.  ``meta`` carries non-persisted annotations (seed, gate
    descriptor, creator); the binary format stores only the header fields
    and the tag records.
    """

    duration_ps: int
    rep_period_ps: int
    channels: np.ndarray
    times: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.times.size

    def tags(self):
        """Iterate tags as TimeTag tuples (small streams only)."""
        for ch, t in zip(self.channels, self.times):
            yield TimeTag(int(ch), int(t))

    def duration_s(self) -> float:
        return self.duration_ps * 1e-12

    def channel_times(self, channel: int) -> np.ndarray:
        return self.times[self.channels == channel]

    def validate(self):
        """Raise StreamOrderError at the first invariant violation."""
        if self.duration_ps < 0 or self.rep_period_ps <= 0:
            raise StreamOrderError("invalid header fields", -1)
        if self.channels.size != self.times.size:
            raise StreamOrderError("channel/time arrays differ in length", -1)
        if self.times.size == 0:
            return
        bad = np.nonzero((self.channels != 1) & (self.channels != 2))[0]
        if bad.size:
            raise StreamOrderError(f"channel not in {{1, 2}} at tag {bad[0]}", int(bad[0]))
        if self.times[0] < 0:
            raise StreamOrderError("negative timestamp at tag 0", 0)
        out = np.nonzero(self.times >= self.duration_ps)[0]
        if out.size:
            raise StreamOrderError(
                f"timestamp beyond duration at tag {out[0]}", int(out[0]))
        dt = np.diff(self.times)
        dch = np.diff(self.channels.astype(np.int16))
        bad = np.nonzero((dt < 0) | ((dt == 0) & (dch < 0)))[0]
        if bad.size:
            i = int(bad[0]) + 1
            raise StreamOrderError(f"tags out of order at tag {i}", i)


def write_stream(stream: TagStream, sink, format: str = "binary"):
    """Write a stream to a path or binary file object.

    Refuses invalid streams (StreamOrderError carries the index of the
    first violation).  Binary round trips are bit-identical.
    """
    stream.validate()
    if format == "binary":
        _write_binary(stream, sink)
    elif format == "text":
        _write_text(stream, sink)
    else:
        raise ValueError(f"unknown stream format '{format}'")


def read_stream(source, format: str = "binary") -> TagStream:
    if format == "binary":
        return _read_binary(source)
    if format == "text":
        return _read_text(source)
    raise ValueError(f"unknown stream format '{format}'")


def _write_binary(stream, sink):
    header = _HEADER.pack(_MAGIC, _VERSION, 0, stream.duration_ps,
                          stream.rep_period_ps, len(stream))
    records = np.empty(len(stream), dtype=_RECORD_DTYPE)
    records["channel"] = stream.channels
    records["t"] = stream.times.astype(np.uint64)
    if hasattr(sink, "write"):
        sink.write(header)
        sink.write(records.tobytes())
    else:
        with open(sink, "wb") as fh:
            fh.write(header)
            fh.write(records.tobytes())


def _read_binary(source) -> TagStream:
    if hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    if len(data) < _HEADER.size:
        raise ParseError("truncated header", len(data))
    magic, version, _reserved, duration, rep, count = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0)
    if version != _VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    body = len(data) - _HEADER.size
    if body != count * _RECORD_DTYPE.itemsize:
        offset = _HEADER.size + (body // _RECORD_DTYPE.itemsize) * _RECORD_DTYPE.itemsize
        raise ParseError(
            f"expected {count} records, file holds {body} payload bytes", offset)
    records = np.frombuffer(data, dtype=_RECORD_DTYPE, count=count, offset=_HEADER.size)
    stream = TagStream(
        duration_ps=int(duration),
        rep_period_ps=int(rep),
        channels=records["channel"].copy(),
        times=records["t"].astype(np.int64),
    )
    try:
        stream.validate()
    except StreamOrderError as err:
        raise ParseError(str(err), _HEADER.size + max(err.index, 0) * 9) from err
    return stream


def _write_text(stream, sink):
    lines = [f"# duration_ps={stream.duration_ps}",
             f"# rep_period_ps={stream.rep_period_ps}"]
    lines.extend(f"{int(ch)},{int(t)}" for ch, t in zip(stream.channels, stream.times))
    text = "\n".join(lines) + "\n"
    if hasattr(sink, "write"):
        sink.write(text)
    else:
        with open(sink, "w") as fh:
            fh.write(text)


def _read_text(source) -> TagStream:
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source) as fh:
            text = fh.read()
    duration = rep = None
    channels = []
    times = []
    offset = 0
    for line in text.splitlines(keepends=True):
        stripped = line.strip()
        if stripped.startswith("#"):
            key, _, value = stripped[1:].strip().partition("=")
            if key == "duration_ps":
                duration = int(value)
            elif key == "rep_period_ps":
                rep = int(value)
        elif stripped:
            try:
                ch_text, t_text = stripped.split(",")
                channels.append(int(ch_text))
                times.append(int(t_text))
            except ValueError as err:
                raise ParseError(f"bad record {stripped!r}", offset) from err
        offset += len(line)
    if duration is None or rep is None:
        raise ParseError("missing duration_ps/rep_period_ps header", 0)
    stream = TagStream(
        duration_ps=duration,
        rep_period_ps=rep,
        channels=np.asarray(channels, dtype=np.uint8),
        times=np.asarray(times, dtype=np.int64),
    )
    stream.validate()
    return stream


def detect(events, model: DetectorModel, timeline: CycleTimeline, rng,
           cycle_index: int = 0) -> list[TimeTag]:
    """Detect one cycle's emission events.

    Each emission goes to channel 1 with probability ``split`` (else
    channel 2) and survives with that channel's efficiency; Gaussian
    timing jitter is added.  Poisson dark counts cover the full cycle,
    Poisson scatter counts are confined to the gate window, and the
    per-channel dead time is applied to the merged, sorted tags.
    """
    rep = timeline.rep_period_ps
    base = cycle_index * rep
    raw: list[tuple[int, int]] = []
    for ev in events:
        if rng.random() < model.split:
            ch, eta = 1, model.eta_1
        else:
            ch, eta = 2, model.eta_2
        if rng.random() < eta:
            t = base + ev.t_emit_ps
            if model.jitter_sigma_ps > 0:
                t += int(np.rint(rng.normal(0.0, model.jitter_sigma_ps)))
            raw.append((ch, t))
    for ch, dark, scatter in ((1, model.dark_rate_1, model.scatter_per_cycle_1),
                              (2, model.dark_rate_2, model.scatter_per_cycle_2)):
        for _ in range(rng.poisson(dark * rep * 1e-12)):
            raw.append((ch, base + int(rng.integers(0, rep))))
        for _ in range(rng.poisson(scatter)):
            raw.append((ch, base + int(rng.integers(timeline.gate_start_ps,
                                                    timeline.gate_end_ps))))
    raw.sort(key=lambda tag: (tag[1], tag[0]))
    kept: list[TimeTag] = []
    last = {1: None, 2: None}
    for ch, t in raw:
        if t < base:
            t = base
        if last[ch] is not None and t - last[ch] < model.dead_time_ps:
            continue
        last[ch] = t
        kept.append(TimeTag(ch, t))
    return kept


def gate_acceptance(emitter: EmitterModel, timeline: CycleTimeline) -> float:
    """Probability that an exponential decay photon falls inside the gate."""
    delay = timeline.gate_start_ps - timeline.pulse_peak_ps
    if delay < 0:
        raise ValueError("gate opens before the pulse peak")
    tau = emitter.lifetime_ps
    return exp(-delay / tau) - exp(-(delay + timeline.gate_width_ps) / tau)


def calibrate_detector(
    r_t1: float, r_b1: float, r_t2: float, r_b2: float,
    emitter: EmitterModel, timeline: CycleTimeline,
    split: float = 0.5,
    dark_rate_1: float = 30.0, dark_rate_2: float = 30.0,
    dead_time_ps: int = 20_000, jitter_sigma_ps: int = 100,
) -> DetectorModel:
    """Solve detector efficiencies and scatter levels from measured rates.

    ``r_t*`` and ``r_b*`` are single-ion gated total and residual
    background singles rates in counts/s.  The per-channel efficiency is
    fixed by rate = photons_per_cycle * split_eta * gate_acceptance /
    rep_period; the gated scatter level absorbs whatever background the
    chosen dark rate does not explain.
    """
    if not (0 <= r_b1 <= r_t1 and 0 <= r_b2 <= r_t2):
        raise ValueError("rates must satisfy 0 <= background <= total")
    photons = emitter.p_excite + emitter.p_double * (1.0 - emitter.branch_to_d)
    if photons <= 0:
        raise ValueError("emitter produces no photons; cannot calibrate")
    accept = gate_acceptance(emitter, timeline)
    trep_s = timeline.rep_period_ps * 1e-12
    gate_frac = timeline.gate_width_ps / timeline.rep_period_ps

    s1 = (r_t1 - r_b1) * trep_s / (photons * accept)
    s2 = (r_t2 - r_b2) * trep_s / (photons * accept)
    scatter_1 = (r_b1 - dark_rate_1 * gate_frac) * trep_s
    scatter_2 = (r_b2 - dark_rate_2 * gate_frac) * trep_s
    if scatter_1 < 0 or scatter_2 < 0:
        raise ValueError("dark rate explains more than the measured background")
    return DetectorModel(
        eta_1=s1 / split,
        eta_2=s2 / (1.0 - split),
        split=split,
        dark_rate_1=dark_rate_1,
        dark_rate_2=dark_rate_2,
        scatter_per_cycle_1=scatter_1,
        scatter_per_cycle_2=scatter_2,
        dead_time_ps=dead_time_ps,
        jitter_sigma_ps=jitter_sigma_ps,
    )


@numba.njit(cache=True)
def _deadtime_mask(channels, times, dead_time):
    keep = np.ones(times.size, dtype=np.bool_)
    last1 = np.int64(-(1 << 62))
    last2 = np.int64(-(1 << 62))
    for i in range(times.size):
        t = times[i]
        if channels[i] == 1:
            if t - last1 < dead_time:
                keep[i] = False
            else:
                last1 = t
        else:
            if t - last2 < dead_time:
                keep[i] = False
            else:
                last2 = t
    return keep


def _jitter(rng, n, sigma):
    if sigma <= 0 or n == 0:
        return np.zeros(n, dtype=np.int64)
    return np.rint(rng.normal(0.0, sigma, n)).astype(np.int64)


def _shard_tags(emitter, detector, timeline, n_ions, cycle_start, n_cycles,
                master_seed, shard_index):
    """Detected tags of one contiguous cycle shard (detection-level sampling).

    Per (cycle, ion) the joint distribution of which photons are seen on
    which channel is a small categorical; only cycles with at least one
    visible photon are materialized.
    """
    rng = shard_rng(master_seed, shard_index)
    rep = timeline.rep_period_ps
    peak = timeline.pulse_peak_ps
    base = cycle_start * rep

    ch_parts = []
    t_parts = []

    s1 = detector.split * detector.eta_1
    s2 = (1.0 - detector.split) * detector.eta_2
    s_lost = 1.0 - s1 - s2
    pe = emitter.p_excite
    b = emitter.branch_to_d
    w = emitter.p_double * (1.0 - b)  # joint prob of a second emission
    p_vis = (s1 + s2) * (pe + w * s_lost)

    if n_ions > 0 and p_vis > 0.0:
        trials = n_cycles * n_ions
        # joint (first photon seen on, second photon seen on) categories
        cat_p = np.array([
            pe * s1 - w * s1 * (s1 + s2),  # F->1, D unseen
            pe * s2 - w * s2 * (s1 + s2),  # F->2, D unseen
            w * s1 * s1,                   # F->1, D->1
            w * s1 * s2,                   # F->1, D->2
            w * s2 * s1,                   # F->2, D->1
            w * s2 * s2,                   # F->2, D->2
            w * s_lost * s1,               # F lost, D->1
            w * s_lost * s2,               # F lost, D->2
        ])
        f_ch = np.array([1, 2, 1, 1, 2, 2, 0, 0], dtype=np.uint8)
        d_ch = np.array([0, 0, 1, 2, 1, 2, 1, 2], dtype=np.uint8)

        pos = bernoulli_positions(rng, trials, p_vis)
        cum = np.cumsum(cat_p)
        cum /= cum[-1]  # exact 1.0 endpoint so searchsorted stays in range
        cat = np.searchsorted(cum, rng.random(pos.size), side="right")
        cycle = pos // n_ions
        for ch_of in (f_ch, d_ch):
            seen = ch_of[cat] > 0
            n_seen = int(seen.sum())
            t = (base + cycle[seen] * rep + peak
                 + np.rint(rng.exponential(emitter.lifetime_ps, n_seen)).astype(np.int64)
                 + _jitter(rng, n_seen, detector.jitter_sigma_ps))
            ch_parts.append(ch_of[cat][seen])
            t_parts.append(t)

        # leakage photons: suppressed when a shelving branch ended the cycle
        p_leak_vis = emitter.p_leakage_excite * (1.0 - b * (pe + w)) * (s1 + s2)
        if p_leak_vis > 0.0:
            n_leak = rng.binomial(trials, p_leak_vis)
            cycle = rng.integers(0, n_cycles, n_leak)
            ch = np.where(rng.random(n_leak) < s1 / (s1 + s2), 1, 2).astype(np.uint8)
            off = rng.integers(0, rep - timeline.gate_width_ps, n_leak)
            off = np.where(off >= timeline.gate_start_ps,
                           off + timeline.gate_width_ps, off)
            ch_parts.append(ch)
            t_parts.append(base + cycle * rep + off.astype(np.int64)
                           + _jitter(rng, n_leak, detector.jitter_sigma_ps))

    for ch_value, scatter in ((1, detector.scatter_per_cycle_1),
                              (2, detector.scatter_per_cycle_2)):
        n_scat = rng.poisson(scatter * n_cycles)
        cycle = rng.integers(0, n_cycles, n_scat)
        off = rng.integers(timeline.gate_start_ps, timeline.gate_end_ps, n_scat)
        ch_parts.append(np.full(n_scat, ch_value, dtype=np.uint8))
        t_parts.append(base + cycle * rep + off.astype(np.int64))

    span = n_cycles * rep
    for ch_value, dark in ((1, detector.dark_rate_1), (2, detector.dark_rate_2)):
        n_dark = rng.poisson(dark * span * 1e-12)
        ch_parts.append(np.full(n_dark, ch_value, dtype=np.uint8))
        t_parts.append(base + rng.integers(0, span, n_dark))

    if ch_parts:
        return np.concatenate(ch_parts), np.concatenate(t_parts)
    return np.empty(0, dtype=np.uint8), np.empty(0, dtype=np.int64)


def _assemble_stream(ch, t, duration_ps, timeline, detector, meta) -> TagStream:
    order = np.lexsort((ch, t))
    ch = ch[order]
    t = t[order]
    good = (t >= 0) & (t < duration_ps)
    ch = ch[good]
    t = t[good]
    if detector.dead_time_ps > 0 and t.size:
        keep = _deadtime_mask(ch, t, np.int64(detector.dead_time_ps))
        ch = ch[keep]
        t = t[keep]
    stream = TagStream(
        duration_ps=int(duration_ps),
        rep_period_ps=timeline.rep_period_ps,
        channels=np.ascontiguousarray(ch),
        times=np.ascontiguousarray(t),
        meta=dict(meta),
    )
    stream.validate()
    return stream


def _stream_meta(seed, n_ions, timeline):
    from . import __version__
    return {
        "creator": f"photon-hbt {__version__}",
        "seed": int(seed),
        "n_ions": int(n_ions),
        "gate_start_ps": timeline.gate_start_ps,
        "gate_width_ps": timeline.gate_width_ps,
    }


def simulate_stream(
    emitter: EmitterModel,
    detector: DetectorModel,
    timeline: CycleTimeline,
    n_ions: int,
    duration_ps: int,
    seed: int,
    threads: int = 1,
) -> TagStream:
    """Simulate a full detector tag stream (fast detection-level path).

    The cycle index space is split into fixed SHARD_CYCLES blocks, each
    driven by a counter-based stream keyed on (seed, shard_index); shard
    outputs are merged in cycle order, so the result is bit-identical for
    any thread count.  ``n_ions = 0`` yields a background-only stream.
    """
    if n_ions < 0:
        raise ValueError("n_ions must be nonnegative")
    if duration_ps < 0:
        raise ValueError("duration_ps must be nonnegative")
    rep = timeline.rep_period_ps
    n_cycles = duration_ps // rep
    shards = []
    start = 0
    index = 0
    while start < n_cycles:
        count = min(SHARD_CYCLES, n_cycles - start)
        shards.append((index, start, count))
        start += count
        index += 1

    def job(shard):
        index, cycle_start, count = shard
        return _shard_tags(emitter, detector, timeline, n_ions,
                           cycle_start, count, seed, index)

    if threads > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, shards))
    else:
        results = [job(s) for s in shards]

    if results:
        ch = np.concatenate([r[0] for r in results])
        t = np.concatenate([r[1] for r in results])
    else:
        ch = np.empty(0, dtype=np.uint8)
        t = np.empty(0, dtype=np.int64)
    return _assemble_stream(ch, t, duration_ps, timeline, detector,
                            _stream_meta(seed, n_ions, timeline))


def simulate_stream_reference(
    emitter: EmitterModel,
    detector: DetectorModel,
    timeline: CycleTimeline,
    n_ions: int,
    duration_ps: int,
    seed: int,
) -> TagStream:
    """Reference generator that routes every sampled emission individually.

    Statistically equivalent to simulate_stream but O(cycles); intended
    for validation at test scale, not production runs.
    """
    rng = shard_rng(seed, 0)
    rep = timeline.rep_period_ps
    n_cycles = duration_ps // rep

    ch_parts = []
    t_parts = []
    if n_ions > 0 and n_cycles > 0:
        batch = sample_emissions_batch(emitter, n_ions, n_cycles, rng, timeline)
        n = len(batch)
        ch = np.where(rng.random(n) < detector.split, 1, 2).astype(np.uint8)
        eta = np.where(ch == 1, detector.eta_1, detector.eta_2)
        kept = rng.random(n) < eta
        t = (batch.cycle * rep + batch.t_ps
             + _jitter(rng, n, detector.jitter_sigma_ps))
        ch_parts.append(ch[kept])
        t_parts.append(t[kept])

    for ch_value, scatter in ((1, detector.scatter_per_cycle_1),
                              (2, detector.scatter_per_cycle_2)):
        n_scat = rng.poisson(scatter * n_cycles)
        cycle = rng.integers(0, n_cycles, n_scat) if n_cycles else np.empty(0, np.int64)
        off = rng.integers(timeline.gate_start_ps, timeline.gate_end_ps, n_scat)
        ch_parts.append(np.full(n_scat, ch_value, dtype=np.uint8))
        t_parts.append(cycle * rep + off.astype(np.int64))

    span = n_cycles * rep
    for ch_value, dark in ((1, detector.dark_rate_1), (2, detector.dark_rate_2)):
        n_dark = rng.poisson(dark * span * 1e-12)
        ch_parts.append(np.full(n_dark, ch_value, dtype=np.uint8))
        t_parts.append(rng.integers(0, max(span, 1), n_dark))

    ch = np.concatenate(ch_parts) if ch_parts else np.empty(0, dtype=np.uint8)
    t = np.concatenate(t_parts) if t_parts else np.empty(0, dtype=np.int64)
    return _assemble_stream(ch, t, duration_ps, timeline, detector,
                            _stream_meta(seed, n_ions, timeline))
