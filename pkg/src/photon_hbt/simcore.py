"""Stochastic photon-emission model for independent trapped-ion emitters.

Every repetition cycle each ion is treated independently.  The excitation
pulse leaves the ion excited with probability ``p_excite``, producing one
photon a decay delay after the pulse peak.  Re-excitation within the pulse
can add a second photon (joint probability ``p_double`` per cycle).  Any
decay can branch into the shelved metastable level; because the quench
light only runs after the gate, such a branch ends that ion's emission for
the rest of the cycle.  Light leaking through the pulse carver outside the
pulse can eject one more photon, placed uniformly over the ungated part of
the cycle.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .sequence import CycleTimeline, default_timeline

_BATCH_CHUNK_CYCLES = 1_000_000


class EmissionKind(enum.IntEnum):
    PULSE_PHOTON = 0
    DOUBLE_PHOTON = 1
    LEAKAGE_PHOTON = 2


class EmissionEvent(NamedTuple):
    emitter_id: int
    t_emit_ps: int
    kind: EmissionKind
    shelved: bool = False  # decay branched into the metastable level


@dataclass(frozen=True)
class EmitterModel:
    """Per-ion emission parameters.

    ``p_double`` is the joint per-cycle probability of a second,
    pulse-induced emission, so the conditional re-excitation probability
    given an excitation is ``p_double / p_excite``.
    """

    lifetime_ps: int = 6990
    branch_to_d: float = 1.0 / 17.0
    p_excite: float = 0.99
    p_double: float = 0.0
    p_leakage_excite: float = 0.0

    def __post_init__(self):
        if self.lifetime_ps <= 0:
            raise ValueError("lifetime_ps must be positive")
        for name in ("branch_to_d", "p_excite", "p_double", "p_leakage_excite"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.p_double > self.p_excite:
            raise ValueError("p_double must not exceed p_excite")


@dataclass
class EmissionBatch:
    """Column-oriented emission record for many cycles (vectorized twin of
    sample_cycle_emissions, used for large statistical runs)."""

    n_cycles: int
    n_ions: int
    cycle: np.ndarray    # int64
    emitter: np.ndarray  # int32
    kind: np.ndarray     # uint8, EmissionKind values
    t_ps: np.ndarray     # int64, relative to cycle start
    shelved: np.ndarray  # bool

    def __len__(self):
        return self.cycle.size


def sample_decay_delay(model: EmitterModel, rng, size=None):
    """Draw spontaneous-decay delays in picoseconds.

    Exponential with mean ``model.lifetime_ps``; returns a float scalar,
    or a float64 array when ``size`` is given.
    """
    return rng.exponential(model.lifetime_ps, size)


def _leak_time(rng, timeline: CycleTimeline) -> int:
    # uniform over [0, rep) excluding the gate window
    u = int(rng.integers(0, timeline.rep_period_ps - timeline.gate_width_ps))
    if u >= timeline.gate_start_ps:
        u += timeline.gate_width_ps
    return u


def sample_cycle_emissions(
    model: EmitterModel,
    n_ions: int,
    rng,
    timeline: CycleTimeline | None = None,
) -> list[EmissionEvent]:
    """Sample all emission events of one repetition cycle.

    Each ion independently: with probability ``p_excite`` it emits a pulse
    photon at the pulse peak plus a decay delay; if that decay did not
    shelve, a second emission follows with conditional probability
    ``p_double / p_excite``; unless a shelving branch terminated the
    cycle, a leakage photon is added with probability
    ``p_leakage_excite``, uniform over the ungated remainder of the cycle.

    Returns the events sorted by emission time.
    """
    if n_ions < 1:
        raise ValueError(f"n_ions must be >= 1, got {n_ions}")
    if timeline is None:
        timeline = default_timeline()
    peak = timeline.pulse_peak_ps
    q_double = model.p_double / model.p_excite if model.p_excite > 0 else 0.0

    events: list[EmissionEvent] = []
    for ion in range(n_ions):
        terminated = False
        if rng.random() < model.p_excite:
            shelved = rng.random() < model.branch_to_d
            t = peak + int(np.rint(sample_decay_delay(model, rng)))
            events.append(EmissionEvent(ion, t, EmissionKind.PULSE_PHOTON, shelved))
            if shelved:
                terminated = True
            elif rng.random() < q_double:
                shelved2 = rng.random() < model.branch_to_d
                t2 = peak + int(np.rint(sample_decay_delay(model, rng)))
                events.append(EmissionEvent(ion, t2, EmissionKind.DOUBLE_PHOTON, shelved2))
                terminated = shelved2
        if not terminated and rng.random() < model.p_leakage_excite:
            events.append(
                EmissionEvent(ion, _leak_time(rng, timeline), EmissionKind.LEAKAGE_PHOTON)
            )
    events.sort(key=lambda e: (e.t_emit_ps, e.emitter_id))
    return events


def _sample_chunk(model, n_ions, n_cycles, rng, timeline):
    shape = (n_cycles, n_ions)
    pe = model.p_excite
    b = model.branch_to_d
    q_double = model.p_double / pe if pe > 0 else 0.0

    emitted = rng.random(shape) < pe
    shelved1 = emitted & (rng.random(shape) < b)
    doubled = emitted & ~shelved1 & (rng.random(shape) < q_double)
    shelved2 = doubled & (rng.random(shape) < b)
    alive = ~(shelved1 | shelved2)
    leaked = alive & (rng.random(shape) < model.p_leakage_excite)

    peak = timeline.pulse_peak_ps
    parts = []
    for mask, kind, shelved in ((emitted, EmissionKind.PULSE_PHOTON, shelved1),
                                (doubled, EmissionKind.DOUBLE_PHOTON, shelved2)):
        cyc, ion = np.nonzero(mask)
        t = peak + np.rint(sample_decay_delay(model, rng, cyc.size)).astype(np.int64)
        parts.append((cyc.astype(np.int64), ion.astype(np.int32),
                      np.full(cyc.size, int(kind), dtype=np.uint8), t,
                      shelved[mask]))
    cyc, ion = np.nonzero(leaked)
    t = rng.integers(0, timeline.rep_period_ps - timeline.gate_width_ps, cyc.size)
    t = np.where(t >= timeline.gate_start_ps, t + timeline.gate_width_ps, t)
    parts.append((cyc.astype(np.int64), ion.astype(np.int32),
                  np.full(cyc.size, int(EmissionKind.LEAKAGE_PHOTON), dtype=np.uint8),
                  t.astype(np.int64), np.zeros(cyc.size, dtype=bool)))

    cols = [np.concatenate([p[i] for p in parts]) for i in range(5)]
    order = np.lexsort((cols[1], cols[3], cols[0]))  # by (cycle, t, emitter)
    return [c[order] for c in cols]


def sample_emissions_batch(
    model: EmitterModel,
    n_ions: int,
    n_cycles: int,
    rng,
    timeline: CycleTimeline | None = None,
) -> EmissionBatch:
    """Vectorized version of sample_cycle_emissions over many cycles.

    Same per-cycle model; processes cycles in chunks to bound memory.
    """
    if n_ions < 1:
        raise ValueError(f"n_ions must be >= 1, got {n_ions}")
    if n_cycles < 0:
        raise ValueError("n_cycles must be nonnegative")
    if timeline is None:
        timeline = default_timeline()

    chunks = []
    done = 0
    while done < n_cycles:
        take = min(_BATCH_CHUNK_CYCLES, n_cycles - done)
        cols = _sample_chunk(model, n_ions, take, rng, timeline)
        cols[0] = cols[0] + done
        chunks.append(cols)
        done += take
    if chunks:
        cycle, emitter, kind, t_ps, shelved = (
            np.concatenate([c[i] for c in chunks]) for i in range(5)
        )
    else:
        cycle = np.empty(0, dtype=np.int64)
        emitter = np.empty(0, dtype=np.int32)
        kind = np.empty(0, dtype=np.uint8)
        t_ps = np.empty(0, dtype=np.int64)
        shelved = np.empty(0, dtype=bool)
    return EmissionBatch(n_cycles, n_ions, cycle, emitter, kind, t_ps, shelved)
