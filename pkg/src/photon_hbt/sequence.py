"""Per-cycle experiment timeline and the software detection gate.

One repetition cycle consists of optical pumping, the fast excitation
pulse, a software gate during which detector events are kept, a quench
pulse that empties the metastable levels, and Doppler cooling that fills
the remainder of the repetition period.  Only the gate placement matters
for the correlation analysis; the other phase lengths position the pulse
within the cycle and bound where leakage light can fall.
"""

from __future__ import annotations

from dataclasses import dataclass

DEFAULT_REP_PERIOD_PS = 1_250_000
DEFAULT_GATE_WIDTH_PS = 10_000
DEFAULT_GATE_DELAY_PS = 4_500
DEFAULT_PUMP_PS = 490_000
DEFAULT_EXCITE_PS = 300
DEFAULT_QUENCH_PS = 100_000


class TimingError(ValueError):
    """A cycle phase does not fit inside the repetition period."""


@dataclass(frozen=True)
class CycleTimeline:
    """Immutable per-cycle schedule.

    ``phases`` is an ordered tuple of (label, start_ps, end_ps) intervals.
    The gate interval is half-open: [gate_start_ps, gate_start_ps + gate_width_ps).
    """

    rep_period_ps: int
    pulse_peak_ps: int
    gate_start_ps: int
    gate_width_ps: int
    phases: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        if self.rep_period_ps <= 0:
            raise TimingError("rep_period_ps must be positive")
        for label, start, end in self.phases:
            if not 0 <= start < end:
                raise TimingError(f"phase '{label}' has invalid bounds [{start}, {end})")
            if end > self.rep_period_ps:
                raise TimingError(
                    f"phase '{label}' ends at {end} ps, beyond the "
                    f"{self.rep_period_ps} ps repetition period"
                )
        if self.gate_width_ps <= 0:
            raise TimingError("gate_width_ps must be positive")
        if self.gate_start_ps < 0 or self.gate_end_ps > self.rep_period_ps:
            raise TimingError("gate does not fit inside the repetition period")

    @property
    def gate_end_ps(self) -> int:
        return self.gate_start_ps + self.gate_width_ps

    def describe(self) -> str:
        """Human-readable structured-text block for reports."""
        lines = [
            "# cycle timeline",
            f"rep_period_ps = {self.rep_period_ps}",
            f"pulse_peak_ps = {self.pulse_peak_ps}",
            f"gate_start_ps = {self.gate_start_ps}",
            f"gate_width_ps = {self.gate_width_ps}",
        ]
        for label, start, end in self.phases:
            lines.append(f"phase.{label} = [{start}, {end})")
        return "\n".join(lines) + "\n"


def build_cycle(config=None) -> CycleTimeline:
    """Assemble the cycle timeline from a config object.

    ``config`` may be any object carrying (a subset of) the timing
    attributes ``rep_period_ps``, ``gate_width_ps``, ``gate_delay_ps``,
    ``pump_ps``, ``excite_ps``, ``quench_ps`` and ``cool_ps``; missing
    attributes fall back to the module defaults.  ``cool_ps = None``
    stretches Doppler cooling to fill the repetition period exactly.

    Raises TimingError naming the offending phase when the schedule
    overflows the repetition period.
    """

    def get(name, default):
        value = getattr(config, name, None) if config is not None else None
        return default if value is None else value

    rep = int(get("rep_period_ps", DEFAULT_REP_PERIOD_PS))
    gate_width = int(get("gate_width_ps", DEFAULT_GATE_WIDTH_PS))
    gate_delay = int(get("gate_delay_ps", DEFAULT_GATE_DELAY_PS))
    pump = int(get("pump_ps", DEFAULT_PUMP_PS))
    excite = int(get("excite_ps", DEFAULT_EXCITE_PS))
    quench = int(get("quench_ps", DEFAULT_QUENCH_PS))
    cool = get("cool_ps", None)

    if min(rep, gate_width, gate_delay, pump, excite, quench) <= 0:
        raise TimingError("timing fields must be positive")

    pulse_peak = pump + excite // 2
    gate_start = pulse_peak + gate_delay
    gate_end = gate_start + gate_width
    quench_end = gate_end + quench
    if cool is None:
        cool_end = rep
        if quench_end >= rep:
            raise TimingError(
                f"phase 'cool' has no room: quench ends at {quench_end} ps "
                f"of a {rep} ps repetition period"
            )
    else:
        cool_end = quench_end + int(cool)

    phases = (
        ("pump", 0, pump),
        ("excite", pump, pump + excite),
        ("gate", gate_start, gate_end),
        ("quench", gate_end, quench_end),
        ("cool", quench_end, cool_end),
    )
    return CycleTimeline(
        rep_period_ps=rep,
        pulse_peak_ps=pulse_peak,
        gate_start_ps=gate_start,
        gate_width_ps=gate_width,
        phases=phases,
    )


def default_timeline() -> CycleTimeline:
    return build_cycle(None)


def in_gate(t_ps, timeline: CycleTimeline):
    """True iff t_ps modulo the repetition period falls inside the gate.

    Accepts a scalar or a numpy integer array; the gate interval is
    half-open, so ``t = gate_start`` is inside and ``t = gate_end`` is not.
    """
    r = t_ps % timeline.rep_period_ps
    return (r >= timeline.gate_start_ps) & (r < timeline.gate_end_ps)
