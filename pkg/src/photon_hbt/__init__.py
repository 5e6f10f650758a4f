"""Simulator and analysis toolkit for pulsed single-photon HBT experiments.

Generates realistic two-channel time-tag streams from a model of n
independent trapped-ion emitters and computes background-corrected
second-order correlation statistics g2(tau).
"""

__version__ = "0.1.0"

from .config import RunConfig, load_config, save_config
from .correlator import (
    CorrelationHistogram,
    G2Report,
    Measured,
    RateSet,
    analyze_stream,
    cross_correlate,
    expected_background,
    g2_n_prediction,
    g2_zero,
    gate_stream,
    integrate_peak,
    multiphoton_bound,
    side_peak_stats,
)
from .sequence import CycleTimeline, build_cycle, default_timeline, in_gate
from .simcore import EmissionEvent, EmissionKind, EmitterModel
from .tagstream import (
    DetectorModel,
    TagStream,
    TimeTag,
    calibrate_detector,
    detect,
    read_stream,
    simulate_stream,
    simulate_stream_reference,
    write_stream,
)

__all__ = [
    "CorrelationHistogram",
    "CycleTimeline",
    "DetectorModel",
    "EmissionEvent",
    "EmissionKind",
    "EmitterModel",
    "G2Report",
    "Measured",
    "RateSet",
    "RunConfig",
    "TagStream",
    "TimeTag",
    "analyze_stream",
    "build_cycle",
    "calibrate_detector",
    "cross_correlate",
    "default_timeline",
    "detect",
    "expected_background",
    "g2_n_prediction",
    "g2_zero",
    "gate_stream",
    "in_gate",
    "integrate_peak",
    "load_config",
    "multiphoton_bound",
    "read_stream",
    "save_config",
    "side_peak_stats",
    "simulate_stream",
    "simulate_stream_reference",
    "write_stream",
]
