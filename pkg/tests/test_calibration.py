import io
import math

import numpy as np
import pytest

from photon_hbt.calibration import (
    DegenerateFitError,
    ExtinctionBudget,
    InconsistentDataError,
    PowerScanPoint,
    aom_gate_improvement,
    compose_fidelities,
    doubled_extinction,
    extinction_budget,
    extinction_db,
    factorize_fidelities,
    fit_power_vs_reprate,
    format_budget_report,
    fwhm_ps,
    leakage_excitation_probability,
    peak_power_from_trace,
    read_power_scan,
    read_waveform_csv,
    srd_pulse_shape,
    write_waveform_csv,
)

PJ = 1e-12
UW = 1e-6


def reference_scan(rates=(1e5, 2e5, 4e5, 6e5, 8e5)):
    return [PowerScanPoint(f, 19.1 * PJ * f + 1.92 * UW) for f in rates]


def test_fit_exact_on_noiseless_line():
    fit = fit_power_vs_reprate(reference_scan())
    assert fit.pulse_energy_j == pytest.approx(19.1 * PJ, rel=1e-12)
    assert fit.cw_background_w == pytest.approx(1.92 * UW, rel=1e-12)
    assert fit.pulse_energy_sigma_j < 1e-12 * PJ
    assert fit.cw_background_sigma_w < 1e-12 * UW


def test_fit_two_points():
    # two points on power = b + s * f recover slope s and intercept b exactly
    s, b = 2e-11, 3e-6
    pts = [PowerScanPoint(1e5, b + s * 1e5), PowerScanPoint(3e5, b + s * 3e5)]
    fit = fit_power_vs_reprate(pts)
    assert fit.pulse_energy_j == pytest.approx(s, rel=1e-12)
    assert fit.cw_background_w == pytest.approx(b, rel=1e-12)
    assert fit.pulse_energy_sigma_j == 0.0


def test_fit_degenerate():
    with pytest.raises(DegenerateFitError):
        fit_power_vs_reprate([PowerScanPoint(1e5, 1.0), PowerScanPoint(1e5, 2.0)])


def test_fit_order_invariance():
    pts = reference_scan()
    fit_a = fit_power_vs_reprate(pts)
    fit_b = fit_power_vs_reprate(list(reversed(pts)))
    assert fit_a == fit_b


def test_fit_recovers_noisy_truth():
    # Monte Carlo of the weighted estimator: unbiased, errors calibrated
    rng = np.random.default_rng(17)
    slope, intercept, sigma = 19.1 * PJ, 1.92 * UW, 0.05 * UW
    rates = np.linspace(1e5, 1e6, 10)
    slopes = np.zeros(100)
    slope_errs = np.zeros(100)
    for k in range(100):
        pts = [PowerScanPoint(f, slope * f + intercept + rng.normal(0, sigma),
                              sigma_w=sigma) for f in rates]
        fit = fit_power_vs_reprate(pts)
        slopes[k] = fit.pulse_energy_j
        slope_errs[k] = fit.pulse_energy_sigma_j
    pulls = (slopes - slope) / slope_errs
    assert abs(pulls.mean()) < 3 / math.sqrt(100)
    assert np.count_nonzero(np.abs(pulls) > 3) <= 3
    assert 0.7 < pulls.std(ddof=1) < 1.3


def test_power_scan_csv_roundtrip(tmp_path):
    path = tmp_path / "scan.csv"
    path.write_text("# rep_rate_hz,avg_power_w,sigma\n"
                    "100000,2.0e-6\n"
                    "200000,4.0e-6,1e-8\n")
    points = read_power_scan(path)
    assert len(points) == 2
    assert points[0].rep_rate_hz == 1e5
    assert points[1].sigma_w == 1e-8
    with pytest.raises(ValueError):
        read_power_scan(io.StringIO("1,2,3,4\n"))


def test_peak_power_rectangle():
    t = np.arange(-50.0, 250.0, 0.05)
    v = ((t >= 0.0) & (t < 148.0)).astype(float)
    peak = peak_power_from_trace(t, v, 19.1 * PJ)
    assert peak == pytest.approx(0.12905405405, rel=1e-3)


def test_peak_power_with_rf_tail():
    # shaped like the measured pulse: 148 ps core plus amplifier tail
    from photon_hbt.calibration import RF_TAIL_FRACTION, RF_TAIL_TAU_PS
    t, v = srd_pulse_shape(tail_fraction=RF_TAIL_FRACTION,
                           tail_tau_ps=RF_TAIL_TAU_PS, sample_step_ps=0.5)
    peak = peak_power_from_trace(t, v, 19.1 * PJ)
    assert abs(peak - 52e-3) < 0.1 * 52e-3


def test_peak_power_scale_invariance():
    t, v = srd_pulse_shape()
    a = peak_power_from_trace(t, v, 19.1 * PJ)
    b = peak_power_from_trace(t, 7.3 * v, 19.1 * PJ)
    assert a == pytest.approx(b, rel=1e-12)


def test_peak_power_rejects_bad_trace():
    t = np.arange(10.0)
    with pytest.raises(ValueError):
        peak_power_from_trace(t, np.zeros(10), 1e-12)
    with pytest.raises(ValueError):
        peak_power_from_trace(t, -np.ones(10), 1e-12)


def test_extinction_db():
    assert extinction_db(52e-3, 1.92 * UW) == pytest.approx(44.327, abs=5e-3)
    assert extinction_db(1.0, 1.0) == 0.0
    assert extinction_db(10.0, 1.0) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        extinction_db(0.0, 1.0)


def test_extinction_db_inverts_ratio_construction():
    # building a power ratio from db and measuring it back is the identity
    for db in np.linspace(-40.0, 80.0, 37):
        ratio = 10.0 ** (db / 10.0)
        assert abs(extinction_db(ratio * 2.5e-6, 2.5e-6) - db) < 1e-12


def test_doubled_extinction():
    assert doubled_extinction(31.0) == 62.0
    assert doubled_extinction(0.0) == 0.0
    # squaring a 1e3 power ratio: 30 dB -> 60 dB
    assert doubled_extinction(10 * math.log10(1e3)) == pytest.approx(
        10 * math.log10(1e6))


def test_aom_gate_improvement():
    gain = aom_gate_improvement(80_000, 1_250_000)
    assert gain == pytest.approx(11.938, abs=1e-3)
    assert 43.3 + gain == pytest.approx(55.0, abs=1.0)
    assert aom_gate_improvement(1_250_000, 1_250_000) == 0.0
    assert aom_gate_improvement(125_000, 1_250_000) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        aom_gate_improvement(2_000_000, 1_250_000)


def test_srd_pulse_fwhm():
    t, v = srd_pulse_shape()  # 1 cm line, 1.35e8 m/s, 60 ps edge
    assert abs(fwhm_ps(t, v) - 148.0) < 5.0


def test_srd_rectangle_limit():
    t, v = srd_pulse_shape(edge_time_ps=1e-3, sample_step_ps=0.01)
    assert fwhm_ps(t, v) == pytest.approx(148.148, abs=0.05)
    interior = v[(t > 10) & (t < 138)]
    assert np.all(interior > 0.999)
    outside = v[(t < -10) | (t > 158)]
    assert np.all(outside < 1e-3)


def test_srd_fwhm_scales_with_line_length():
    t1, v1 = srd_pulse_shape(line_length_m=0.01)
    t2, v2 = srd_pulse_shape(line_length_m=0.02)
    t3, v3 = srd_pulse_shape(line_length_m=0.03)
    w1, w2, w3 = fwhm_ps(t1, v1), fwhm_ps(t2, v2), fwhm_ps(t3, v3)
    assert w1 < w2 < w3
    assert w2 == pytest.approx(2 * 148.148, abs=5.0)


def test_srd_fwhm_step_independent():
    widths = [fwhm_ps(*srd_pulse_shape(sample_step_ps=s)) for s in (0.25, 1.0, 2.5)]
    assert max(widths) - min(widths) < 0.5


def test_leakage_probability():
    p = leakage_excitation_probability(0.99, extinction_budget().total_db)
    assert 1e-6 < p < 1e-5
    assert leakage_excitation_probability(0.5, 0.0) == 0.5
    with pytest.raises(ValueError):
        leakage_excitation_probability(1.5, 10.0)


def test_extinction_budget_chain():
    budget = extinction_budget()
    labels = [label for label, _db in budget.stages]
    assert len(labels) == len(set(labels)) == 4
    running = dict(zip(labels, np.cumsum([db for _l, db in budget.stages])))
    assert running["frequency doubling (ratio squared)"] == pytest.approx(62.0)
    assert running["ase floor at doubler output"] == pytest.approx(43.3)
    assert budget.total_db == pytest.approx(55.24, abs=0.01)
    text = format_budget_report(budget)
    for label in labels:
        assert label in text
    assert "total_db = 55.24" in text


def test_zero_stage_budget():
    budget = ExtinctionBudget(stages=(("a", 0.0), ("b", 0.0)))
    assert budget.total_db == 0.0


def test_factorize_trivial_and_closed_forms():
    assert factorize_fidelities(1.0, 1.0, 1.0) == (1.0, 1.0, 1.0)
    # F2 = 1 means f_ab = f_pump exactly, so F1 = f_a / f_ab
    f_pump, f_1, f_2 = 0.995, 0.93, 1.0
    f_a, f_b, f_ab = compose_fidelities(f_pump, f_1, f_2)
    assert f_ab == pytest.approx(f_pump)
    rp, r1, r2 = factorize_fidelities(f_a, f_b, f_ab)
    assert r1 == pytest.approx(f_a / f_ab, abs=1e-9)
    assert r2 == pytest.approx(1.0, abs=1e-9)


def test_factorize_roundtrip():
    ins = (0.995, 0.98, 0.97)
    rec = factorize_fidelities(*compose_fidelities(*ins))
    assert max(abs(a - b) for a, b in zip(ins, rec)) < 1e-9


def test_factorize_product_model():
    ins = (0.99, 0.9, 0.8)
    rec = factorize_fidelities(*compose_fidelities(*ins, model="product"),
                               model="product")
    assert max(abs(a - b) for a, b in zip(ins, rec)) < 1e-9


def test_factorize_inconsistent_data():
    # f_ab above 1 - (1-f_a)(1-f_b) would need a pump fidelity above 1
    with pytest.raises(InconsistentDataError):
        factorize_fidelities(0.9, 0.9, 0.995)
    # f_ab below max(f_a, f_b) would need an unphysical rescue fidelity
    with pytest.raises(InconsistentDataError):
        factorize_fidelities(0.9, 0.9, 0.85)
    with pytest.raises(ValueError):
        factorize_fidelities(0.0, 0.9, 0.9)


def test_waveform_csv_roundtrip(tmp_path):
    t, v = srd_pulse_shape(sample_step_ps=10.0)
    path = tmp_path / "wave.csv"
    write_waveform_csv(t, v, path)
    t_back, v_back = read_waveform_csv(path)
    assert t_back.size == t.size
    assert np.allclose(t_back, t, rtol=1e-8)
    assert np.allclose(v_back, v, atol=1e-8)
    # the parsed trace supports the same analysis as the original
    assert fwhm_ps(t_back, v_back) == pytest.approx(fwhm_ps(t, v), abs=0.5)
