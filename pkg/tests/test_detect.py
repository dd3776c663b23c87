import math

import numpy as np
import pandas as pd
import pytest
from scipy.integrate import trapezoid

from qdeom import detect
from qdeom.detect import (DetectionError, DetectorModel, TimingConfig, analytic_histogram, chi_square,
                          detect_mc, emg_density, expected_density, histogram, merge_histograms,
                          poisson_band_fraction, read_histogram_csv, schedule_events)
from qdeom.emitter import coherence_params, dephase, exponential_wavepacket, sample_phase_trajectory
from qdeom.eomod import EomParams, apply_modulation, unmodulated_envelope
from qdeom.sigcore import Wavepacket, make_time_grid, norm

MODEL = coherence_params(1.4, 0.28)
NO_JITTER = DetectorModel(jitter_fwhm=0.0)


def gate_wavepacket(t_emit=0.0, t_end=50.0, dt=0.001):
    return exponential_wavepacket(MODEL, make_time_grid(0, t_end, dt), t_emit)


def test_schedule_gates_every_tenth_pulse():
    sched = schedule_events(TimingConfig(n_pulses=100))
    rows = sched.records(0, 50)
    gated = rows[rows['gated']]
    assert list(gated['cycle_index']) == [0, 10, 20, 30, 40]
    np.testing.assert_allclose(np.diff(gated['excitation_ns']), 200.0)
    assert sched.cfg.gate_period == 200.0
    assert sched.n_gated == 10


def test_schedule_without_divider_gates_every_pulse():
    sched = schedule_events(TimingConfig(gate_divider=1, n_pulses=25))
    assert sched.records()['gated'].all()
    assert sched.n_gated == 25


def test_schedule_rounds_gated_cycles_up():
    assert schedule_events(TimingConfig(n_pulses=101)).n_gated == 11


def test_trigger_follows_excitation_by_delay():
    rows = schedule_events(TimingConfig(delta_t_mod=2.4, n_pulses=30)).records()
    np.testing.assert_allclose(rows['eom_trigger_ns'] - rows['excitation_ns'], 2.4)


def test_gate_opens_before_excitation_by_lead():
    rows = schedule_events(TimingConfig(gate_lead=2.0, n_pulses=30)).records()
    gated = rows[rows['gated']]
    np.testing.assert_allclose(gated['excitation_ns'] - gated['gate_open_ns'], 2.0)
    np.testing.assert_allclose(gated['gate_close_ns'] - gated['gate_open_ns'], 50.0)


def test_schedule_is_deterministic():
    cfg = TimingConfig(n_pulses=1000, delta_t_mod=0.8)
    pd.testing.assert_frame_equal(schedule_events(cfg).records(), schedule_events(cfg).records())


@pytest.mark.parametrize('kwargs', [{'t_rep': 0}, {'gate_divider': 0}, {'gate_divider': 2.5},
                                    {'n_pulses': 0}, {'gate_lead': 50.0}, {'t_gate': -1}])
def test_invalid_timing(kwargs):
    with pytest.raises(DetectionError):
        TimingConfig(**kwargs)


def test_invalid_detector():
    with pytest.raises(DetectionError):
        DetectorModel(efficiency=1.5)
    with pytest.raises(DetectionError):
        DetectorModel(jitter_fwhm=-0.1)


def test_delta_like_wavepacket_always_clicks_at_its_time():
    grid = make_time_grid(0, 10, 0.001)
    magnitude = np.zeros(grid.n)
    magnitude[3000] = math.sqrt(1.0 / grid.dt)
    psi = Wavepacket(grid, magnitude)
    assert norm(psi) == pytest.approx(1.0)
    sched = schedule_events(TimingConfig(n_pulses=10_000))
    stream = detect_mc(psi, NO_JITTER, sched, seed=1)
    assert len(stream) == sched.n_gated
    assert np.all(np.abs(stream.t_ns - 3.0) <= 0.5 * grid.dt + 1e-12)
    np.testing.assert_array_equal(stream.cycle_index, sched.gated_indices)


def test_detected_count_is_binomial():
    grid = make_time_grid(0, 50, 0.001)
    psi = exponential_wavepacket(MODEL, grid)
    psi = apply_modulation(psi, unmodulated_envelope(EomParams(t_max=0.3), grid))
    det = DetectorModel(jitter_fwhm=0.25, efficiency=0.5)
    sched = schedule_events(TimingConfig(n_pulses=10_000_000))
    stream = detect_mc(psi, det, sched, seed=3)
    mean = sched.n_gated * det.efficiency * norm(psi)
    assert abs(len(stream) - mean) <= 3 * math.sqrt(mean)


def test_photon_after_gate_is_lost():
    psi = exponential_wavepacket(MODEL, make_time_grid(0, 60, 0.01), 55.0)
    stream = detect_mc(psi, NO_JITTER, schedule_events(TimingConfig(n_pulses=10_000)), seed=0)
    assert len(stream) == 0


def test_detection_is_reproducible_per_seed():
    psi = gate_wavepacket()
    det = DetectorModel()
    sched = schedule_events(TimingConfig(n_pulses=300_000))
    a = detect_mc(psi, det, sched, seed=11, chunk_size=7_000)
    b = detect_mc(psi, det, sched, seed=11, chunk_size=7_000)
    np.testing.assert_array_equal(a.t_ns, b.t_ns)
    np.testing.assert_array_equal(a.cycle_index, b.cycle_index)


def test_dephasing_does_not_change_detection():
    psi = gate_wavepacket()
    dephased = dephase(psi, sample_phase_trajectory(MODEL, psi.grid, 4))
    sched = schedule_events(TimingConfig(n_pulses=100_000))
    a = detect_mc(psi, DetectorModel(), sched, seed=9)
    b = detect_mc(dephased, DetectorModel(), sched, seed=9)
    np.testing.assert_array_equal(a.t_ns, b.t_ns)


def test_dephased_stream_shares_one_profile():
    psi = gate_wavepacket(t_end=20.0, dt=0.01)
    sched = schedule_events(TimingConfig(n_pulses=5_000))
    stream = [dephase(psi, sample_phase_trajectory(MODEL, psi.grid, k)) for k in range(sched.n_gated)]
    profiles, which = detect._as_stream(stream, sched.n_gated)
    assert len(profiles) == 1
    assert not which.any()
    a = detect_mc(psi, DetectorModel(), sched, seed=9)
    b = detect_mc(stream, DetectorModel(), sched, seed=9)
    np.testing.assert_array_equal(a.t_ns, b.t_ns)


def test_sampler_cache_eviction_keeps_results(monkeypatch):
    grid = make_time_grid(0, 50, 0.01)
    shapes = [exponential_wavepacket(MODEL, grid, 0.1 * k) for k in range(detect.SAMPLER_CACHE + 8)]
    sched = schedule_events(TimingConfig(n_pulses=20_000))
    stream = [shapes[k % len(shapes)] for k in range(sched.n_gated)]
    small = detect_mc(stream, DetectorModel(), sched, seed=2, chunk_size=500)
    monkeypatch.setattr(detect, 'SAMPLER_CACHE', 1000)
    large = detect_mc(stream, DetectorModel(), sched, seed=2, chunk_size=500)
    np.testing.assert_array_equal(small.t_ns, large.t_ns)
    np.testing.assert_array_equal(small.cycle_index, large.cycle_index)


def test_wavepacket_stream_length_must_match():
    psi = gate_wavepacket(dt=0.01)
    sched = schedule_events(TimingConfig(n_pulses=100))
    with pytest.raises(DetectionError):
        detect_mc([psi] * 3, NO_JITTER, sched, seed=0)


def test_dark_counts_fill_empty_gates():
    grid = make_time_grid(0, 50, 0.01)
    empty = Wavepacket(grid, np.zeros(grid.n))
    det = DetectorModel(jitter_fwhm=0.0, dark_rate=0.01)
    sched = schedule_events(TimingConfig(n_pulses=1_000_000))
    stream = detect_mc(empty, det, sched, seed=5)
    p = 1 - math.exp(-0.5)
    mean = sched.n_gated * p
    assert abs(len(stream) - mean) <= 4 * math.sqrt(mean * (1 - p))
    assert stream.t_ns.min() >= 0.0 and stream.t_ns.max() <= 50.0


def test_histogram_of_nothing():
    h = histogram(np.array([]), 0.1, 5.0)
    assert h.counts.size == 50
    assert h.counts.sum() == 0
    assert h.overflow == 0


def test_histogram_puts_edge_values_in_upper_bin():
    h = histogram(np.full(1000, 1.0), 0.1, 5.0)
    assert h.counts[10] == 1000
    assert h.bin_starts[10] == pytest.approx(1.0)


def test_histogram_conserves_timestamps():
    t = np.random.default_rng(0).normal(3.0, 2.0, 5000)
    h = histogram(t, 0.05, 5.0)
    assert h.counts.sum() + h.overflow == t.size
    assert h.overflow > 0


def test_merged_histograms_equal_single_pass():
    t = np.random.default_rng(1).uniform(0, 12, 4000)
    whole = histogram(t, 0.05, 12.0)
    merged = merge_histograms(histogram(t[:1500], 0.05, 12.0), histogram(t[1500:], 0.05, 12.0))
    np.testing.assert_array_equal(merged.counts, whole.counts)
    assert merged.total_detected == whole.total_detected


def test_merge_rejects_different_bins():
    with pytest.raises(DetectionError):
        merge_histograms(histogram([1.0], 0.05, 12.0), histogram([1.0], 0.1, 12.0))


def test_expectation_without_jitter_is_intensity():
    psi = gate_wavepacket(dt=0.01)
    density = expected_density(psi, NO_JITTER, 1000)
    np.testing.assert_array_equal(density.value, 1000 * 1.0 * psi.magnitude ** 2)


def test_expectation_area_matches_photon_number():
    psi = gate_wavepacket(t_emit=5.0)
    det = DetectorModel(jitter_fwhm=0.25, efficiency=0.7)
    h = analytic_histogram(psi, det, 1000, 0.05)
    assert h.total_detected + h.overflow == pytest.approx(1000 * 0.7 * norm(psi), rel=1e-6)


def test_jittered_expectation_matches_closed_form():
    # 発光時刻をノードの中間に置く
    psi = exponential_wavepacket(MODEL, make_time_grid(0, 40, 0.001), 5.0005)
    det = DetectorModel(jitter_fwhm=0.25)
    density = expected_density(psi, det, 1)
    closed = emg_density(density.grid.times, 1.4, det.sigma, t0=5.0005)
    assert density.value.max() == pytest.approx(closed.max(), rel=1e-4)
    peak_time = density.grid.times[np.argmax(density.value)]
    assert peak_time > 5.0
    assert density.value.max() < MODEL.gamma


def test_emg_density_has_unit_area():
    t = np.linspace(-2, 40, 200_001)
    assert trapezoid(emg_density(t, 1.4, 0.106), t) == pytest.approx(1.0, abs=1e-6)


def test_monte_carlo_matches_expectation_without_jitter():
    psi = exponential_wavepacket(MODEL, make_time_grid(0, 50, 0.001))
    sched = schedule_events(TimingConfig(gate_divider=1, n_pulses=1_000_000))
    stream = detect_mc(psi, NO_JITTER, sched, seed=21)
    h = histogram(stream, 0.05, 20.0)
    expected = analytic_histogram(psi, NO_JITTER, sched.n_gated, 0.05, 20.0)
    assert poisson_band_fraction(h, expected) >= 0.99


def test_monte_carlo_matches_expectation_with_jitter():
    psi = exponential_wavepacket(MODEL, make_time_grid(0, 50, 0.001), 2.0)
    det = DetectorModel(jitter_fwhm=0.25)
    sched = schedule_events(TimingConfig(gate_divider=1, n_pulses=1_000_000))
    stream = detect_mc(psi, det, sched, seed=22)
    h = histogram(stream, 0.05, 20.0)
    expected = analytic_histogram(psi, det, sched.n_gated, 0.05, 20.0)
    assert poisson_band_fraction(h, expected) >= 0.99
    chi2, dof, p = chi_square(h, expected)
    assert p > 0.01


def test_poisson_band_of_expectation_itself():
    psi = gate_wavepacket(dt=0.01)
    expected = analytic_histogram(psi, NO_JITTER, 1000, 0.1, 20.0)
    assert poisson_band_fraction(expected, expected) == 1.0


def test_histogram_csv(tmp_path):
    h = histogram(np.array([0.01, 0.02, 0.3]), 0.1, 1.0, total_pulses=10)
    path = h.to_csv(tmp_path / 'h.csv')
    assert path.read_text().splitlines()[0] == 'bin_start_ns,count'
    back = read_histogram_csv(path)
    np.testing.assert_array_equal(back.counts, h.counts)
    assert back.bin_width == pytest.approx(0.1)
