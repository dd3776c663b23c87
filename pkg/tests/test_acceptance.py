"""End-to-end runs of the built-in scenarios."""
import math

import pandas as pd
import pytest

from qdeom.analyze import optimal_delay, sweep_envelope, transmitted_fraction
from qdeom.emitter import coherence_params
from qdeom.eomod import EomParams
from qdeom.scenario import preset_path, run_scenario

pytestmark = pytest.mark.slow


def run_preset(name, tmp_path, **kwargs):
    return run_scenario(preset_path(name), tmp_path, settings_path=tmp_path / 'none.ini', **kwargs)


def test_decay_and_contour(tmp_path):
    report = run_preset('fig2', tmp_path)
    assert report.duration_s < 60

    fit = report.fits['unmodulated']
    assert abs(fit.params['tau'] - 1.4) <= fit.ci95['tau']
    assert fit.ci95['tau'] <= 0.1

    assert len(report.contour) == 6
    assert (report.contour['deviation'].abs() <= 0.03).all()
    checks = report.peak_checks
    assert len(checks) == 6
    assert (checks['relative_diff'].abs() <= 0.05).all()


def test_laser_calibration_widths(tmp_path):
    report = run_preset('laser-cal', tmp_path)
    for label, target, tolerance in (('cal720_d0.00', 0.720, 0.018),
                                     ('cal520_d0.00', 0.520, 0.013),
                                     ('cal770_d0.00', 0.770, 0.019)):
        width = report.fits[label].params['fwhm_deconvolved']
        assert abs(width - target) <= tolerance, label


def test_notches(tmp_path):
    report = run_preset('fig3b', tmp_path)
    folder = tmp_path / 'fig3b'
    assert len(list(folder.glob('notch770_*_hist.csv'))) == 4
    floor = EomParams().floor
    for path in folder.glob('notch770_*_envelope.csv'):
        transmission = pd.read_csv(path)['transmission']
        assert transmission.min() >= floor * (1 - 1e-9)
        assert transmission.max() / transmission.min() >= 100 * (1 - 1e-9)
    assert len(report.notches) == 4
    assert all(ratio < 0.5 for ratio, _ in report.notches.values())


def test_single_window(tmp_path):
    report = run_preset('fig3a', tmp_path, n_pulses=200_000)
    assert set(report.fits) | set(report.fit_errors) == {'unmodulated', 'mod520_d0.80'}


def test_tradeoff_calibration(tmp_path):
    report = run_preset('tradeoff', tmp_path)
    table = report.tradeoff
    assert [r.tau_mod for r in table.rows] == [0.14, 0.3, 0.52, 0.72, math.inf]
    row = table.row(0.14)
    assert 0.08 <= row.transmitted_fraction <= 0.12
    assert row.rate == pytest.approx(6.8e4, rel=1e-6)
    assert 'required product' in report.calibration
    assert table.row(math.inf).indist_exact == pytest.approx(0.1, abs=1e-3)
    for r in table.rows:
        assert abs(r.indist_mc - r.indist_exact) <= 3 * r.indist_mc_se + 1e-3
    assert (tmp_path / 'tradeoff' / 'tradeoff.csv').is_file()


def test_fraction_of_shortest_window():
    model = coherence_params(1.4, 0.28)
    env = sweep_envelope(0.14, EomParams(extinction_db=math.inf))
    fraction = transmitted_fraction(model, env, optimal_delay(model, env))
    assert fraction == pytest.approx(0.0955, abs=0.005)


def test_preset_runs_are_byte_identical(tmp_path):
    run_preset('fig3a', tmp_path / 'a', n_pulses=200_000)
    run_preset('fig3a', tmp_path / 'b', n_pulses=200_000)
    for path in sorted((tmp_path / 'a' / 'fig3a').glob('*.csv')):
        assert path.read_bytes() == (tmp_path / 'b' / 'fig3a' / path.name).read_bytes(), path.name
