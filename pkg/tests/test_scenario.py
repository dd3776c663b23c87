import math

import pytest

from qdeom.scenario import ConfigError, load_scenario, plan_jobs, preset_path, run_scenario


@pytest.mark.parametrize('name', ['fig2', 'fig3a', 'fig3b', 'tradeoff', 'laser-cal'])
def test_presets_load(name, no_settings):
    scenario = load_scenario(preset_path(name), no_settings)
    assert scenario.name == name
    assert scenario.dt == 0.001


def test_fig2_preset_contents(no_settings):
    scenario = load_scenario(preset_path('fig2'), no_settings)
    (drive,) = scenario.drives
    assert drive.label == 'mod720'
    assert drive.optical_fwhm == 0.72
    assert drive.delays == pytest.approx((0.0, 0.8, 1.6, 2.4, 3.2, 4.0))
    assert scenario.timing.n_pulses == 1_000_000
    assert scenario.span == 12
    assert scenario.emitter.gamma_star == pytest.approx(3.2143, abs=1e-4)


def test_tradeoff_preset_contents(no_settings):
    scenario = load_scenario(preset_path('tradeoff'), no_settings)
    assert scenario.eom.floor == 0.0
    assert scenario.tradeoff.tau_mod[-1] == math.inf
    assert scenario.tradeoff.target_rate == 6.8e4
    assert not scenario.drives


def test_overrides(no_settings):
    scenario = load_scenario(preset_path('laser-cal'), no_settings, seed=99, n_pulses=5000)
    assert scenario.seed == 99
    assert scenario.timing.n_pulses == 5000
    assert all(d.n_pulses is None for d in scenario.drives)


def test_unknown_preset():
    with pytest.raises(ConfigError, match='available'):
        preset_path('fig9')


def test_missing_file(tmp_path, no_settings):
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / 'nope.ini', no_settings)


@pytest.mark.parametrize('text, key', [
    ("[emitter]\nlifetime = 1.4\n", 'emitter.lifetime'),
    ("[mystery]\nx = 1\n", 'mystery'),
    ("[timing]\ngate_divider = 0\n", 'timing.gate_divider'),
    ("[timing]\nn_pulses = many\n", 'timing.n_pulses'),
    ("[emitter]\ntau_coh_ns = 3.0\n", 'emitter.tau_coh_ns'),
    ("[detector]\nefficiency = 1.5\n", 'detector.efficiency'),
    ("[timing]\ngate_lead_ns = 60\n", 'timing.gate_lead_ns'),
    ("[drive:x]\noptical_fwhm_ns = 0.5\nv_peak_V = 5\n", 'drive:x.v_peak_V'),
    ("[drive:x]\nshape = gaussian\n", 'drive:x.optical_fwhm_ns'),
    ("[drive:x]\nshape = square\n", 'drive:x.width_ns'),
    ("[drive:x]\nshape = triangle\n", 'drive:x.shape'),
    ("[drive:x]\nshape = piecewise\npoints = 0:1, bad\n", 'drive:x.points'),
    ("[analysis]\nfit_range_ns = 3, 1\n", 'analysis.fit_range_ns'),
    ("[tradeoff]\ntau_mod_ns = 0.3\ntarget_rate_hz = 1e4\n", 'tradeoff.calibrate_tau_ns'),
    ("[scenario]\ninclude_unmodulated = False\n", 'scenario'),
])
def test_config_errors_name_the_key(write_ini, no_settings, text, key):
    path = write_ini(text)
    with pytest.raises(ConfigError) as info:
        load_scenario(path, no_settings)
    assert info.value.key == key
    assert key in str(info.value)


def test_user_settings_apply_under_scenario(write_ini, tmp_path):
    settings = tmp_path / 'settings.ini'
    settings.write_text("[workers]\nnum_threads = 3\n[timing]\nn_pulses = 77\n", encoding='utf-8')
    path = write_ini("[scenario]\nname = s\n")
    scenario = load_scenario(path, settings)
    assert scenario.num_threads == 3
    assert scenario.timing.n_pulses == 77


def test_plan_jobs_labels_and_seeds(small_run, no_settings):
    scenario = load_scenario(small_run, no_settings)
    jobs = plan_jobs(scenario)
    assert [j.label for j in jobs] == ['unmodulated', 'mod720_d0.00', 'mod720_d0.80']
    assert [j.seed for j in jobs] == [5, 6, 7]
    assert jobs[1].transmission.max() == pytest.approx(1.0)


def test_small_run_writes_outputs(small_run, tmp_path, no_settings):
    report = run_scenario(small_run, tmp_path / 'out', settings_path=no_settings)
    folder = tmp_path / 'out' / 'small'
    for label in ('unmodulated', 'mod720_d0.00', 'mod720_d0.80'):
        assert (folder / f'{label}_hist.csv').is_file()
        assert (folder / f'{label}_expected.csv').is_file()
        assert (folder / f'{label}_envelope.csv').is_file()
        assert label in report.fits or label in report.fit_errors
    assert (folder / 'report.txt').is_file()
    assert (folder / 'mod720_d0.00_hist.csv').read_text().splitlines()[0] == 'bin_start_ns,count'
    assert report.contour is not None
    assert list(report.contour['delay_ns']) == [0.0, 0.8]
    assert 'scenario small' in (folder / 'report.txt').read_text()


def test_runs_are_reproducible(small_run, tmp_path, no_settings):
    run_scenario(small_run, tmp_path / 'a', settings_path=no_settings)
    run_scenario(small_run, tmp_path / 'b', settings_path=no_settings)
    first = sorted((tmp_path / 'a' / 'small').glob('*.csv'))
    assert first
    for path in first:
        twin = tmp_path / 'b' / 'small' / path.name
        assert path.read_bytes() == twin.read_bytes(), path.name


def test_seed_changes_counts(small_run, tmp_path, no_settings):
    run_scenario(small_run, tmp_path / 'a', settings_path=no_settings)
    run_scenario(small_run, tmp_path / 'b', seed=6, settings_path=no_settings)
    name = 'unmodulated_hist.csv'
    assert (tmp_path / 'a' / 'small' / name).read_bytes() != (tmp_path / 'b' / 'small' / name).read_bytes()


def test_short_window_warning_lands_in_report(write_ini, tmp_path, no_settings):
    path = write_ini("""
        [scenario]
        name = short
        include_unmodulated = False
        [grid]
        dt_ns = 0.002
        [timing]
        n_pulses = 20000
        [drive:fast]
        optical_fwhm_ns = 0.14
        """)
    report = run_scenario(path, tmp_path, settings_path=no_settings)
    assert any(w.startswith('BandwidthWarning') for w in report.warnings)


def test_sweep_only(write_ini, tmp_path, no_settings):
    path = write_ini("""
        [scenario]
        name = sweep
        include_unmodulated = False
        [eom]
        extinction_db = inf
        [tradeoff]
        tau_mod_ns = 0.52, inf
        """)
    report = run_scenario(path, tmp_path, settings_path=no_settings, sweep_only=True)
    csv = (tmp_path / 'sweep' / 'tradeoff.csv').read_text().splitlines()
    assert csv[0] == 'tau_mod_ns,delay_ns,indist_exact,indist_simple,fraction,rate_hz'
    assert len(csv) == 3
    assert report.tradeoff.row(math.inf).indist_exact == pytest.approx(0.1, abs=1e-3)


def test_sweep_only_needs_a_sweep(small_run, tmp_path, no_settings):
    with pytest.raises(ConfigError) as info:
        run_scenario(small_run, tmp_path, settings_path=no_settings, sweep_only=True)
    assert info.value.key == 'tradeoff.tau_mod_ns'


def test_laser_notch_is_fitted(write_ini, tmp_path, no_settings):
    path = write_ini("""
        [scenario]
        name = lasernotch
        source = laser
        include_unmodulated = False
        [timing]
        t_gate_ns = 10
        gate_lead_ns = 2.5
        n_pulses = 2000000
        [detector]
        span_ns = 5
        [analysis]
        fit_range_ns = 0.5, 4.5
        [drive:cal770]
        optical_fwhm_ns = 0.77
        inverted = True
        photons_per_gate = 0.2
        """)
    report = run_scenario(path, tmp_path, settings_path=no_settings)
    fit = report.fits['cal770_d0.00']
    assert fit.model == 'notch'
    assert fit.params['center'] == pytest.approx(2.5, abs=0.05)


def test_coarse_grid_runs_end_to_end(write_ini, tmp_path, no_settings):
    path = write_ini("""
        [scenario]
        name = coarse
        [grid]
        dt_ns = 0.005
        [timing]
        n_pulses = 50000
        gate_lead_ns = 2.0
        [detector]
        span_ns = 12
        [drive:mod720]
        optical_fwhm_ns = 0.72
        """)
    report = run_scenario(path, tmp_path, settings_path=no_settings)
    assert (tmp_path / 'coarse' / 'unmodulated_hist.csv').is_file()
    assert (tmp_path / 'coarse' / 'mod720_d0.00_hist.csv').is_file()
    assert report.out_dir == tmp_path / 'coarse'
