"""Scenario files and the generate → modulate → detect → histogram → fit pipeline.

A scenario is an INI file read on top of ``default.ini`` (and ``./settings.ini``
when present). Every key is checked before anything is simulated; the first
problem is raised as :class:`ConfigError` naming ``section.key``.
"""
from __future__ import annotations

import configparser
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from . import analyze, detect, emitter, eomod
from .analyze import EfficiencyChain, FitError, FitResult, TradeoffTable
from .detect import DetectorModel, TimingConfig
from .eomod import EomParams
from .powerlog import LOG_LEVELS, logger, verbose_print
from .sigcore import CSV_FLOAT_FORMAT, ModuleError, QdeomWarning, Wavepacket, make_time_grid
from .workers import default_num_threads, run_jobs

PACKAGE_DIR = Path(__file__).resolve().parent
DEFAULT_INI = PACKAGE_DIR / 'default.ini'
PRESET_DIR = PACKAGE_DIR / 'presets'
SETTINGS_INI = Path('./settings.ini')
FIT_CURVE_STEP = 0.005


class ConfigError(ModuleError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


# ------------------------------------------------------------- key parsers

def _finite(text):
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"must be finite, got {text!r}")
    return value


def _positive(text):
    value = _finite(text)
    if not value > 0:
        raise ValueError(f"must be positive, got {text!r}")
    return value


def _non_negative(text):
    value = _finite(text)
    if value < 0:
        raise ValueError(f"must be non-negative, got {text!r}")
    return value


def _positive_or_inf(text):
    value = float(text)
    if not value > 0:
        raise ValueError(f"must be positive, got {text!r}")
    return value


def _probability(text):
    value = _finite(text)
    if not 0 <= value <= 1:
        raise ValueError(f"must lie in [0, 1], got {text!r}")
    return value


def _transmission(text):
    value = _finite(text)
    if not 0 < value <= 1:
        raise ValueError(f"must lie in (0, 1], got {text!r}")
    return value


def _count(minimum):
    def parse(text):
        value = float(text)
        if not value.is_integer() or value < minimum:
            raise ValueError(f"must be an integer >= {minimum}, got {text!r}")
        return int(value)
    return parse


def _flag(text):
    states = configparser.ConfigParser.BOOLEAN_STATES
    if text.lower() not in states:
        raise ValueError(f"must be true or false, got {text!r}")
    return states[text.lower()]


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"must be one of {', '.join(options)}, got {text!r}")
        return text
    return parse


def _float_list(item):
    def parse(text):
        values = [item(part.strip()) for part in text.split(',') if part.strip()]
        if not values:
            raise ValueError("needs at least one value")
        return tuple(values)
    return parse


def _bias(text):
    return None if text == 'auto' else _finite(text)


def _points(text):
    pairs = []
    for part in text.split(','):
        if not part.strip():
            continue
        t, sep, v = part.partition(':')
        if not sep:
            raise ValueError(f"points are written t:V, got {part.strip()!r}")
        pairs.append((_finite(t), _finite(v)))
    if len(pairs) < 2:
        raise ValueError("needs at least two t:V points")
    return tuple(pairs)


def _text(text):
    return text


def _optional(parse):
    def wrapped(text):
        return None if text == '' else parse(text)
    return wrapped


SCHEMA = {
    'paths': {'out_folder': _text},
    'logs': {'log_folder': _text, 'log_level': _choice(*LOG_LEVELS), 'debug': _flag},
    'workers': {'num_threads': _optional(_count(1))},
    'scenario': {'name': _optional(_text), 'seed': _count(0), 'source': _choice('photon', 'laser'),
                 'include_unmodulated': _flag, 'write_timestamps': _flag},
    'grid': {'dt_ns': _positive},
    'emitter': {'tau_sp_ns': _positive, 'tau_coh_ns': _positive, 'wavelength_nm': _positive},
    'eom': {'v_pi_V': _positive, 'extinction_db': _positive_or_inf, 't_max': _transmission,
            'bias': _bias, 'min_pulse_ns': _non_negative},
    'timing': {'t_rep_ns': _positive, 'gate_divider': _count(1), 't_gate_ns': _positive,
               'n_pulses': _count(1), 'gate_lead_ns': _non_negative},
    'detector': {'jitter_fwhm_ns': _non_negative, 'efficiency': _probability,
                 'dark_rate_per_ns': _non_negative, 'bin_width_ns': _positive,
                 'span_ns': _optional(_positive)},
    'analysis': {'fit': _choice('auto', 'none'), 'tail_fraction': _probability,
                 'fit_range_ns': _optional(_float_list(_finite)), 'notch_window_ns': _positive},
    'tradeoff': {'tau_mod_ns': _optional(_float_list(_positive_or_inf)), 'rep_rate_hz': _positive,
                 'target_rate_hz': _optional(_positive), 'calibrate_tau_ns': _positive,
                 'collection': _probability, 'filter': _probability,
                 'modulator_insertion': _probability, 'detector': _probability,
                 'objective': _choice(*analyze.OBJECTIVES), 'mc_pairs': _count(0)},
    'drive': {'shape': _choice(*eomod.SHAPES), 'v_peak_V': _optional(_positive),
              'optical_fwhm_ns': _optional(_positive), 'width_ns': _optional(_positive),
              'points': _optional(_points), 'delay_ns': _float_list(_finite),
              'inverted': _flag, 'predistort': _flag,
              'photons_per_gate': _optional(_probability), 'n_pulses': _optional(_count(1))},
}

DRIVE_FALLBACK = {'shape': 'gaussian', 'v_peak_V': '', 'optical_fwhm_ns': '', 'width_ns': '',
                  'points': '', 'delay_ns': '0', 'inverted': 'False', 'predistort': 'True',
                  'photons_per_gate': '', 'n_pulses': ''}


# ---------------------------------------------------------------- scenario

@dataclass(frozen=True)
class DriveSpec:
    label: str
    section: str
    shape: str
    v_peak: Optional[float]
    optical_fwhm: Optional[float]
    width: Optional[float]
    points: Optional[tuple]
    delays: tuple
    predistort: bool
    photons_per_gate: Optional[float]
    n_pulses: Optional[int]

    @property
    def inverted(self) -> bool:
        return self.shape == 'inverted_gaussian'


@dataclass(frozen=True)
class TradeoffSpec:
    tau_mod: tuple
    rep_rate: float
    target_rate: Optional[float]
    calibrate_tau: float
    chain: EfficiencyChain
    objective: str
    mc_pairs: int


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    source: str
    include_unmodulated: bool
    write_timestamps: bool
    dt: float
    emitter: emitter.EmitterModel
    eom: EomParams
    timing: TimingConfig
    detector: DetectorModel
    bin_width: float
    span: float
    fit: str
    tail_fraction: float
    fit_range: Optional[tuple]
    notch_window: float
    drives: tuple
    tradeoff: Optional[TradeoffSpec]
    num_threads: int
    out_folder: str
    log_folder: str
    log_level: str


def new_config():
    config = configparser.ConfigParser(inline_comment_prefixes=('#', ';'))
    config.optionxform = str
    return config


# 設定ファイルを読み込む
def load_config(default_path=DEFAULT_INI, settings_path=SETTINGS_INI):
    config = new_config()
    config.read(default_path, encoding='utf-8')  # デフォルトの設定を読み込む
    if settings_path is not None:
        config.read(settings_path, encoding='utf-8')  # ユーザーの設定を読み込む（存在する場合）
    return config


def _section_kind(section):
    if section == 'drive' or section.startswith('drive:'):
        return 'drive'
    return section


def _parse_sections(config) -> Dict[str, Dict[str, object]]:
    parsed = {}
    for section in config.sections():
        kind = _section_kind(section)
        if kind not in SCHEMA:
            raise ConfigError("unknown section", key=section)
        schema = SCHEMA[kind]
        values = {}
        raw = dict(DRIVE_FALLBACK) if kind == 'drive' else {}
        raw.update({k: v.strip() for k, v in config.items(section, raw=True)})
        for key, text in raw.items():
            if key not in schema:
                raise ConfigError("unknown key", key=f"{section}.{key}")
            try:
                values[key] = schema[key](text)
            except ValueError as e:
                raise ConfigError(str(e), key=f"{section}.{key}") from None
        parsed[section] = values
    for section in SCHEMA:
        if section != 'drive' and section not in parsed:
            raise ConfigError("missing section (is default.ini installed?)", key=section)
    return parsed


def _drive_spec(section, values, source, v_pi) -> DriveSpec:
    label = section.partition(':')[2] or 'drive'
    shape = values['shape']
    if values['inverted'] and shape == 'gaussian':
        shape = 'inverted_gaussian'
    if shape in ('gaussian', 'inverted_gaussian') and values['optical_fwhm_ns'] is None:
        raise ConfigError(f"{shape} drives need an optical width", key=f"{section}.optical_fwhm_ns")
    if shape == 'square' and values['width_ns'] is None:
        raise ConfigError("square drives need a width", key=f"{section}.width_ns")
    if shape == 'piecewise' and values['points'] is None:
        raise ConfigError("piecewise drives need points", key=f"{section}.points")
    if values['v_peak_V'] is not None and values['v_peak_V'] > v_pi:
        raise ConfigError(f"transfer saturation: v_peak above v_pi={v_pi} V", key=f"{section}.v_peak_V")
    if source != 'laser' and values['photons_per_gate'] is not None:
        raise ConfigError("only used with source = laser", key=f"{section}.photons_per_gate")
    return DriveSpec(label, section, shape, values['v_peak_V'], values['optical_fwhm_ns'],
                     values['width_ns'], values['points'], values['delay_ns'], values['predistort'],
                     values['photons_per_gate'] if values['photons_per_gate'] is not None else
                     (1.0 if source == 'laser' else None),
                     values['n_pulses'])


def load_scenario(config_path, settings_path=SETTINGS_INI, seed: Optional[int] = None,
                  n_pulses: Optional[int] = None) -> Scenario:
    config = load_config(DEFAULT_INI, settings_path)
    config_path = Path(config_path)
    try:
        with open(config_path, encoding='utf-8') as f:
            config.read_file(f, source=str(config_path))
    except OSError as e:
        raise ConfigError(f"cannot read scenario file {config_path}: {e.strerror or e}") from e
    except configparser.Error as e:
        raise ConfigError(f"{config_path}: {e}") from e
    v = _parse_sections(config)

    sc, em, eo, tm, dc, an, tr = (v['scenario'], v['emitter'], v['eom'], v['timing'],
                                  v['detector'], v['analysis'], v['tradeoff'])
    if em['tau_coh_ns'] > 2.0 * em['tau_sp_ns']:
        raise ConfigError(f"above transform limit 2*tau_sp_ns={2.0 * em['tau_sp_ns']}",
                          key='emitter.tau_coh_ns')
    model = emitter.coherence_params(em['tau_sp_ns'], em['tau_coh_ns'], em['wavelength_nm'])
    eom = EomParams(v_pi=eo['v_pi_V'], extinction_db=eo['extinction_db'], t_max=eo['t_max'],
                    bias_phase=eo['bias'], min_pulse_ns=eo['min_pulse_ns'])
    if tm['gate_lead_ns'] >= tm['t_gate_ns']:
        raise ConfigError("excitation must fall inside the gate", key='timing.gate_lead_ns')
    if v['grid']['dt_ns'] > 0.1 * tm['t_gate_ns']:
        raise ConfigError("time step too coarse for the gate", key='grid.dt_ns')
    pulses = n_pulses if n_pulses is not None else tm['n_pulses']
    if pulses < 1:
        raise ConfigError("must be at least 1", key='timing.n_pulses')
    timing = TimingConfig(t_rep=tm['t_rep_ns'], gate_divider=tm['gate_divider'],
                          t_gate=tm['t_gate_ns'], n_pulses=int(pulses), gate_lead=tm['gate_lead_ns'])
    det = DetectorModel(jitter_fwhm=dc['jitter_fwhm_ns'], efficiency=dc['efficiency'],
                        dark_rate=dc['dark_rate_per_ns'])
    fit_range = an['fit_range_ns']
    if fit_range is not None and (len(fit_range) != 2 or fit_range[1] <= fit_range[0]):
        raise ConfigError("needs two increasing values 'start, stop'", key='analysis.fit_range_ns')

    source = sc['source']
    if source == 'laser' and sc['include_unmodulated']:
        raise ConfigError("not available with source = laser", key='scenario.include_unmodulated')
    drives = tuple(_drive_spec(section, values, source, eom.v_pi)
                   for section, values in v.items() if _section_kind(section) == 'drive')
    if n_pulses is not None:
        drives = tuple(replace(d, n_pulses=None) for d in drives)
    labels = [d.label for d in drives]
    if len(set(labels)) != len(labels) or 'unmodulated' in labels:
        raise ConfigError("drive labels must be unique and not 'unmodulated'", key='drive')

    sweep = None
    if tr['tau_mod_ns']:
        if tr['target_rate_hz'] is not None and not any(
                math.isclose(t, tr['calibrate_tau_ns']) for t in tr['tau_mod_ns']):
            raise ConfigError("calibration row is not in tau_mod_ns", key='tradeoff.calibrate_tau_ns')
        chain = EfficiencyChain(collection=tr['collection'], filter=tr['filter'],
                                modulator_insertion=tr['modulator_insertion'], detector=tr['detector'])
        sweep = TradeoffSpec(tr['tau_mod_ns'], tr['rep_rate_hz'], tr['target_rate_hz'],
                             tr['calibrate_tau_ns'], chain, tr['objective'], tr['mc_pairs'])

    if not drives and not sc['include_unmodulated'] and sweep is None:
        raise ConfigError("nothing to do: no drives, no unmodulated histogram, no trade-off sweep",
                          key='scenario')

    log_level = 'DEBUG' if v['logs']['debug'] else v['logs']['log_level']
    return Scenario(
        name=sc['name'] or config_path.stem, seed=seed if seed is not None else sc['seed'],
        source=source, include_unmodulated=sc['include_unmodulated'],
        write_timestamps=sc['write_timestamps'], dt=v['grid']['dt_ns'], emitter=model, eom=eom,
        timing=timing, detector=det, bin_width=dc['bin_width_ns'],
        span=dc['span_ns'] if dc['span_ns'] is not None else tm['t_gate_ns'],
        fit=an['fit'], tail_fraction=an['tail_fraction'], fit_range=fit_range,
        notch_window=an['notch_window_ns'], drives=drives, tradeoff=sweep,
        num_threads=v['workers']['num_threads'] or default_num_threads(),
        out_folder=v['paths']['out_folder'], log_folder=v['logs']['log_folder'], log_level=log_level)


def preset_path(name: str) -> Path:
    path = PRESET_DIR / f"{name}.ini"
    if not path.is_file():
        known = ', '.join(sorted(p.stem for p in PRESET_DIR.glob('*.ini')))
        raise ConfigError(f"unknown preset {name!r}; available: {known}")
    return path


# ---------------------------------------------------------------- pipeline

@dataclass
class HistogramJob:
    label: str
    kind: str
    delay: float
    psi: Wavepacket
    transmission: np.ndarray
    n_pulses: int
    seed: int
    drive: Optional[DriveSpec] = None


@dataclass
class HistogramOutcome:
    job: HistogramJob
    stream: detect.TimestampStream
    hist: detect.Histogram
    expected: detect.Histogram
    fit: Optional[FitResult] = None
    expected_fit: Optional[FitResult] = None
    fit_error: Optional[str] = None
    notch: Optional[tuple] = None
    contour_peak: Optional[float] = None


def _build_drive(spec: DriveSpec, scenario: Scenario) -> eomod.DriveWaveform:
    params = scenario.eom
    v_peak = spec.v_peak if spec.v_peak is not None else params.v_pi
    center = scenario.timing.gate_lead
    try:
        if spec.shape in ('gaussian', 'inverted_gaussian'):
            return eomod.gaussian_drive(v_peak, spec.optical_fwhm, center, spec.inverted, params,
                                        spec.predistort)
        if spec.shape == 'square':
            return eomod.DriveWaveform('square', v_peak, spec.width, center)
        return eomod.DriveWaveform('piecewise', 0.0, 0.0, center, points=spec.points)
    except ModuleError as e:
        key = 'v_peak_V' if 'v_peak' in str(e) else 'optical_fwhm_ns'
        raise ConfigError(str(e), key=f"{spec.section}.{key}") from e


def plan_jobs(scenario: Scenario) -> List[HistogramJob]:
    """Build every modulated wavepacket on the calling thread, in report order."""
    try:
        grid = make_time_grid(0.0, scenario.timing.t_gate, scenario.dt)
        photon = emitter.exponential_wavepacket(scenario.emitter, grid, scenario.timing.gate_lead)
    except ModuleError as e:
        raise ConfigError(str(e), key='grid.dt_ns') from e
    jobs = []
    if scenario.include_unmodulated:
        env = eomod.unmodulated_envelope(scenario.eom, grid)
        jobs.append(HistogramJob('unmodulated', 'unmodulated', 0.0,
                                 eomod.apply_modulation(photon, env), env.transmission,
                                 scenario.timing.n_pulses, 0))
    for spec in scenario.drives:
        env = eomod.mz_transmission(_build_drive(spec, scenario), scenario.eom, grid)
        psi = (emitter.cw_wavepacket(grid, spec.photons_per_gate) if scenario.source == 'laser'
               else photon)
        if spec.shape in ('gaussian', 'inverted_gaussian'):
            kind = 'notch' if spec.inverted else 'gaussian'
        else:
            kind = spec.shape
        for delay in spec.delays:
            try:
                modulated = eomod.apply_modulation(psi, env, delay)
            except ModuleError as e:
                raise ConfigError(str(e), key=f"{spec.section}.delay_ns") from e
            with warnings.catch_warnings():
                warnings.simplefilter('ignore', eomod.DelaySnapWarning)
                transmission = eomod.shifted_transmission(env, delay)
            jobs.append(HistogramJob(f"{spec.label}_d{delay:.2f}", kind, float(delay), modulated,
                                     transmission, spec.n_pulses or scenario.timing.n_pulses, 0, spec))
    for index, job in enumerate(jobs):
        job.seed = scenario.seed + index
    return jobs


def run_histogram(job: HistogramJob, scenario: Scenario, reference: Optional[Wavepacket] = None):
    """Detect, histogram and fit one job. ``reference`` is the unmodulated photon for notch contrast."""
    det = scenario.detector
    sched = detect.schedule_events(replace(scenario.timing, n_pulses=job.n_pulses, delta_t_mod=job.delay))
    stream = detect.detect_mc(job.psi, det, sched, job.seed)
    hist = detect.histogram(stream, scenario.bin_width, scenario.span)
    expected = detect.analytic_histogram(job.psi, det, sched.n_gated, scenario.bin_width, scenario.span)
    outcome = HistogramOutcome(job, stream, hist, expected)

    if job.kind == 'notch' and scenario.source == 'photon' and reference is not None:
        center = scenario.timing.gate_lead + job.delay
        unmodulated = detect.analytic_histogram(reference, det, sched.n_gated, scenario.bin_width,
                                                scenario.span)
        try:
            outcome.notch = analyze.notch_contrast(hist, unmodulated, center, scenario.notch_window)
        except ModuleError as e:
            outcome.fit_error = str(e)
    if job.kind == 'gaussian' and scenario.source == 'photon':
        ideal = DetectorModel(jitter_fwhm=0.0, efficiency=det.efficiency)
        outcome.contour_peak = float(detect.expected_density(job.psi, ideal, sched.n_gated).value.max())

    if scenario.fit == 'none':
        return outcome
    try:
        if job.kind == 'unmodulated':
            outcome.fit = analyze.fit_exponential(hist, irf_fwhm=det.jitter_fwhm,
                                                  tail_fraction=scenario.tail_fraction)
        elif job.kind == 'gaussian' or (job.kind == 'notch' and scenario.source == 'laser'):
            inverted = job.kind == 'notch'
            outcome.fit = analyze.fit_gaussian(hist, inverted, det.jitter_fwhm, scenario.fit_range)
            outcome.expected_fit = analyze.fit_gaussian(expected, inverted, det.jitter_fwhm,
                                                        scenario.fit_range)
    except FitError as e:
        outcome.fit_error = str(e)
        logger.warning('fit for %s failed: %s', job.label, e)
    return outcome


# ------------------------------------------------------------------ report

@dataclass
class RunReport:
    scenario: str
    out_dir: Path
    outputs: List[Path] = field(default_factory=list)
    fits: Dict[str, FitResult] = field(default_factory=dict)
    fit_errors: Dict[str, str] = field(default_factory=dict)
    notches: Dict[str, tuple] = field(default_factory=dict)
    contour: Optional[pd.DataFrame] = None
    peak_checks: Optional[pd.DataFrame] = None
    tradeoff: Optional[TradeoffTable] = None
    calibration: Optional[str] = None
    warnings: List[str] = field(default_factory=list)
    duration_s: float = 0.0

    def summary(self, label: str) -> str:
        fit = self.fits.get(label)
        if fit is None:
            return self.fit_errors.get(label, 'no fit')
        if fit.model == 'exponential':
            return f"tau = {fit.params['tau']:.4f} ± {fit.ci95['tau']:.4f} ns"
        text = f"fwhm = {fit.params['fwhm']:.4f} ± {fit.ci95['fwhm']:.4f} ns"
        if 'fwhm_deconvolved' in fit.params:
            text += (f", deconvolved {fit.params['fwhm_deconvolved']:.4f}"
                     f" ± {fit.ci95['fwhm_deconvolved']:.4f} ns")
        return text

    def to_text(self) -> str:
        lines = [f"scenario {self.scenario}", f"duration_s {self.duration_s:.2f}", "", "[fits]"]
        for label in sorted(set(self.fits) | set(self.fit_errors), key=self._order):
            lines.append(f"{label}: {self.summary(label)}")
        if self.notches:
            lines += ["", "[notches] window counts relative to the unmodulated expectation"]
            for label, (ratio, contrast) in self.notches.items():
                lines.append(f"{label}: ratio {ratio:.4f}, contrast {contrast:.4f}")
        if self.contour is not None:
            lines += ["", "[contour] noise-free peak height against exp(-delay/tau_sp)",
                      self.contour.to_string(index=False, float_format=lambda x: f"{x:.4f}")]
        if self.peak_checks is not None:
            lines += ["", "[peaks] fitted peak heights, Monte Carlo against expectation",
                      self.peak_checks.to_string(index=False, float_format=lambda x: f"{x:.4f}")]
        if self.tradeoff is not None:
            lines += ["", "[tradeoff]",
                      self.tradeoff.to_frame().to_string(index=False, float_format=lambda x: f"{x:.6g}")]
            mc = [(r.tau_mod, r.indist_mc, r.indist_mc_se) for r in self.tradeoff.rows
                  if r.indist_mc is not None]
            for tau, mean, se in mc:
                lines.append(f"monte carlo indistinguishability at tau_mod={tau:g}: {mean:.4f} ± {se:.4f}")
        if self.calibration:
            lines += ["", "[calibration]", self.calibration]
        lines += ["", "[warnings]"] + (self.warnings or ['none'])
        lines += ["", "[outputs]"] + [str(p) for p in self.outputs]
        return '\n'.join(lines) + '\n'

    def _order(self, label):
        return (label != 'unmodulated', label)

    def write(self, path=None) -> Path:
        path = Path(path) if path else self.out_dir / 'report.txt'
        if path not in self.outputs:
            self.outputs.append(path)
        path.write_text(self.to_text(), encoding='utf-8')
        return path


def _write_frame(frame: pd.DataFrame, path: Path, report: RunReport):
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    report.outputs.append(path)


def _write_outcome(outcome: HistogramOutcome, scenario: Scenario, out_dir: Path, report: RunReport):
    label = outcome.job.label
    report.outputs.append(outcome.hist.to_csv(out_dir / f"{label}_hist.csv"))
    report.outputs.append(outcome.expected.to_csv(out_dir / f"{label}_expected.csv"))
    times = outcome.job.psi.grid.times
    inside = times <= scenario.span + 1e-9
    _write_frame(pd.DataFrame({'t_ns': times[inside], 'transmission': outcome.job.transmission[inside]}),
                 out_dir / f"{label}_envelope.csv", report)
    if outcome.fit is not None:
        report.fits[label] = outcome.fit
        report.outputs.append(outcome.fit.to_txt(out_dir / f"{label}_fit.txt"))
        lo, hi = outcome.fit.fit_range
        t = lo + FIT_CURVE_STEP * np.arange(int(math.floor((hi - lo) / FIT_CURVE_STEP)) + 1)
        _write_frame(pd.DataFrame({'t_ns': t, 'fit': outcome.fit.evaluate(t)}),
                     out_dir / f"{label}_fitcurve.csv", report)
    if outcome.fit_error:
        report.fit_errors[label] = outcome.fit_error
    if outcome.notch is not None:
        report.notches[label] = outcome.notch
    if scenario.write_timestamps:
        report.outputs.append(outcome.stream.to_csv(out_dir / f"{label}_timestamps.csv"))


def _contour_tables(outcomes: List[HistogramOutcome], tau_sp: float):
    """Contour and Monte Carlo peak checks for the first upright drive swept through delay 0."""
    by_drive: Dict[str, List[HistogramOutcome]] = {}
    for o in outcomes:
        if o.contour_peak is not None:
            by_drive.setdefault(o.job.drive.label, []).append(o)
    for group in by_drive.values():
        if not any(o.job.delay == 0.0 for o in group) or len(group) < 2:
            continue
        contour = analyze.contour_ratios({o.job.delay: o.contour_peak for o in group}, tau_sp)
        peaks = None
        fitted = [o for o in group if o.fit is not None and o.expected_fit is not None]
        if fitted:
            rows = []
            for o in fitted:
                mc, ex = o.fit.peak_height, o.expected_fit.peak_height
                sigma = math.hypot(o.fit.ci95['amplitude'], o.fit.ci95['baseline']) / analyze.Z95
                rows.append({'delay_ns': o.job.delay, 'mc_peak': mc, 'expected_peak': ex,
                             'relative_diff': mc / ex - 1.0 if ex > 0 else float('nan'),
                             'sigma_rel': sigma / ex if ex > 0 else float('nan')})
            peaks = pd.DataFrame(rows)
        return contour, peaks
    return None, None


def _run_tradeoff(scenario: Scenario, report: RunReport, out_dir: Path):
    spec = scenario.tradeoff
    table = analyze.tradeoff_sweep(scenario.emitter, spec.tau_mod, spec.rep_rate, spec.chain,
                                   params=scenario.eom, objective=spec.objective,
                                   mc_pairs=spec.mc_pairs, seed=scenario.seed,
                                   num_threads=scenario.num_threads)
    if spec.target_rate is not None:
        row = table.row(spec.calibrate_tau)
        chain, text = spec.chain.calibrated(spec.target_rate, spec.rep_rate, row.transmitted_fraction)
        table = TradeoffTable([replace(r, rate=spec.rep_rate * chain.product * r.transmitted_fraction)
                               for r in table.rows])
        report.calibration = (text + f"\ncalibrated chain product {chain.product:.6g}"
                              f"\nrate at tau_mod={spec.calibrate_tau:g} ns: "
                              f"{table.row(spec.calibrate_tau).rate:.6g} /s")
    report.tradeoff = table
    report.outputs.append(table.to_csv(out_dir / 'tradeoff.csv'))


def run_scenario(config_path, out_dir, seed: Optional[int] = None, n_pulses: Optional[int] = None,
                 settings_path=SETTINGS_INI, sweep_only: bool = False) -> RunReport:
    """Run a scenario file; outputs go to ``out_dir/<scenario name>/``."""
    start = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always', QdeomWarning)
        scenario = load_scenario(config_path, settings_path, seed, n_pulses)
        if sweep_only and scenario.tradeoff is None:
            raise ConfigError("no trade-off sweep configured", key='tradeoff.tau_mod_ns')
        target = Path(out_dir) / scenario.name
        report = RunReport(scenario.name, target)
        jobs = [] if sweep_only else plan_jobs(scenario)
        target.mkdir(parents=True, exist_ok=True)

        reference = None
        if any(j.kind == 'notch' for j in jobs) and scenario.source == 'photon':
            reference = emitter.exponential_wavepacket(scenario.emitter, jobs[0].psi.grid,
                                                       scenario.timing.gate_lead)

        def work(job):
            outcome = run_histogram(job, scenario, reference)
            verbose_print(f"histogram {job.label}: {len(outcome.stream)} counts")
            return outcome

        outcomes = run_jobs(work, jobs, scenario.num_threads)
        # 書き出しはジョブ順
        for outcome in outcomes:
            _write_outcome(outcome, scenario, target, report)
        report.contour, report.peak_checks = _contour_tables(outcomes, scenario.emitter.tau_sp)
        if scenario.tradeoff is not None:
            _run_tradeoff(scenario, report, target)

    for w in caught:
        if issubclass(w.category, QdeomWarning):
            report.warnings.append(f"{w.category.__name__}: {w.message}")
        else:
            logger.debug('%s: %s', w.category.__name__, w.message)
    report.duration_s = time.perf_counter() - start
    report.write()
    logger.info('scenario %s finished in %.2f s, %d files', scenario.name, report.duration_s,
                len(report.outputs))
    return report
