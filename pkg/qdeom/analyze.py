"""Histogram fits, two-photon indistinguishability and the post-selection trade-off."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.optimize import least_squares, minimize_scalar
from scipy.signal import correlate, lfilter

from .detect import FWHM_PER_SIGMA, Histogram
from .emitter import EmitterModel, sample_phase_trajectory
from .eomod import (EomParams, TransmissionEnvelope, gaussian_drive, mz_transmission,
                    unmodulated_envelope)
from .powerlog import logger
from .sigcore import CSV_FLOAT_FORMAT, ModuleError, make_time_grid
from .workers import run_jobs

Z95 = 1.959963984540054
INDIST_DT = 0.0005
INDIST_LIFETIMES = 20.0
MC_DT = 0.005
MC_LIFETIMES = 10.0
ENVELOPE_DT = 0.001
OBJECTIVES = ('fraction', 'indistinguishability', 'product')


class FitError(ModuleError, ValueError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class AnalysisError(ModuleError, ValueError):
    pass


# ---------------------------------------------------------------- fits

@dataclass(frozen=True)
class FitResult:
    model: str
    params: Dict[str, float]
    ci95: Dict[str, float]
    residual_norm: float
    n_points: int = 0
    t_ref: float = 0.0
    fit_range: tuple = (0.0, 0.0)

    def evaluate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        p = self.params
        if self.model == 'exponential':
            return p['amplitude'] * np.exp(-(t - self.t_ref) / p['tau']) + p['baseline']
        g = np.exp(-0.5 * ((t - p['center']) / p['sigma']) ** 2)
        sign = -1.0 if self.model == 'notch' else 1.0
        return p['baseline'] + sign * p['amplitude'] * g

    @property
    def peak_height(self) -> float:
        """Model value at the peak (or the dip floor for a notch)."""
        if self.model == 'exponential':
            return self.params['amplitude'] + self.params['baseline']
        sign = -1.0 if self.model == 'notch' else 1.0
        return self.params['baseline'] + sign * self.params['amplitude']

    def to_text(self) -> str:
        lines = [f"model {self.model}", f"points {self.n_points}",
                 f"range_ns {self.fit_range[0]:.9g} {self.fit_range[1]:.9g}",
                 f"residual_norm {self.residual_norm:.9g}", "param value ci95"]
        for name, value in self.params.items():
            lines.append(f"{name} {value:.9g} {self.ci95.get(name, float('nan')):.9g}")
        return '\n'.join(lines) + '\n'

    def to_txt(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text(), encoding='utf-8')
        return path


def _weighted_lm(t, y, p0, model, jacobian, names):
    sigma = np.sqrt(np.maximum(y, 1.0))

    def residual(p):
        return (y - model(t, p)) / sigma

    def jac(p):
        return -jacobian(t, p) / sigma[:, None]

    max_nfev = 200 * (len(p0) + 1)
    try:
        res = least_squares(residual, p0, jac=jac, method='lm', xtol=1e-8, ftol=1e-12,
                            gtol=1e-12, max_nfev=max_nfev)
    except ValueError as e:
        raise FitError(f"least squares failed: {e}", best=dict(zip(names, p0))) from e
    best = dict(zip(names, map(float, res.x)))
    if res.status <= 0 or not np.all(np.isfinite(res.x)):
        raise FitError(f"fit did not converge after {res.nfev} evaluations: {res.message}", best=best)

    dof = max(1, t.size - len(p0))
    chi2_red = float(np.sum(res.fun ** 2)) / dof
    jtj = res.jac.T @ res.jac
    cov = np.linalg.pinv(jtj) * chi2_red
    stderr = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return res.x, stderr, math.sqrt(chi2_red), best


def _exp_model(t, p):
    a, tau, b = p
    return a * np.exp(-t / tau) + b


def _exp_jacobian(t, p):
    a, tau, b = p
    e = np.exp(-t / tau)
    return np.column_stack((e, a * e * t / tau ** 2, np.ones_like(t)))


def fit_exponential(h: Histogram, irf_fwhm: Optional[float] = None,
                    tail_fraction: Optional[float] = 0.01) -> FitResult:
    """Poisson-weighted fit of a·exp(−t/τ) + b from the peak onward.

    With ``irf_fwhm`` the fit starts three jitter standard deviations after the
    peak bin, where the convolved decay is a pure exponential again. The fit
    ends at the last bin holding at least ``tail_fraction`` of the peak count.
    """
    y = np.asarray(h.counts, dtype=float)
    t = h.bin_centers
    if y.size == 0 or not np.any(y > 0):
        raise FitError("cannot fit an exponential to an all-zero histogram")
    peak = int(np.argmax(y))
    start = peak
    if irf_fwhm:
        start = int(np.searchsorted(t, t[peak] + 3.0 * irf_fwhm / FWHM_PER_SIGMA))
    stop = y.size
    if tail_fraction:
        strong = np.flatnonzero(y[start:] >= tail_fraction * y[peak])
        if strong.size:
            stop = start + int(strong[-1]) + 1
    if np.count_nonzero(y[start:stop] > 0) < 10:
        raise FitError(f"need at least 10 nonempty bins past the peak, got "
                       f"{np.count_nonzero(y[start:stop] > 0)}")
    ts, ys = t[start:stop], y[start:stop]
    t_ref = float(ts[0])
    x = ts - t_ref

    # 初期値: テールからベースライン, 対数の傾きから寿命
    tail = ys[-max(3, ys.size // 10):]
    b0 = float(min(tail.mean(), ys.min()))
    above = ys - b0
    use = above > max(1e-12, 1e-3 * above.max())
    if np.count_nonzero(use) >= 2:
        slope, intercept = np.polyfit(x[use], np.log(above[use]), 1, w=np.sqrt(above[use]))
    else:
        slope, intercept = 0.0, math.log(above.max())
    tau0 = -1.0 / slope if slope < 0 else max(x[-1], h.bin_width) / 3.0
    p0 = np.array([math.exp(intercept), tau0, b0])

    p, stderr, rnorm, _ = _weighted_lm(x, ys, p0, _exp_model, _exp_jacobian,
                                       ('amplitude', 'tau', 'baseline'))
    if not (p[1] > 0):
        raise FitError(f"fitted lifetime is not positive ({p[1]:.6g})",
                       best=dict(amplitude=p[0], tau=p[1], baseline=p[2]))
    names = ('amplitude', 'tau', 'baseline')
    result = FitResult('exponential', dict(zip(names, map(float, p))),
                       dict(zip(names, map(float, Z95 * stderr))), rnorm,
                       n_points=int(ys.size), t_ref=t_ref, fit_range=(float(ts[0]), float(ts[-1])))
    logger.verbose('exponential fit: tau=%.6g ± %.3g ns', result.params['tau'], result.ci95['tau'])
    return result


def _gauss_model(sign):
    def model(t, p):
        a, t0, s, b = p
        return b + sign * a * np.exp(-0.5 * ((t - t0) / s) ** 2)
    return model


def _gauss_jacobian(sign):
    def jacobian(t, p):
        a, t0, s, b = p
        d = t - t0
        g = np.exp(-0.5 * (d / s) ** 2)
        return np.column_stack((sign * g, sign * a * g * d / s ** 2,
                                sign * a * g * d ** 2 / s ** 3, np.ones_like(t)))
    return jacobian


def deconvolved_fwhm(measured: float, ci: float, jitter_fwhm: float):
    """sqrt(F² − j²) with the propagated half-width; NaN when F ≤ j."""
    if measured <= jitter_fwhm:
        return float('nan'), float('nan')
    width = math.sqrt(measured ** 2 - jitter_fwhm ** 2)
    return width, measured * ci / width


def fit_gaussian(h: Histogram, inverted: bool = False, jitter_fwhm: Optional[float] = None,
                 t_range: Optional[tuple] = None) -> FitResult:
    y = np.asarray(h.counts, dtype=float)
    t = h.bin_centers
    if t_range is not None:
        keep = (t >= t_range[0]) & (t <= t_range[1])
        y, t = y[keep], t[keep]
    if y.size < 5 or not np.any(y > 0):
        raise FitError("cannot fit a Gaussian to an empty or all-zero histogram")
    sign = -1.0 if inverted else 1.0
    b0 = float(np.percentile(y, 90 if inverted else 10))
    excess = sign * (y - b0)
    k = int(np.argmax(excess))
    a0 = float(excess[k])
    if not (a0 > 0):
        raise FitError("no peak above baseline" if not inverted else "no dip below baseline")
    wide = np.count_nonzero(excess >= 0.5 * a0)
    s0 = max(wide * h.bin_width, 2.0 * h.bin_width) / FWHM_PER_SIGMA
    p0 = np.array([a0, float(t[k]), s0, b0])

    p, stderr, rnorm, _ = _weighted_lm(t, y, p0, _gauss_model(sign), _gauss_jacobian(sign),
                                       ('amplitude', 'center', 'sigma', 'baseline'))
    sigma = abs(float(p[2]))
    params = {'amplitude': float(p[0]), 'center': float(p[1]), 'sigma': sigma,
              'baseline': float(p[3]), 'fwhm': FWHM_PER_SIGMA * sigma}
    ci = {'amplitude': Z95 * stderr[0], 'center': Z95 * stderr[1], 'sigma': Z95 * stderr[2],
          'baseline': Z95 * stderr[3], 'fwhm': FWHM_PER_SIGMA * Z95 * stderr[2]}
    if jitter_fwhm:
        width, width_ci = deconvolved_fwhm(params['fwhm'], ci['fwhm'], jitter_fwhm)
        params['fwhm_deconvolved'] = width
        ci['fwhm_deconvolved'] = width_ci
        if math.isnan(width):
            logger.warning('fitted width %.4g ns is not above the jitter %.4g ns',
                           params['fwhm'], jitter_fwhm)
    result = FitResult('notch' if inverted else 'gaussian', params,
                       {k: float(v) for k, v in ci.items()}, rnorm,
                       n_points=int(y.size), fit_range=(float(t[0]), float(t[-1])))
    logger.verbose('%s fit: fwhm=%.6g ± %.3g ns', result.model, params['fwhm'], ci['fwhm'])
    return result


# ------------------------------------------------- overlap and throughput

def _working_grid(model: EmitterModel, lifetimes: float, dt: float):
    return make_time_grid(0.0, lifetimes * model.tau_sp, dt)


def _window(model: EmitterModel, env: TransmissionEnvelope, delay: float, t: np.ndarray):
    """w(t) = T(t − delay)·Γe^(−Γt), the envelope held at its edge values."""
    transmission = np.interp(t - delay, env.grid.times, env.transmission)
    return transmission * model.gamma * np.exp(-model.gamma * t)


def transmitted_fraction(model: EmitterModel, env: TransmissionEnvelope, delay: float = 0.0,
                         dt: float = ENVELOPE_DT) -> float:
    grid = _working_grid(model, INDIST_LIFETIMES, dt)
    return float(trapezoid(_window(model, env, delay, grid.times), dx=grid.dt))


def indistinguishability_exact(model: EmitterModel, env: TransmissionEnvelope,
                               delay: float = 0.0, dt: float = INDIST_DT) -> float:
    """Mean-square overlap of two independently dephased, modulated photons.

    ∫∫ w(t₁)w(t₂)e^(−2γ*|t₁−t₂|) / (∫w)², summed with a first-order recursive
    filter and corrected for the kink of the kernel on the diagonal.
    """
    grid = _working_grid(model, INDIST_LIFETIMES, dt)
    w = _window(model, env, delay, grid.times)
    x = grid.trapezoid_weights() * w
    total = float(x.sum())
    if not (total > 0):
        raise AnalysisError("envelope extinguishes the wavepacket: integral of w is zero")
    if model.gamma_star == 0.0:
        return 1.0
    a = 2.0 * model.gamma_star
    r = math.exp(-a * grid.dt)
    earlier = lfilter([0.0, r], [1.0, -r], x)
    double_sum = float(np.sum(x * (x + 2.0 * earlier)))
    # 対角線上の折れ目の補正 (端点は片側)
    kink = 2.0 * a * np.ones_like(w)
    kink[0] = kink[-1] = a
    double_sum -= float(np.sum(x * w * kink)) * grid.dt ** 2 / 12.0
    value = double_sum / total ** 2
    return min(1.0, max(0.0, value))


def indistinguishability_mc(model: EmitterModel, env: TransmissionEnvelope, delay: float = 0.0,
                            n_pairs: int = 10_000, seed: int = 0, dt: float = MC_DT):
    """Monte Carlo pair-overlap estimate; returns (mean, standard error).

    Pair ``i`` uses trajectories seeded ``seed + 2i`` and ``seed + 2i + 1``.
    """
    if n_pairs < 2:
        raise AnalysisError(f"need at least two pairs, got {n_pairs}")
    grid = _working_grid(model, MC_LIFETIMES, dt)
    x = grid.trapezoid_weights() * _window(model, env, delay, grid.times)
    total = float(x.sum())
    if not (total > 0):
        raise AnalysisError("envelope extinguishes the wavepacket: integral of w is zero")
    weights = x / total
    samples = np.empty(n_pairs)
    for i in range(n_pairs):
        phi1 = sample_phase_trajectory(model, grid, seed + 2 * i).phase
        phi2 = sample_phase_trajectory(model, grid, seed + 2 * i + 1).phase
        overlap = np.sum(weights * np.exp(1j * (phi2 - phi1)))
        samples[i] = overlap.real ** 2 + overlap.imag ** 2
    mean = float(samples.mean())
    return mean, float(samples.std(ddof=1) / math.sqrt(n_pairs))


def _objective(name: str) -> Callable:
    if name == 'fraction':
        return transmitted_fraction
    if name == 'indistinguishability':
        return indistinguishability_exact
    if name == 'product':
        return lambda model, env, d: (transmitted_fraction(model, env, d)
                                      * indistinguishability_exact(model, env, d))
    raise AnalysisError(f"unknown objective {name!r}; choose from {', '.join(OBJECTIVES)}")


def _safe(func, model, env, d):
    try:
        return func(model, env, d)
    except AnalysisError:
        return -math.inf


def _fraction_scan(model: EmitterModel, env: TransmissionEnvelope, delays: np.ndarray) -> np.ndarray:
    """transmitted_fraction at every delay on an env-dt lattice, in one correlation."""
    dt = env.grid.dt
    grid = _working_grid(model, INDIST_LIFETIMES, dt)
    x = grid.trapezoid_weights() * model.gamma * np.exp(-model.gamma * grid.times)
    m = delays.size
    s = -delays[-1] + dt * np.arange(grid.n + m - 1)
    shifted = np.interp(s, env.grid.times, env.transmission)
    return correlate(shifted, x, mode='valid')[::-1]


def optimal_delay(model: EmitterModel, env: TransmissionEnvelope, objective: str = 'fraction',
                  bounds: Optional[tuple] = None, scan_step: Optional[float] = None) -> float:
    """Delay maximizing ``objective``: lattice scan, then bounded refinement.

    The default range is [0, 4·τ_sp]. Fractions are scanned at the envelope's
    dt; the other objectives at ``scan_step`` (default 10 ps). Ties go to the
    smallest delay.
    """
    func = _objective(objective)
    lo, hi = bounds if bounds is not None else (0.0, 4.0 * model.tau_sp)
    if not (hi > lo):
        raise AnalysisError(f"empty delay range [{lo}, {hi}]")
    if objective == 'fraction' and scan_step is None:
        step = env.grid.dt
        delays = lo + step * np.arange(int(math.floor((hi - lo) / step + 1e-9)) + 1)
        values = _fraction_scan(model, env, delays)
    else:
        step = scan_step or 0.01
        delays = lo + step * np.arange(int(math.floor((hi - lo) / step + 1e-9)) + 1)
        values = np.array([_safe(func, model, env, d) for d in delays])
    k = int(np.argmax(values))
    best_delay, best_value = float(delays[k]), float(values[k])
    if not math.isfinite(best_value):
        raise AnalysisError(f"objective {objective} is not evaluable anywhere in [{lo}, {hi}]")

    refined = minimize_scalar(lambda d: -_safe(func, model, env, d),
                              bounds=(max(lo, best_delay - step), min(hi, best_delay + step)),
                              method='bounded', options={'xatol': 1e-4 * step})
    if refined.success and -refined.fun > _safe(func, model, env, best_delay):
        best_delay = float(refined.x)
    logger.debug('optimal delay (%s): %.6g ns', objective, best_delay)
    return best_delay


# ------------------------------------------------------------ trade-off

@dataclass(frozen=True)
class EfficiencyChain:
    collection: float = 0.001
    filter: float = 1.0
    modulator_insertion: float = 1.0
    detector: float = 1.0

    def __post_init__(self):
        for name, value in self.factors().items():
            if not (0 <= value <= 1):
                raise AnalysisError(f"efficiency factor {name}={value} outside [0, 1]")

    def factors(self) -> Dict[str, float]:
        return {'collection': self.collection, 'filter': self.filter,
                'modulator_insertion': self.modulator_insertion, 'detector': self.detector}

    @property
    def product(self) -> float:
        return math.prod(self.factors().values())

    def calibrated(self, target_rate: float, rep_rate: float, fraction: float):
        """Chain reproducing ``target_rate``; the collection factor absorbs the difference.

        Returns (chain, derivation text).
        """
        if not (target_rate > 0 and rep_rate > 0 and fraction > 0):
            raise AnalysisError("calibration needs positive target rate, repetition rate and fraction")
        required = target_rate / (rep_rate * fraction)
        others = self.product / self.collection if self.collection > 0 else 0.0
        if not (0 < required <= 1) or others <= 0 or required / others > 1:
            raise AnalysisError(f"no chain in [0, 1] gives {target_rate:.4g}/s "
                                f"(required product {required:.4g})")
        chain = replace(self, collection=required / others)
        text = '\n'.join([
            f"target rate          {target_rate:.6g} /s",
            f"repetition rate      {rep_rate:.6g} /s",
            f"transmitted fraction {fraction:.6g}",
            f"required product     {target_rate:.6g} / ({rep_rate:.6g} * {fraction:.6g}) = {required:.6g}",
            f"quoted chain product {self.product:.6g} (collection {self.collection:.6g})",
            f"implied collection   {chain.collection:.6g} ({chain.collection / self.collection:.4g}x quoted)"
            if self.collection > 0 else f"implied collection   {chain.collection:.6g}",
        ])
        return chain, text


@dataclass(frozen=True)
class TradeoffRow:
    tau_mod: float
    delay_opt: float
    indist_exact: float
    indist_simple: float
    transmitted_fraction: float
    rate: float
    indist_mc: Optional[float] = None
    indist_mc_se: Optional[float] = None


@dataclass
class TradeoffTable:
    rows: List[TradeoffRow] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'tau_mod_ns': [r.tau_mod for r in self.rows],
            'delay_ns': [r.delay_opt for r in self.rows],
            'indist_exact': [r.indist_exact for r in self.rows],
            'indist_simple': [r.indist_simple for r in self.rows],
            'fraction': [r.transmitted_fraction for r in self.rows],
            'rate_hz': [r.rate for r in self.rows],
        })

    def to_csv(self, path) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
        return path

    def row(self, tau_mod: float) -> TradeoffRow:
        for r in self.rows:
            if r.tau_mod == tau_mod or (math.isfinite(tau_mod) and math.isclose(r.tau_mod, tau_mod)):
                return r
        raise KeyError(tau_mod)


def indist_simple(model: EmitterModel, tau_mod: float) -> float:
    return min(1.0, model.tau_coh / (2.0 * tau_mod))


def sweep_envelope(tau_mod: float, params: EomParams, v_peak: Optional[float] = None) -> TransmissionEnvelope:
    """Upright Gaussian window of optical FWHM ``tau_mod`` centered at zero; inf means no modulation."""
    if math.isinf(tau_mod):
        return unmodulated_envelope(params, make_time_grid(-1.0, 1.0, ENVELOPE_DT))
    half_span = max(2.0, 5.0 * tau_mod)
    grid = make_time_grid(-half_span, half_span, ENVELOPE_DT)
    drive = gaussian_drive(v_peak or params.v_pi, tau_mod, 0.0, False, params)
    return mz_transmission(drive, params, grid)


def tradeoff_sweep(model: EmitterModel, tau_range: Sequence[float], rep_rate: float,
                   chain: EfficiencyChain, params: Optional[EomParams] = None,
                   objective: str = 'fraction', mc_pairs: int = 0, seed: int = 0,
                   num_threads: Optional[int] = None) -> TradeoffTable:
    taus = [float(t) for t in tau_range]
    if not taus:
        raise AnalysisError("tau_range is empty")
    if any(not (t > 0) for t in taus):
        raise AnalysisError(f"modulation widths must be positive, got {taus}")
    _objective(objective)
    params = params or EomParams()
    # ドライブは呼び出し側スレッドで作る (警告を拾うため)
    envelopes = [sweep_envelope(t, params) for t in taus]

    def evaluate(job):
        tau, env = job
        delay = 0.0 if math.isinf(tau) else optimal_delay(model, env, objective)
        fraction = transmitted_fraction(model, env, delay)
        exact = indistinguishability_exact(model, env, delay)
        mc = se = None
        if mc_pairs:
            mc, se = indistinguishability_mc(model, env, delay, mc_pairs, seed)
        return TradeoffRow(tau, delay, exact, indist_simple(model, tau), fraction,
                           rep_rate * chain.product * fraction, mc, se)

    rows = run_jobs(evaluate, list(zip(taus, envelopes)), num_threads)
    logger.info('trade-off sweep: %d rows', len(rows))
    return TradeoffTable(rows)


# ----------------------------------------------------------- supplements

def notch_contrast(h: Histogram, reference: Histogram, center: float, half_width: float = 0.05):
    """Counts in a window around ``center`` relative to a reference histogram.

    Returns (ratio, contrast = 1 − ratio).
    """
    if not np.allclose(h.bin_edges, reference.bin_edges):
        raise AnalysisError("notch and reference histograms have different bins")
    t = h.bin_centers
    window = np.abs(t - center) <= half_width + 1e-12
    if not window.any():
        raise AnalysisError(f"no bins within {half_width} ns of {center} ns")
    ref = float(np.sum(reference.counts[window]))
    if not (ref > 0):
        raise AnalysisError("reference histogram is empty around the notch")
    ratio = float(np.sum(h.counts[window])) / ref
    return ratio, 1.0 - ratio


def contour_ratios(heights: Dict[float, float], tau_sp: float) -> pd.DataFrame:
    """Peak heights relative to the zero-delay peak, next to exp(−Δ/τ_sp)."""
    if 0.0 not in heights or not (heights[0.0] > 0):
        raise AnalysisError("contour needs a positive zero-delay peak height")
    delays = np.array(sorted(heights))
    ratio = np.array([heights[d] for d in delays]) / heights[0.0]
    expected = np.exp(-delays / tau_sp)
    return pd.DataFrame({'delay_ns': delays, 'ratio': ratio, 'expected': expected,
                         'deviation': ratio / expected - 1.0})
