"""Master-clock scheduling, gated SPAD detection and TCSPC histograms.

Timestamps are measured from the opening of the SPAD gate. The gated
excitation pulse arrives ``gate_lead`` ns after the gate opens, so a
wavepacket built on ``[0, t_gate]`` with ``t_emit = gate_lead`` is already in
detector time.
"""
from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import stats
from scipy.integrate import cumulative_trapezoid

from .powerlog import logger
from .sigcore import CSV_FLOAT_FORMAT, IntensityTrace, ModuleError, TimeGrid, Wavepacket, _frozen, norm

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
KERNEL_SIGMAS = 6.0
DEFAULT_CHUNK = 100_000
SAMPLER_CACHE = 32


class DetectionError(ModuleError, ValueError):
    pass


@dataclass(frozen=True)
class TimingConfig:
    t_rep: float = 20.0
    gate_divider: int = 10
    t_gate: float = 50.0
    delta_t_mod: float = 0.0
    n_pulses: int = 1_000_000
    gate_lead: float = 0.0

    def __post_init__(self):
        if not (self.t_rep > 0):
            raise DetectionError(f"t_rep must be positive, got {self.t_rep}")
        if int(self.gate_divider) != self.gate_divider or self.gate_divider < 1:
            raise DetectionError(f"gate_divider must be an integer >= 1, got {self.gate_divider}")
        if not (self.t_gate > 0):
            raise DetectionError(f"t_gate must be positive, got {self.t_gate}")
        if int(self.n_pulses) != self.n_pulses or self.n_pulses < 1:
            raise DetectionError(f"n_pulses must be an integer >= 1, got {self.n_pulses}")
        if not (0 <= self.gate_lead < self.t_gate):
            raise DetectionError(f"gate_lead must lie in [0, t_gate), got {self.gate_lead}")

    @property
    def gate_period(self) -> float:
        return self.t_rep * self.gate_divider


@dataclass(frozen=True)
class EventSchedule:
    """Master-clock schedule; records are generated on demand, never stored."""
    cfg: TimingConfig

    @property
    def n_gated(self) -> int:
        return -(-self.cfg.n_pulses // self.cfg.gate_divider)

    @property
    def gated_indices(self) -> np.ndarray:
        return np.arange(0, self.cfg.n_pulses, self.cfg.gate_divider, dtype=np.int64)

    def records(self, start: int = 0, stop: Optional[int] = None) -> pd.DataFrame:
        """Per-cycle rows for cycles ``start <= k < stop`` (absolute times, ns)."""
        cfg = self.cfg
        stop = cfg.n_pulses if stop is None else min(stop, cfg.n_pulses)
        k = np.arange(start, max(start, stop), dtype=np.int64)
        excitation = k * cfg.t_rep
        gated = (k % cfg.gate_divider) == 0
        gate_open = np.where(gated, excitation - cfg.gate_lead, np.nan)
        return pd.DataFrame({
            'cycle_index': k,
            'excitation_ns': excitation,
            'eom_trigger_ns': excitation + cfg.delta_t_mod,
            'gate_open_ns': gate_open,
            'gate_close_ns': gate_open + cfg.t_gate,
            'gated': gated,
        })


def schedule_events(cfg: TimingConfig) -> EventSchedule:
    logger.debug('schedule: %d pulses, %d gated, gate every %.6g ns',
                 cfg.n_pulses, EventSchedule(cfg).n_gated, cfg.gate_period)
    return EventSchedule(cfg)


@dataclass(frozen=True)
class DetectorModel:
    jitter_fwhm: float = 0.25
    efficiency: float = 1.0
    dark_rate: float = 0.0

    def __post_init__(self):
        if not (self.jitter_fwhm >= 0):
            raise DetectionError(f"jitter_fwhm must be non-negative, got {self.jitter_fwhm}")
        if not (0 <= self.efficiency <= 1):
            raise DetectionError(f"efficiency must lie in [0, 1], got {self.efficiency}")
        if not (self.dark_rate >= 0):
            raise DetectionError(f"dark_rate must be non-negative, got {self.dark_rate}")

    @property
    def sigma(self) -> float:
        return self.jitter_fwhm / FWHM_PER_SIGMA


@dataclass(frozen=True)
class TimestampStream:
    cycle_index: np.ndarray
    t_ns: np.ndarray
    n_gated: int

    def __post_init__(self):
        object.__setattr__(self, 'cycle_index', _frozen(self.cycle_index, np.int64))
        object.__setattr__(self, 't_ns', _frozen(self.t_ns, float))

    def __len__(self):
        return int(self.t_ns.size)

    def to_csv(self, path) -> Path:
        path = Path(path)
        pd.DataFrame({'cycle_index': self.cycle_index, 't_ns': self.t_ns}).to_csv(
            path, index=False, float_format=CSV_FLOAT_FORMAT)
        return path


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    total_detected: float
    total_pulses: int
    overflow: float = 0

    def __post_init__(self):
        edges = _frozen(self.bin_edges, float)
        counts = np.array(self.counts, copy=True)
        counts.setflags(write=False)
        if edges.ndim != 1 or counts.shape != (edges.size - 1,):
            raise DetectionError("histogram needs len(bin_edges) == len(counts) + 1")
        object.__setattr__(self, 'bin_edges', edges)
        object.__setattr__(self, 'counts', counts)

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])

    @property
    def bin_starts(self) -> np.ndarray:
        return self.bin_edges[:-1]

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def to_csv(self, path) -> Path:
        path = Path(path)
        pd.DataFrame({'bin_start_ns': self.bin_starts, 'count': self.counts}).to_csv(
            path, index=False, float_format=CSV_FLOAT_FORMAT)
        return path


def read_histogram_csv(path) -> Histogram:
    frame = pd.read_csv(path)
    if list(frame.columns) != ['bin_start_ns', 'count']:
        raise DetectionError(f"{path}: expected header bin_start_ns,count")
    starts = frame['bin_start_ns'].to_numpy(dtype=float)
    if starts.size < 2:
        raise DetectionError(f"{path}: need at least two bins")
    width = starts[1] - starts[0]
    edges = np.append(starts, starts[-1] + width)
    counts = frame['count'].to_numpy()
    total = counts.sum()
    return Histogram(edges, counts, total, int(math.ceil(total)))


def _intensity_key(psi: Wavepacket):
    magnitude = np.ascontiguousarray(psi.magnitude)
    return (psi.grid.t_start, psi.grid.dt, psi.grid.n, hashlib.blake2b(magnitude.data).digest())


def _as_stream(psi_stream, n_gated: int):
    """Distinct intensity profiles in the stream and the profile index of every cycle.

    Detection times depend on |ψ|² only, so dephased copies of one packet
    share a profile.
    """
    if isinstance(psi_stream, Wavepacket):
        return [psi_stream], np.zeros(n_gated, dtype=np.int64)
    packets = list(psi_stream)
    if len(packets) != n_gated:
        raise DetectionError(f"got {len(packets)} wavepackets for {n_gated} gated cycles")
    unique, index = [], {}
    which = np.empty(n_gated, dtype=np.int64)
    for j, psi in enumerate(packets):
        key = _intensity_key(psi)
        if key not in index:
            index[key] = len(unique)
            unique.append(psi)
        which[j] = index[key]
    return unique, which


class _Sampler:
    """Discrete detection-time distribution of one wavepacket."""

    def __init__(self, psi: Wavepacket, t_gate: float):
        grid = psi.grid
        weights = grid.trapezoid_weights() * psi.magnitude ** 2
        total = float(weights.sum())
        self.grid = grid
        self.cdf = np.cumsum(weights) / total if total > 0 else None
        times = grid.times
        self.in_gate = (times >= 0.0) & (times <= t_gate)

    def draw(self, u_time, u_dither):
        node = np.minimum(np.searchsorted(self.cdf, u_time, side='right'), self.grid.n - 1)
        offset = (u_dither - 0.5) * self.grid.dt
        # 端点のセルは片側だけ
        offset = np.where(node == 0, 0.5 * u_dither * self.grid.dt, offset)
        offset = np.where(node == self.grid.n - 1, -0.5 * u_dither * self.grid.dt, offset)
        return node, self.grid.times[node] + offset


def _cached_sampler(cache, i: int, psi: Wavepacket, t_gate: float):
    # CDFは最近使った SAMPLER_CACHE 個だけ持つ
    if i in cache:
        cache.move_to_end(i)
        return cache[i]
    sampler = cache[i] = _Sampler(psi, t_gate)
    if len(cache) > SAMPLER_CACHE:
        cache.popitem(last=False)
    return sampler


def detect_mc(psi_stream: Union[Wavepacket, Sequence[Wavepacket]], det: DetectorModel,
              sched: EventSchedule, seed: int, chunk_size: int = DEFAULT_CHUNK) -> TimestampStream:
    """Monte Carlo gated detection, at most one timestamp per gated cycle."""
    n_gated = sched.n_gated
    packets, which = _as_stream(psi_stream, n_gated)
    p_detect = np.minimum(1.0, det.efficiency * np.array([norm(psi) for psi in packets]))
    samplers = OrderedDict()
    dark_mean = det.dark_rate * sched.cfg.t_gate
    gated = sched.gated_indices

    n_chunks = max(1, -(-n_gated // chunk_size))
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    out_cycles, out_times = [], []
    for c, child in enumerate(children):
        lo, hi = c * chunk_size, min(n_gated, (c + 1) * chunk_size)
        m = hi - lo
        if m <= 0:
            continue
        rng = np.random.default_rng(child)
        # 乱数の引き順は固定: 検出, 時刻, ディザ, ジッタ, ダーク数, ダーク時刻
        u_det = rng.random(m)
        u_time = rng.random(m)
        u_dither = rng.random(m)
        jitter = rng.normal(0.0, det.sigma, m)
        n_dark = rng.poisson(dark_mean, m)
        u_dark = rng.random(m)

        packet = which[lo:hi]
        t_event = np.full(m, np.inf)
        for i in np.unique(packet):
            mask = (packet == i) & (u_det < p_detect[i])
            if not mask.any():
                continue
            sampler = _cached_sampler(samplers, int(i), packets[i], sched.cfg.t_gate)
            node, t = sampler.draw(u_time[mask], u_dither[mask])
            t_event[mask] = np.where(sampler.in_gate[node], t, np.inf)

        has_dark = n_dark > 0
        if has_dark.any():
            k = n_dark[has_dark]
            t_dark = sched.cfg.t_gate * (1.0 - u_dark[has_dark] ** (1.0 / k))
            t_event[has_dark] = np.minimum(t_event[has_dark], t_dark)

        hit = np.isfinite(t_event)
        out_cycles.append(gated[lo:hi][hit])
        out_times.append(t_event[hit] + jitter[hit])

    cycles = np.concatenate(out_cycles) if out_cycles else np.zeros(0, dtype=np.int64)
    times = np.concatenate(out_times) if out_times else np.zeros(0)
    logger.verbose('detect_mc: %d timestamps from %d gated cycles', times.size, n_gated)
    return TimestampStream(cycles, times, n_gated)


def _edges(bin_width: float, span: float) -> np.ndarray:
    if not (bin_width > 0):
        raise DetectionError(f"bin_width must be positive, got {bin_width}")
    if not (span > 0):
        raise DetectionError(f"span must be positive, got {span}")
    ratio = span / bin_width
    n_bins = int(round(ratio)) if abs(ratio - round(ratio)) < 1e-9 * ratio else int(math.ceil(ratio))
    return bin_width * np.arange(n_bins + 1)


def histogram(timestamps, bin_width: float, span: float, total_pulses: Optional[int] = None) -> Histogram:
    """Counts over [0, span] in bins [start, start + bin_width); the rest is overflow."""
    if isinstance(timestamps, TimestampStream):
        t = timestamps.t_ns
        total_pulses = timestamps.n_gated if total_pulses is None else total_pulses
    else:
        t = np.asarray(timestamps, dtype=float).ravel()
    edges = _edges(bin_width, span)
    n_bins = edges.size - 1
    bins = np.searchsorted(edges, t, side='right') - 1
    inside = (bins >= 0) & (bins < n_bins)
    counts = np.bincount(bins[inside], minlength=n_bins).astype(np.int64)
    detected = int(counts.sum())
    return Histogram(edges, counts, detected,
                     int(total_pulses) if total_pulses is not None else int(t.size),
                     overflow=int(t.size - detected))


def merge_histograms(*parts: Histogram) -> Histogram:
    if not parts:
        raise DetectionError("nothing to merge")
    first = parts[0]
    for h in parts[1:]:
        if h.bin_edges.shape != first.bin_edges.shape or not np.array_equal(h.bin_edges, first.bin_edges):
            raise DetectionError("cannot merge histograms with different bin edges")
    counts = sum((h.counts for h in parts[1:]), first.counts.copy())
    return Histogram(first.bin_edges, counts,
                     sum(h.total_detected for h in parts),
                     sum(h.total_pulses for h in parts),
                     overflow=sum(h.overflow for h in parts))


def expected_density(psi: Wavepacket, det: DetectorModel, n_gated: int) -> IntensityTrace:
    """Unbinned expected count density n·η·(|ψ|² ⊛ jitter), counts/ns.

    With jitter the trace lives on ``psi.grid`` padded by six standard
    deviations on each side.
    """
    intensity = psi.magnitude ** 2
    scale = n_gated * det.efficiency
    grid = psi.grid
    if det.sigma == 0.0:
        return IntensityTrace(grid, scale * intensity)
    pad = int(math.ceil(KERNEL_SIGMAS * det.sigma / grid.dt))
    offsets = grid.dt * np.arange(-pad, pad + 1)
    kernel = stats.norm.pdf(offsets, scale=det.sigma)
    density = np.convolve(grid.trapezoid_weights() * intensity, kernel, mode='full')
    t_start = grid.t_start - pad * grid.dt
    wide = TimeGrid(t_start=t_start, t_end=t_start + grid.dt * (density.size - 1),
                    dt=grid.dt, n=density.size)
    return IntensityTrace(wide, scale * np.clip(density, 0.0, None))


def analytic_histogram(psi: Wavepacket, det: DetectorModel, n_gated: int, bin_width: float,
                       span: Optional[float] = None) -> Histogram:
    """Expected counts per bin; float counts, same bin layout as :func:`histogram` when ``span`` is given."""
    density = expected_density(psi, det, n_gated)
    t = density.grid.times
    cumulative = cumulative_trapezoid(density.value, t, initial=0.0)
    if span is not None:
        edges = _edges(bin_width, span)
    else:
        lo = math.floor(t[0] / bin_width + 1e-9)
        hi = math.ceil(t[-1] / bin_width - 1e-9)
        edges = bin_width * np.arange(lo, hi + 1)
    at_edges = np.interp(edges, t, cumulative, left=0.0, right=cumulative[-1])
    counts = np.diff(at_edges)
    total = float(cumulative[-1])
    inside = float(counts.sum())
    return Histogram(edges, counts, inside, int(n_gated), overflow=total - inside)


def emg_density(t, tau: float, sigma: float, t0: float = 0.0) -> np.ndarray:
    """Unit-area exponential decay (lifetime ``tau``, onset ``t0``) convolved with a Gaussian."""
    t = np.asarray(t, dtype=float)
    if sigma == 0.0:
        return np.where(t >= t0, np.exp(-(t - t0) / tau) / tau, 0.0)
    return stats.exponnorm.pdf(t, tau / sigma, loc=t0, scale=sigma)


def poisson_band_fraction(h: Histogram, expected: Histogram, n_sigma: float = 4.0) -> float:
    """Fraction of bins whose count lies within n_sigma·√max(λ, 1) of the expectation λ."""
    if not np.allclose(h.bin_edges, expected.bin_edges):
        raise DetectionError("histogram and expectation have different bins")
    lam = np.asarray(expected.counts, dtype=float)
    band = n_sigma * np.sqrt(np.maximum(lam, 1.0))
    inside = np.abs(np.asarray(h.counts, dtype=float) - lam) <= band
    return float(inside.mean()) if inside.size else 1.0


def chi_square(h: Histogram, expected: Histogram, min_expected: float = 5.0):
    """Pearson χ² over bins with at least ``min_expected`` counts; returns (χ², dof, p)."""
    lam = np.asarray(expected.counts, dtype=float)
    use = lam >= min_expected
    if not use.any():
        raise DetectionError("no bins with enough expected counts for a chi-square test")
    obs = np.asarray(h.counts, dtype=float)[use]
    chi2 = float(np.sum((obs - lam[use]) ** 2 / lam[use]))
    dof = int(use.sum())
    return chi2, dof, float(stats.chi2.sf(chi2, dof))
