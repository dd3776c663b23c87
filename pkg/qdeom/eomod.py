"""Pulse generator and Mach-Zehnder intensity modulator.

Widths handed to :func:`gaussian_drive` are optical intensity FWHM, i.e. what
a detector sees behind the modulator. The electrical waveform that realizes
them is solved through the sin² transfer.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from .powerlog import logger
from .sigcore import (CSV_FLOAT_FORMAT, GridError, IntensityTrace, ModuleError, QdeomWarning,
                      TimeGrid, Wavepacket, _frozen, fwhm, make_time_grid)

SHAPES = ('gaussian', 'inverted_gaussian', 'square', 'piecewise')
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


class ModulatorError(ModuleError, ValueError):
    pass


class TransferSaturationError(ModulatorError):
    pass


class DelaySnapWarning(QdeomWarning):
    pass


class BandwidthWarning(QdeomWarning):
    pass


@dataclass(frozen=True)
class EomParams:
    v_pi: float = 4.0
    extinction_db: float = 20.0
    t_max: float = 1.0
    bias_phase: Optional[float] = None
    min_pulse_ns: float = 0.3

    def __post_init__(self):
        if not (self.v_pi > 0) or not math.isfinite(self.v_pi):
            raise ModulatorError(f"v_pi must be positive, got {self.v_pi}")
        if not (self.extinction_db > 0):
            raise ModulatorError(f"extinction_db must be positive, got {self.extinction_db}")
        if not (0 < self.t_max <= 1):
            raise ModulatorError(f"t_max must lie in (0, 1], got {self.t_max}")
        if self.bias_phase is not None and not math.isfinite(self.bias_phase):
            raise ModulatorError(f"bias_phase must be finite, got {self.bias_phase}")
        if not (self.min_pulse_ns >= 0):
            raise ModulatorError(f"min_pulse_ns must be non-negative, got {self.min_pulse_ns}")

    @property
    def floor(self) -> float:
        if math.isinf(self.extinction_db):
            return 0.0
        return self.t_max * 10.0 ** (-self.extinction_db / 10.0)

    def bias_for(self, shape: str) -> float:
        if self.bias_phase is not None:
            return self.bias_phase
        # 反転パルスは最大透過にバイアス
        return 0.5 * math.pi if shape == 'inverted_gaussian' else 0.0


@dataclass(frozen=True)
class DriveWaveform:
    """Electrical pulse applied to the modulator RF port.

    For a pre-distorted Gaussian (``v_pi`` set) the voltage is shaped so that
    sin²(πV/2V_π) is a Gaussian of FWHM ``profile_fwhm``; otherwise
    ``fwhm`` is the width of the voltage itself.
    """
    shape: str
    v_peak: float
    fwhm: float
    delay: float = 0.0
    baseline: float = 0.0
    v_pi: Optional[float] = None
    profile_fwhm: Optional[float] = None
    points: Optional[tuple] = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ModulatorError(f"unknown drive shape {self.shape!r}")
        if self.shape == 'piecewise':
            if not self.points or len(self.points) < 2:
                raise ModulatorError("piecewise drive needs at least two (t, V) points")
            times = [p[0] for p in self.points]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ModulatorError("piecewise drive times must be strictly increasing")
        elif not (self.fwhm > 0):
            raise ModulatorError(f"drive fwhm must be positive, got {self.fwhm}")

    @property
    def inverted(self) -> bool:
        return self.shape == 'inverted_gaussian'

    def voltage(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        x = t - self.delay
        if self.shape in ('gaussian', 'inverted_gaussian'):
            if self.v_pi is not None:
                width = self.profile_fwhm if self.profile_fwhm is not None else self.fwhm
                g = np.exp(-0.5 * (x / (width * FWHM_TO_SIGMA)) ** 2)
                depth = math.sin(0.5 * math.pi * self.v_peak / self.v_pi) ** 2
                return self.baseline + (2.0 * self.v_pi / math.pi) * np.arcsin(np.sqrt(g * depth))
            return self.baseline + self.v_peak * np.exp(-0.5 * (x / (self.fwhm * FWHM_TO_SIGMA)) ** 2)
        if self.shape == 'square':
            return np.where(np.abs(x) <= 0.5 * self.fwhm, self.baseline + self.v_peak, self.baseline)
        pts = np.asarray(self.points, dtype=float)
        return np.interp(x, pts[:, 0], pts[:, 1])


@dataclass(frozen=True)
class TransmissionEnvelope:
    grid: TimeGrid
    transmission: np.ndarray
    floor: float = 0.0
    t_max: float = 1.0

    def __post_init__(self):
        value = _frozen(self.transmission, float)
        if value.shape != (self.grid.n,):
            raise ModulatorError(f"envelope has {value.shape} samples, grid has {self.grid.n}")
        tol = 1e-12
        if np.any(value < self.floor - tol) or np.any(value > self.t_max + tol):
            raise ModulatorError("envelope transmission outside [floor, t_max]")
        object.__setattr__(self, 'transmission', value)

    def trace(self) -> IntensityTrace:
        return IntensityTrace(self.grid, self.transmission)

    def to_csv(self, path) -> Path:
        path = Path(path)
        frame = pd.DataFrame({'t_ns': self.grid.times, 'transmission': self.transmission})
        frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
        return path


def mz_transmission(drive: DriveWaveform, params: EomParams, grid: TimeGrid) -> TransmissionEnvelope:
    floor, t_max = params.floor, params.t_max
    phase = 0.5 * math.pi * drive.voltage(grid.times) / params.v_pi + params.bias_for(drive.shape)
    value = floor + (t_max - floor) * np.sin(phase) ** 2
    return TransmissionEnvelope(grid, np.clip(value, floor, t_max), floor=floor, t_max=t_max)


def unmodulated_envelope(params: EomParams, grid: TimeGrid) -> TransmissionEnvelope:
    """DC bias at maximum transmission with the pulse generator off."""
    return TransmissionEnvelope(grid, np.full(grid.n, params.t_max),
                                floor=params.floor, t_max=params.t_max)


def _optical_width(drive: DriveWaveform, params: EomParams, grid: TimeGrid) -> float:
    value = mz_transmission(drive, params, grid).transmission
    if drive.inverted:
        value = value.max() - value
    return fwhm(IntensityTrace(grid, value))


def gaussian_drive(v_peak: float, fwhm_optical: float, delay: float = 0.0, inverted: bool = False,
                   params: Optional[EomParams] = None, predistort: bool = True) -> DriveWaveform:
    """Solve the electrical drive whose transmitted intensity has FWHM ``fwhm_optical``."""
    params = params or EomParams()
    if not (fwhm_optical > 0) or not math.isfinite(fwhm_optical):
        raise ModulatorError(f"optical fwhm must be positive, got {fwhm_optical}")
    if not (v_peak > 0):
        raise ModulatorError(f"v_peak must be positive, got {v_peak}")
    if v_peak > params.v_pi * (1.0 + 1e-12):
        raise TransferSaturationError(
            f"transfer saturation: v_peak={v_peak} V exceeds v_pi={params.v_pi} V")
    if fwhm_optical < params.min_pulse_ns:
        warnings.warn(BandwidthWarning(
            f"optical fwhm {fwhm_optical} ns is below the {params.min_pulse_ns} ns pulse generator limit"),
            stacklevel=2)
        logger.verbose('bandwidth limit overridden for %.4g ns pulse', fwhm_optical)

    shape = 'inverted_gaussian' if inverted else 'gaussian'
    half_span = 4.0 * fwhm_optical
    solver_grid = make_time_grid(-half_span, half_span, fwhm_optical / 1000.0)

    def candidate(width):
        if predistort:
            return DriveWaveform(shape, v_peak, width, 0.0, v_pi=params.v_pi, profile_fwhm=width)
        return DriveWaveform(shape, v_peak, width, 0.0)

    def mismatch(width):
        try:
            return _optical_width(candidate(width), params, solver_grid) - fwhm_optical
        except GridError as e:
            raise TransferSaturationError(f"transfer saturation: {e}") from e

    lo, hi = 0.1 * fwhm_optical, (1.5 if predistort else 4.0) * fwhm_optical
    f_lo, f_hi = mismatch(lo), mismatch(hi)
    if f_lo * f_hi > 0:
        raise TransferSaturationError(
            f"transfer saturation: {fwhm_optical} ns optical width unreachable at v_peak={v_peak} V")
    width = brentq(mismatch, lo, hi, xtol=1e-12 * fwhm_optical, rtol=1e-12)

    solved = candidate(width)
    volts = solved.voltage(solver_grid.times) - solved.baseline
    electrical = fwhm(IntensityTrace(solver_grid, np.clip(volts, 0.0, None)))
    drive = DriveWaveform(shape, v_peak, electrical, delay,
                          v_pi=params.v_pi if predistort else None,
                          profile_fwhm=width if predistort else None)
    logger.debug('drive %s: optical %.4g ns, electrical %.4g ns', shape, fwhm_optical, electrical)
    return drive


def _shift_samples(delta_t_mod: float, dt: float) -> int:
    ratio = delta_t_mod / dt
    steps = int(round(ratio))
    if abs(ratio - steps) > 1e-9 * max(1.0, abs(ratio)):
        warnings.warn(DelaySnapWarning(
            f"modulation delay {delta_t_mod} ns snapped to {steps * dt:.6g} ns"), stacklevel=3)
    return steps


def shifted_transmission(env: TransmissionEnvelope, delta_t_mod: float) -> np.ndarray:
    """Samples of T(t − delta_t_mod) on the envelope's own grid, holding the edge values."""
    steps = _shift_samples(delta_t_mod, env.grid.dt)
    value = env.transmission
    if steps == 0:
        return value
    out = np.empty_like(value)
    if steps > 0:
        k = min(steps, value.size)
        out[:k] = value[0]
        out[k:] = value[:value.size - k]
    else:
        k = min(-steps, value.size)
        out[value.size - k:] = value[-1]
        out[:value.size - k] = value[k:]
    return out


def apply_modulation(psi: Wavepacket, env: TransmissionEnvelope, delta_t_mod: float = 0.0) -> Wavepacket:
    """ψ′(t) = √T(t − delta_t_mod)·ψ(t); the phase passes through unchanged."""
    if not psi.grid.aligned_with(env.grid):
        raise ModulatorError(
            f"envelope grid (dt={env.grid.dt}, n={env.grid.n}) does not match "
            f"wavepacket grid (dt={psi.grid.dt}, n={psi.grid.n})")
    transmission = shifted_transmission(env, delta_t_mod)
    return Wavepacket(psi.grid, psi.magnitude * np.sqrt(transmission), psi.phase)
