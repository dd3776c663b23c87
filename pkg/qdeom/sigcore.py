"""Time-domain signal types shared by every stage of the simulation.

All times are in nanoseconds. Grids are uniform; integrals use the trapezoid
rule everywhere so that norms, fractions and histogram expectations agree.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from .powerlog import logger

DEFAULT_DT = 0.001  # 1 ps
CSV_FLOAT_FORMAT = '%.9g'
_SNAP_RTOL = 1e-9


class ModuleError(Exception):
    pass


class GridError(ModuleError, ValueError):
    pass


class QdeomWarning(UserWarning):
    pass


class GridSnapWarning(QdeomWarning):
    pass


def _frozen(array, dtype):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    dt: float
    n: int
    snapped: bool = False

    @property
    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.n)

    @property
    def span(self) -> float:
        return self.t_end - self.t_start

    def aligned_with(self, other: 'TimeGrid') -> bool:
        return (self.n == other.n and math.isclose(self.dt, other.dt, rel_tol=1e-12)
                and math.isclose(self.t_start, other.t_start, rel_tol=0.0, abs_tol=1e-9 * self.dt))

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w


def make_time_grid(t_start: float, t_end: float, dt: float = DEFAULT_DT) -> TimeGrid:
    if not (dt > 0) or not math.isfinite(dt):
        raise GridError(f"time step must be positive, got dt={dt}")
    if not (t_end > t_start):
        raise GridError(f"inverted or empty bounds: t_start={t_start}, t_end={t_end}")
    ratio = (t_end - t_start) / dt
    steps = round(ratio)
    snapped = False
    if abs(ratio - steps) > _SNAP_RTOL * max(1.0, ratio):
        steps = math.floor(ratio)
        snapped = True
    if steps < 1:
        raise GridError(f"grid [{t_start}, {t_end}] holds no full step of {dt}")
    grid = TimeGrid(t_start=float(t_start), t_end=float(t_start + steps * dt), dt=float(dt),
                    n=int(steps) + 1, snapped=snapped)
    if snapped:
        warnings.warn(GridSnapWarning(
            f"grid end snapped from {t_end} to {grid.t_end} (dt={dt})"), stacklevel=2)
        logger.debug('grid end snapped from %s to %s', t_end, grid.t_end)
    return grid


@dataclass(frozen=True)
class IntensityTrace:
    grid: TimeGrid
    value: np.ndarray

    def __post_init__(self):
        value = _frozen(self.value, float)
        if value.shape != (self.grid.n,):
            raise GridError(f"trace has {value.shape} samples, grid has {self.grid.n}")
        if not np.all(np.isfinite(value)) or np.any(value < 0):
            raise GridError("intensity trace values must be finite and non-negative")
        object.__setattr__(self, 'value', value)


@dataclass(frozen=True)
class Wavepacket:
    """Single-photon amplitude stored as magnitude and phase per sample.

    ``amplitude`` is ``magnitude * exp(1j * phase)`` in ns^-1/2. Keeping the
    two parts apart means a phase trajectory never touches the intensity.
    """
    grid: TimeGrid
    magnitude: np.ndarray
    phase: np.ndarray = field(default=None)

    def __post_init__(self):
        magnitude = _frozen(self.magnitude, float)
        if magnitude.shape != (self.grid.n,):
            raise GridError(f"wavepacket has {magnitude.shape} samples, grid has {self.grid.n}")
        if not np.all(np.isfinite(magnitude)) or np.any(magnitude < 0):
            raise GridError("wavepacket magnitude must be finite and non-negative")
        phase = np.zeros(self.grid.n) if self.phase is None else self.phase
        phase = _frozen(phase, float)
        if phase.shape != magnitude.shape or not np.all(np.isfinite(phase)):
            raise GridError("wavepacket phase must be finite and match the grid")
        object.__setattr__(self, 'magnitude', magnitude)
        object.__setattr__(self, 'phase', phase)
        total = norm(self)
        if total > 1.0 + 1e-3:
            raise GridError(f"wavepacket norm {total:.6g} exceeds one photon")

    @classmethod
    def from_amplitude(cls, grid: TimeGrid, amplitude) -> 'Wavepacket':
        amplitude = np.asarray(amplitude, dtype=complex)
        return cls(grid, np.abs(amplitude), np.angle(amplitude))

    @property
    def amplitude(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)

    def intensity(self) -> IntensityTrace:
        return IntensityTrace(self.grid, self.magnitude * self.magnitude)

    def with_global_phase(self, phi: float) -> 'Wavepacket':
        return Wavepacket(self.grid, self.magnitude, self.phase + phi)


def norm(psi: Wavepacket) -> float:
    """Detection probability carried by ``psi`` (trapezoid rule)."""
    return float(trapezoid(psi.magnitude * psi.magnitude, dx=psi.grid.dt))


def fwhm(trace: IntensityTrace) -> float:
    """Width between the outermost half-maximum crossings of a trace.

    Crossings are located by linear interpolation between bracketing samples.
    A peak sitting on the first or last sample is taken as a step onset and
    clipped to that grid edge (the one-sided exponential case). An interior
    peak whose half-maximum region runs into a grid edge is truncated and
    raises.
    """
    y = np.asarray(trace.value, dtype=float)
    t = trace.grid.times
    peak = float(y.max()) if y.size else 0.0
    if peak <= 0:
        raise GridError("no half-max crossings: trace has no positive peak")
    half = 0.5 * peak
    above = np.flatnonzero(y >= half)
    first, last = int(above[0]), int(above[-1])
    if first == 0 and last == y.size - 1:
        raise GridError("no half-max crossings: trace never falls below half maximum")
    top = int(np.argmax(y))
    if (first == 0 and top != 0) or (last == y.size - 1 and top != y.size - 1):
        raise GridError("no half-max crossings on one side: peak truncated by the grid edge")

    if first == 0:
        left = t[0]
    else:
        y0, y1 = y[first - 1], y[first]
        left = t[first - 1] + (half - y0) / (y1 - y0) * (t[first] - t[first - 1])
    if last == y.size - 1:
        right = t[-1]
    else:
        y0, y1 = y[last], y[last + 1]
        right = t[last] + (y0 - half) / (y0 - y1) * (t[last + 1] - t[last])
    return float(right - left)


# CSV入出力

def trace_to_csv(trace: IntensityTrace, path, value_name: str = 'value') -> Path:
    path = Path(path)
    frame = pd.DataFrame({'t_ns': trace.grid.times, value_name: trace.value})
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return path


def wavepacket_to_csv(psi: Wavepacket, path) -> Path:
    path = Path(path)
    amplitude = psi.amplitude
    frame = pd.DataFrame({'t_ns': psi.grid.times, 're': amplitude.real, 'im': amplitude.imag})
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return path


def _grid_from_times(times: np.ndarray, path) -> TimeGrid:
    if times.size < 2:
        raise GridError(f"{path}: need at least two samples to rebuild a grid")
    dt = float(times[1] - times[0])
    steps = np.diff(times)
    if not np.allclose(steps, dt, rtol=1e-5, atol=1e-9):
        raise GridError(f"{path}: samples are not uniformly spaced")
    return TimeGrid(t_start=float(times[0]), t_end=float(times[0] + dt * (times.size - 1)),
                    dt=dt, n=int(times.size))


def read_trace_csv(path) -> IntensityTrace:
    frame = pd.read_csv(path)
    if frame.columns[0] != 't_ns' or len(frame.columns) != 2:
        raise GridError(f"{path}: expected header t_ns,<value>")
    times = frame['t_ns'].to_numpy(dtype=float)
    return IntensityTrace(_grid_from_times(times, path), frame.iloc[:, 1].to_numpy(dtype=float))


def read_wavepacket_csv(path) -> Wavepacket:
    frame = pd.read_csv(path)
    if list(frame.columns) != ['t_ns', 're', 'im']:
        raise GridError(f"{path}: expected header t_ns,re,im")
    times = frame['t_ns'].to_numpy(dtype=float)
    amplitude = frame['re'].to_numpy(dtype=float) + 1j * frame['im'].to_numpy(dtype=float)
    return Wavepacket.from_amplitude(_grid_from_times(times, path), amplitude)
