"""Quantum-dot emitter: exponential single-photon wavepackets and phase diffusion."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from .powerlog import logger
from .sigcore import ModuleError, TimeGrid, Wavepacket, _frozen

DEFAULT_WAVELENGTH_NM = 1302.5
TRUNCATION_LIFETIMES = 10.0


class EmitterError(ModuleError, ValueError):
    pass


@dataclass(frozen=True)
class EmitterModel:
    tau_sp: float
    tau_coh: float
    wavelength: float = DEFAULT_WAVELENGTH_NM

    @property
    def gamma(self) -> float:
        return 1.0 / self.tau_sp

    @property
    def gamma_star(self) -> float:
        # 変換限界では丸め誤差で負になるので0で止める
        return max(0.0, 1.0 / self.tau_coh - 1.0 / (2.0 * self.tau_sp))

    @property
    def indistinguishability(self) -> float:
        """Unmodulated two-photon overlap, Γ/(Γ + 2γ*) = T2/(2T1)."""
        return self.gamma / (self.gamma + 2.0 * self.gamma_star)

    @property
    def transform_limited(self) -> bool:
        return self.gamma_star == 0.0


@dataclass(frozen=True)
class PhaseTrajectory:
    grid: TimeGrid
    phase: np.ndarray
    seed: int

    def __post_init__(self):
        phase = _frozen(self.phase, float)
        if phase.shape != (self.grid.n,):
            raise EmitterError(f"phase trajectory has {phase.shape} samples, grid has {self.grid.n}")
        object.__setattr__(self, 'phase', phase)


def coherence_params(tau_sp: float, tau_coh: float,
                     wavelength: float = DEFAULT_WAVELENGTH_NM) -> EmitterModel:
    if not (tau_sp > 0) or not math.isfinite(tau_sp):
        raise EmitterError(f"lifetime must be positive, got tau_sp={tau_sp}")
    if not (tau_coh > 0) or not math.isfinite(tau_coh):
        raise EmitterError(f"coherence time must be positive, got tau_coh={tau_coh}")
    if tau_coh > 2.0 * tau_sp * (1.0 + 1e-12):
        raise EmitterError(
            f"tau_coh={tau_coh} ns is above transform limit 2*tau_sp={2.0 * tau_sp} ns")
    model = EmitterModel(tau_sp=float(tau_sp), tau_coh=float(tau_coh), wavelength=float(wavelength))
    logger.debug('emitter: gamma=%.6g /ns, gamma_star=%.6g /ns', model.gamma, model.gamma_star)
    return model


def exponential_wavepacket(model: EmitterModel, grid: TimeGrid, t_emit: float = 0.0) -> Wavepacket:
    """Real, non-negative amplitude sqrt(Γ)·exp(−Γ(t − t_emit)/2) after ``t_emit``.

    An onset on an interior node carries half the intensity there, the
    trapezoid value of a step. The sampled packet is then scaled so its
    trapezoid norm equals the emitted probability inside the grid,
    exp(−Γ·max(0, t_start − t_emit)) − exp(−Γ(t_end − t_emit)), never above one.
    """
    if grid.t_end < t_emit:
        raise EmitterError(f"grid ends at {grid.t_end} ns, before emission at {t_emit} ns")
    if grid.t_end < t_emit + TRUNCATION_LIFETIMES * model.tau_sp:
        logger.debug('wavepacket truncated at %.4g lifetimes',
                     (grid.t_end - t_emit) / model.tau_sp)
    t = grid.times - t_emit
    intensity = np.zeros(grid.n)
    after = t >= -1e-12 * grid.dt
    intensity[after] = model.gamma * np.exp(-model.gamma * np.clip(t[after], 0.0, None))
    onset = int(np.argmax(after))
    if onset > 0 and abs(t[onset]) <= 1e-12 * grid.dt:
        intensity[onset] *= 0.5

    inside = (math.exp(-model.gamma * max(0.0, grid.t_start - t_emit))
              - math.exp(-model.gamma * (grid.t_end - t_emit)))
    area = float(trapezoid(intensity, dx=grid.dt))
    if area > inside > 0:
        intensity *= inside / area
    return Wavepacket(grid, np.sqrt(intensity))


def cw_wavepacket(grid: TimeGrid, photons_per_window: float) -> Wavepacket:
    """Attenuated continuous-wave light: flat intensity, ``photons_per_window`` over the grid.

    Used for the modulator-width calibration, where the EOM envelope is read
    directly off a flat input.
    """
    if not (0 <= photons_per_window <= 1):
        raise EmitterError(f"photons_per_window must lie in [0, 1], got {photons_per_window}")
    level = math.sqrt(photons_per_window / grid.span)
    return Wavepacket(grid, np.full(grid.n, level))


def sample_phase_trajectory(model: EmitterModel, grid: TimeGrid, seed: int) -> PhaseTrajectory:
    """Wiener phase with increments N(0, 2γ*·dt), starting at zero."""
    if model.gamma_star == 0.0:
        return PhaseTrajectory(grid, np.zeros(grid.n), seed)
    rng = np.random.default_rng(seed)
    steps = rng.normal(0.0, math.sqrt(2.0 * model.gamma_star * grid.dt), grid.n - 1)
    phase = np.concatenate(([0.0], np.cumsum(steps)))
    return PhaseTrajectory(grid, phase, seed)


def sample_phase_ensemble(model: EmitterModel, grid: TimeGrid, n: int, seed: int):
    # 軌道ごとのシードは seed + index
    return [sample_phase_trajectory(model, grid, seed + i) for i in range(n)]


def dephase(psi: Wavepacket, trajectory: PhaseTrajectory) -> Wavepacket:
    """Multiply ``psi`` by exp(iφ(t)); the intensity is left untouched."""
    if not psi.grid.aligned_with(trajectory.grid):
        raise EmitterError("phase trajectory grid does not match wavepacket grid")
    return Wavepacket(psi.grid, psi.magnitude, psi.phase + trajectory.phase)
