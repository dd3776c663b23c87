"""Simulation of synchronized electro-optic modulation of quantum-dot single photons."""
from .sigcore import (GridError, GridSnapWarning, IntensityTrace, ModuleError, QdeomWarning, TimeGrid,
                      Wavepacket, fwhm, make_time_grid, norm)
from .emitter import (EmitterError, EmitterModel, PhaseTrajectory, coherence_params, cw_wavepacket,
                      dephase, exponential_wavepacket, sample_phase_ensemble, sample_phase_trajectory)
from .eomod import (BandwidthWarning, DelaySnapWarning, DriveWaveform, EomParams, ModulatorError,
                    TransferSaturationError, TransmissionEnvelope, apply_modulation, gaussian_drive,
                    mz_transmission, unmodulated_envelope)
from .detect import (DetectionError, DetectorModel, EventSchedule, Histogram, TimestampStream,
                     TimingConfig, analytic_histogram, detect_mc, expected_density, histogram,
                     merge_histograms, schedule_events)
from .analyze import (AnalysisError, EfficiencyChain, FitError, FitResult, TradeoffRow, TradeoffTable,
                      fit_exponential, fit_gaussian, indistinguishability_exact,
                      indistinguishability_mc, optimal_delay, tradeoff_sweep, transmitted_fraction)
from .scenario import ConfigError, RunReport, load_scenario, run_scenario
from .plotting import PlotError, emit_plots

__version__ = '0.1.0'
