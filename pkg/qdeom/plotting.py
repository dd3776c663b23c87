"""SVG rendering of the CSV files written by a run."""
from __future__ import annotations

import re
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .powerlog import logger  # noqa: E402
from .sigcore import ModuleError  # noqa: E402

# 同じ入力から同じSVGを出す
matplotlib.rcParams['svg.hashsalt'] = 'qdeom'
SVG_METADATA = {'Date': None}

KINDS = {
    ('bin_start_ns', 'count'): 'histogram',
    ('tau_mod_ns', 'delay_ns', 'indist_exact', 'indist_simple', 'fraction', 'rate_hz'): 'tradeoff',
    ('t_ns', 'transmission'): 'envelope',
    ('t_ns', 'fit'): 'fitcurve',
    ('t_ns', 'value'): 'trace',
    ('t_ns', 're', 'im'): 'wavepacket',
    ('cycle_index', 't_ns'): 'timestamps',
}


class PlotError(ModuleError, ValueError):
    def __init__(self, message, path=None, line=None):
        where = f"{path}:{line}: " if path is not None and line is not None else (
            f"{path}: " if path is not None else '')
        super().__init__(where + message)
        self.path = path
        self.line = line


def read_export(path):
    """Read one exported CSV; returns (kind, frame). Errors name the file and line."""
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise PlotError("file is empty, expected a header row", path, 1) from None
    except pd.errors.ParserError as e:
        match = re.search(r'line (\d+)', str(e))
        raise PlotError(f"malformed row: {e}", path, int(match.group(1)) if match else None) from None
    except OSError as e:
        raise PlotError(f"cannot read: {e.strerror or e}", path) from None
    kind = KINDS.get(tuple(frame.columns))
    if kind is None:
        raise PlotError(f"unrecognized header {','.join(map(str, frame.columns))}", path, 1)
    for column in frame.columns:
        numeric = pd.to_numeric(frame[column], errors='coerce')
        bad = numeric.isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise PlotError(f"non-numeric value in column {column}", path, row + 2)
        frame[column] = numeric.astype(float)
    return kind, frame


def _histogram_axes(ax, frame, label=None):
    if frame.empty:
        return
    starts = frame['bin_start_ns'].to_numpy()
    width = starts[1] - starts[0] if starts.size > 1 else 1.0
    edges = np.append(starts, starts[-1] + width)
    ax.stairs(frame['count'].to_numpy(), edges, label=label)


def _sibling(path: Path, suffix: str):
    stem = path.stem[:-len('_hist')] if path.stem.endswith('_hist') else None
    if stem is None:
        return None
    candidate = path.with_name(f"{stem}{suffix}")
    return candidate if candidate.is_file() else None


def _plot_histogram(path: Path, frame, ax):
    _histogram_axes(ax, frame, label='counts')
    expected = _sibling(path, '_expected.csv')
    if expected is not None:
        kind, ref = read_export(expected)
        if kind == 'histogram' and len(ref) > 1:
            starts = ref['bin_start_ns'].to_numpy()
            ax.plot(starts + 0.5 * (starts[1] - starts[0]), ref['count'], lw=0.8, label='expected')
    curve = _sibling(path, '_fitcurve.csv')
    if curve is not None:
        kind, fit = read_export(curve)
        if kind == 'fitcurve' and not fit.empty:
            ax.plot(fit['t_ns'], fit['fit'], ls='--', lw=1.0, label='fit')
    ax.set_xlabel('time after gate opening (ns)')
    ax.set_ylabel('counts per bin')
    if not frame.empty:
        ax.legend(frameon=False)


def _plot_tradeoff(frame, ax):
    finite = frame[np.isfinite(frame['tau_mod_ns'])].sort_values('tau_mod_ns')
    x = finite['tau_mod_ns'].to_numpy()
    ax.plot(x, finite['indist_exact'], 'o-', label='indistinguishability (overlap)')
    ax.plot(x, finite['indist_simple'], 's--', label='indistinguishability (T2/2tau)')
    ax.set_xlabel('modulation width (ns)')
    ax.set_ylabel('indistinguishability')
    ax.set_ylim(0.0, 1.05)
    rate = ax.twinx()
    rate.plot(x, finite['rate_hz'], 'd-', color='tab:red', label='count rate')
    rate.set_ylabel('count rate (1/s)')
    ax.legend(loc='center right', frameon=False)


def _plot_frame(kind, path, frame, ax):
    if kind == 'histogram':
        _plot_histogram(path, frame, ax)
    elif kind == 'tradeoff':
        _plot_tradeoff(frame, ax)
    elif kind == 'timestamps':
        if not frame.empty:
            ax.hist(frame['t_ns'], bins=200, histtype='step')
        ax.set_xlabel('time after gate opening (ns)')
        ax.set_ylabel('timestamps')
    elif kind == 'wavepacket':
        ax.plot(frame['t_ns'], frame['re'] ** 2 + frame['im'] ** 2)
        ax.set_xlabel('time (ns)')
        ax.set_ylabel('|psi|^2 (1/ns)')
    else:
        column = frame.columns[1]
        ax.plot(frame['t_ns'], frame[column])
        ax.set_xlabel('time (ns)')
        ax.set_ylabel(column)


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format='svg', metadata=SVG_METADATA)
    plt.close(fig)
    return path


def emit_plots(csv_paths, out_dir) -> List[Path]:
    """One SVG per CSV, plus ``overlay_hist.svg`` when several histograms are given."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loaded = [(Path(p), *read_export(p)) for p in csv_paths]
    written = []
    for path, kind, frame in loaded:
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        ax.set_title(path.stem)
        _plot_frame(kind, path, frame, ax)
        fig.tight_layout()
        written.append(_save(fig, out_dir / f"{path.stem}.svg"))
        logger.verbose('plot %s -> %s', path, written[-1])

    histograms = [(path, frame) for path, kind, frame in loaded if kind == 'histogram']
    if len(histograms) > 1:
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for path, frame in histograms:
            _histogram_axes(ax, frame, label=path.stem.removesuffix('_hist'))
        ax.set_xlabel('time after gate opening (ns)')
        ax.set_ylabel('counts per bin')
        ax.legend(frameon=False, fontsize='small')
        fig.tight_layout()
        written.append(_save(fig, out_dir / 'overlay_hist.svg'))
    return written
