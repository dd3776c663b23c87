import argparse
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

from . import powerlog
from .analyze import fit_exponential, fit_gaussian
from .detect import read_histogram_csv
from .plotting import emit_plots
from .powerlog import error_print, info_print, logger, variable_str, warning_print
from .scenario import ConfigError, load_config, preset_path, run_scenario
from .sigcore import ModuleError

ENV_FILE = './qdeom.env'


def create_parser():
    # コマンドライン引数を設定する
    parser = argparse.ArgumentParser(
        prog='qdeom', parents=[powerlog.create_parser()],
        description='Simulate electro-optic modulation of quantum-dot single photons.')
    parser.add_argument('--out', '-o', help='output folder (default: QDEOM_OUT_DIR or [paths] out_folder)')
    parser.add_argument('--seed', type=int, help='override the scenario seed')
    parser.add_argument('--pulses', type=int, help='override the number of excitation pulses')
    parser.add_argument('--settings', default='./settings.ini', help='user settings on top of default.ini')
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='run a scenario file')
    run.add_argument('config')
    preset = sub.add_parser('preset', help='run a built-in scenario (fig2, fig3a, fig3b, tradeoff, laser-cal)')
    preset.add_argument('name')
    fit = sub.add_parser('fit', help='fit a histogram CSV (bin_start_ns,count)')
    fit.add_argument('csv')
    fit.add_argument('--model', choices=['exponential', 'gaussian', 'notch'], default='exponential')
    fit.add_argument('--jitter', type=float, default=None, help='detector jitter FWHM in ns')
    sweep = sub.add_parser('sweep', help='run only the trade-off sweep of a scenario file')
    sweep.add_argument('config')
    plot = sub.add_parser('plot', help='render CSV outputs as SVG')
    plot.add_argument('csv', nargs='+')
    return parser


def output_folder(args, config):
    if args.out:
        return Path(args.out)
    load_dotenv(ENV_FILE)
    env_out = os.getenv('QDEOM_OUT_DIR')
    if env_out:
        return Path(env_out)
    return Path(config.get('paths', 'out_folder', fallback='./out'))


def _print_report(report):
    info_print(f"Scenario {variable_str(report.scenario)} finished in {report.duration_s:.1f} s")
    for label in sorted(set(report.fits) | set(report.fit_errors), key=report._order):
        info_print(f"  {label}: {report.summary(label)}")
    if report.calibration:
        info_print(report.calibration)
    for w in report.warnings:
        warning_print(w)
    info_print(f"{len(report.outputs)} files written to {variable_str(report.out_dir)}")


def _fit_csv(args, out_dir):
    hist = read_histogram_csv(args.csv)
    if args.model == 'exponential':
        result = fit_exponential(hist, irf_fwhm=args.jitter)
    else:
        result = fit_gaussian(hist, args.model == 'notch', args.jitter)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = result.to_txt(out_dir / f"{Path(args.csv).stem}_fit.txt")
    info_print(result.to_text().rstrip())
    info_print(f"fit written to {variable_str(path)}")


def main(argv=None):
    args = create_parser().parse_args(argv)
    config = load_config(settings_path=args.settings)
    # .ini [logs] section
    log_folder = config.get('logs', 'log_folder', fallback='./logs')
    level = args.log_level
    if level == 'INFO' and config.getboolean('logs', 'debug', fallback=False):
        level = 'DEBUG'
    try:
        powerlog.configure(log_folder, level)
    except OSError as e:
        warning_print(f"logging to {log_folder} disabled: {e}")
        powerlog.set_log_level(level)

    out_dir = output_folder(args, config)
    try:
        if args.command in ('run', 'preset', 'sweep'):
            path = preset_path(args.name) if args.command == 'preset' else Path(args.config)
            report = run_scenario(path, out_dir, seed=args.seed, n_pulses=args.pulses,
                                  settings_path=args.settings, sweep_only=args.command == 'sweep')
            _print_report(report)
        elif args.command == 'fit':
            _fit_csv(args, out_dir)
        elif args.command == 'plot':
            for path in emit_plots(args.csv, out_dir):
                info_print(f"plot written to {variable_str(path)}")
    except ConfigError as e:
        error_print(f"Configuration error: {e}")
        return 1
    except (ModuleError, OSError) as e:
        error_print(f"Error: {e}")
        logger.debug('failure', exc_info=True)
        return 2
    return 0


if __name__ == '__main__':
    sys.exit(main())
