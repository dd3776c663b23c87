import os
import sys
import logging
from pathlib import Path
from datetime import datetime
import argparse
import glob
from colorama import Fore, Style

# カスタムログレベルVERBOSEを作成
VERBOSE = 15
logging.addLevelName(VERBOSE, "VERBOSE")

def verbose(self, message, *args, **kws):
    if self.isEnabledFor(VERBOSE):
        self._log(VERBOSE, message, args, **kws)

logging.Logger.verbose = verbose

LOG_LEVELS = ['DEBUG', 'VERBOSE', 'INFO', 'WARNING']
KEEP_LOG_FILES = 5

logger = logging.getLogger('qdeom')
log_level = logging.INFO


def create_parser(add_help=False):
    # コマンドライン引数を設定する
    parser = argparse.ArgumentParser(description='set log level', add_help=add_help)
    parser.add_argument('--log-level', '-log', default='INFO', choices=LOG_LEVELS,
                        help='Set the logging level (default: INFO)')
    parser.add_argument('-debug', action='store_const', const='DEBUG', dest='log_level',
                        help='Set the logging level to DEBUG')
    return parser


def _level_from_name(name):
    if str(name).upper() == 'VERBOSE':
        return VERBOSE
    level = getattr(logging, str(name).upper(), None)
    if not isinstance(level, int):
        raise ValueError(f"unknown log level {name!r}")
    return level


# ログレベルの設定を関数にする
def set_log_level(args_or_name):
    global log_level
    name = getattr(args_or_name, 'log_level', args_or_name)
    log_level = _level_from_name(name)
    logger.setLevel(log_level)
    return log_level


def configure(log_folder='./logs', level='INFO', script_name=None):
    """Attach a timestamped log file to the package logger and prune old ones.

    Only the command-line front end calls this; importing the library never
    touches the filesystem.
    """
    log_folder = Path(log_folder)
    log_folder.mkdir(parents=True, exist_ok=True)
    if script_name is None:
        script_name = os.path.basename(sys.argv[0]).split('.')[0] or 'qdeom'

    # ログファイル名に日時を含める
    now = datetime.now()
    log_filename = log_folder / (script_name + f'_{now.strftime("%Y%m%d_%H%M%S")}.log')

    for handler in list(logger.handlers):
        if isinstance(handler, logging.FileHandler):
            logger.removeHandler(handler)
            handler.close()
    handler = logging.FileHandler(log_filename, mode='a', encoding='utf-8')
    handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
    logger.addHandler(handler)
    set_log_level(level)

    # ログファイルが5個以上ある場合、古いものから削除
    log_files = sorted(glob.glob(str(log_folder / (script_name + '_*.log'))))
    while len(log_files) > KEEP_LOG_FILES:
        os.remove(log_files.pop(0))
    return log_filename


#verbose and info logging instead of print
def verbose_print(message):
    if log_level <= VERBOSE:
        print(message)
    logger.verbose(message)

def info_print(message):
    print(message)
    logger.info(message)

def warning_print(message):
    print(Fore.YELLOW + message + Style.RESET_ALL)
    logger.warning(message)

def error_print(message):
    print(Fore.RED + message + Style.RESET_ALL, file=sys.stderr)
    logger.error(message)

# コンソールのカラーフォーマット
def variable_str(obj):
    return Fore.CYAN + Style.BRIGHT + str(obj) + Style.RESET_ALL
