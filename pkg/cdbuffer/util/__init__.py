import hashlib
import json
import logging
import os
from collections import Counter
from os.path import exists
from typing import Any, Iterable, Union

import numpy as np
from tqdm import tqdm

import cdbuffer.util.colors as col

# --- Commonly used types -----------------------------------------------------

# Path
Path = Union[str, os.PathLike]

# Object region (x0, y0, x1, y1) in pixel coordinates, x1/y1 exclusive
Box = tuple

# --- Configure logging--------------------------------------------------------
log = logging.getLogger('cdbuffer')
if 'CDBUF_LOGGING_LEVEL' in os.environ:
    try:
        intLevel = int(os.environ['CDBUF_LOGGING_LEVEL'])
        log.setLevel(intLevel)
    except ValueError:
        pass
else:
    log.setLevel(logging.INFO)


# --- Logging classes ---------------------------------------------------------
class LogFormatter(logging.Formatter):
    MSG_FORMAT = "%(asctime)s [%(levelname)s] - %(message)s"
    LEVEL_FORMATS = {
        logging.DEBUG: col.dim(MSG_FORMAT),
        logging.INFO: MSG_FORMAT,
        logging.WARNING: col.yellow(MSG_FORMAT),
        logging.ERROR: col.red(MSG_FORMAT),
        logging.CRITICAL: col.bold(col.red(MSG_FORMAT))
    }

    def format(self, record):
        log_fmt = self.LEVEL_FORMATS[record.levelno]
        formatter = logging.Formatter(log_fmt, '%Y-%m-%d %H:%M:%S')
        return formatter.format(record)


class FileFormatter(logging.Formatter):
    MSG_FORMAT = "%(asctime)s [%(levelname)s] - %(message)s"

    def format(self, record):
        formatter = logging.Formatter(
            fmt=self.MSG_FORMAT,
            datefmt='%Y-%m-%d %H:%M:%S'
        )
        formatted = formatter.format(record)
        for char in col.CODES:
            formatted = formatted.replace(char, '')
        return formatted


class TqdmLoggingHandler(logging.StreamHandler):
    """Avoid tqdm progress bar interruption by logger's output to console"""

    def emit(self, record):
        try:
            msg = self.format(record)
            tqdm.write(msg, end=self.terminator)
        except RecursionError:
            raise
        except Exception:
            self.handleError(record)


# Initializer loggers
ch = TqdmLoggingHandler()
ch.setFormatter(LogFormatter())
log.addHandler(ch)


def add_file_handler(path: Path) -> logging.FileHandler:
    """Mirror package logs (without colour codes) into a file.

    Replaces any file handler added earlier.
    """
    for old in [h for h in log.handlers if isinstance(h, logging.FileHandler)]:
        log.removeHandler(old)
        old.close()
    fh = logging.FileHandler(path, mode='w')
    fh.setFormatter(FileFormatter())
    log.addHandler(fh)
    return fh


def progress_disabled() -> bool:
    """Progress bars follow the package verbosity."""
    return log.getEffectiveLevel() > logging.INFO


# --- Warning counters --------------------------------------------------------
class EventCounter(Counter):
    """Counts degenerate-but-legal events (e.g. zero-area boxes).

    Each event kind is logged at debug level the first time it is seen.
    """

    def hit(self, kind: str, n: int = 1) -> None:
        if n <= 0:
            return
        if kind not in self:
            log.debug(f"First occurrence of '{kind}' event")
        self[kind] += n


#: Package-wide counter; the adaptation engine reports its deltas.
events = EventCounter()


# --- Utility functions -------------------------------------------------------
def make_dir(_dir: Path) -> None:
    """Makes a directory if one does not already exist,
    in a manner compatible with multithreading.
    """
    if not exists(_dir):
        try:
            os.makedirs(_dir, exist_ok=True)
        except FileExistsError:
            pass


def canonical_json(data: Any) -> str:
    """Serialize to JSON with sorted keys, so equal objects give equal bytes."""
    return json.dumps(data, indent=1, sort_keys=True) + '\n'


def load_json(filename: Path) -> Any:
    with open(filename, 'r') as data_file:
        return json.load(data_file)


def write_json(data: Any, filename: Path) -> None:
    with open(filename, 'w') as data_file:
        data_file.write(canonical_json(data))


def sha256_arrays(arrays: Iterable[np.ndarray], extra: str = '') -> str:
    """Content hash over a sequence of arrays (shape, dtype and bytes)."""
    h = hashlib.sha256()
    h.update(extra.encode('utf-8'))
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(str(arr.shape).encode('utf-8'))
        h.update(arr.dtype.str.encode('utf-8'))
        h.update(arr.tobytes())
    return h.hexdigest()


def env_seed(default: int = 0) -> int:
    """Default seed, taken from CDBUF_SEED when set."""
    value = os.environ.get('CDBUF_SEED')
    if value is None:
        return default
    try:
        return int(value)
    except ValueError:
        log.warning(f'Ignoring non-integer CDBUF_SEED={value!r}')
        return default


def rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent, reproducible random stream for (seed, *keys)."""
    return np.random.default_rng([int(seed)] + [int(k) for k in keys])
