import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from functools import wraps
from pathlib import Path

from config import Config
from errors import DerainError, EXIT_FAILURE, EXIT_OK, EXIT_VALIDATION, StorageError

logger = logging.getLogger(__name__)


def handle_errors(f):
    """Decorator to handle errors and return consistent exit codes"""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            result = f(*args, **kwargs)
            return EXIT_OK if result is None else result
        except DerainError as e:
            logger.debug("command failed", exc_info=True)
            return error_response(str(e), e.error_type, e.exit_code)
        except ValueError as e:
            logger.debug("command failed", exc_info=True)
            return error_response(str(e), 'validation_error', EXIT_VALIDATION)
        except Exception as e:
            logger.exception("unexpected failure")
            return error_response(str(e), 'server_error', EXIT_FAILURE)
    return decorated_function


def success_response(data, message=None):
    """Print a command's result block and return the success exit code"""
    if message:
        print(message)
    if isinstance(data, dict):
        for key, value in data.items():
            print(f"  {key}: {value}")
    elif data is not None:
        print(data)
    return EXIT_OK


def error_response(error, error_type='error', status=EXIT_FAILURE):
    """Print a one-line error to stderr and return its exit code"""
    print(f"error[{error_type}]: {error}", file=sys.stderr)
    return status


def ensure_dir(path):
    """Create ``path`` (and parents); surface failures with the path named"""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(path, f"cannot create directory ({e.strerror or e})")
    return path


def parallel_map(fn, items, threads=None):
    """
    Map ``fn`` over ``items`` on a bounded thread pool.

    Results come back in input order, so anything assembled from them is
    independent of scheduling.
    """
    items = list(items)
    workers = min(threads or Config.DERAIN_THREADS, max(len(items), 1))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items))


def fmt(value, places=6):
    """Fixed-point formatting used by every CSV artifact"""
    if value is None:
        return ''
    return f"{value:.{places}f}"
