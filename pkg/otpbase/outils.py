from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from functools import wraps
from typing import Any, Callable, Iterable, Sequence, TypeVar, cast

import numpy as np
from typing_extensions import ParamSpec

from .oconst import (
    ENV_LOG_LEVEL,
    EXIT_INFEASIBLE,
    EXIT_INVALID_CONFIG,
    EXIT_IO,
    EXIT_NUMERIC,
)

T = TypeVar("T")
U = TypeVar("U")
P = ParamSpec("P")


def get_logger(
    name: str | None = None,
    level: int | str | None = None,
    format_string: str = json.dumps(
        {
            "timestamp": "%(asctime)s",
            "level": "%(levelname)s",
            "name": "%(name)s",
            "message": "%(message)s",
        }
    ),
) -> logging.Logger:
    """
    Configures and returns a logger with a specified name, level, and format.

    :param name: Name of the logger. If None, the package logger is configured.
    :param level: Logging level; falls back to the `OTP_LOG_LEVEL` environment variable.
    :param format_string: Format string for log messages.
    :return: Configured logger.
    """
    if name is None:
        name = "otpbase"
    if level is None:
        level = os.environ.get(ENV_LOG_LEVEL, "INFO").upper()
    logger_ = logging.getLogger(name)
    logger_.setLevel(level)
    if not logger_.handlers:
        ch = logging.StreamHandler()
        formatter = logging.Formatter(format_string)
        ch.setFormatter(formatter)
        logger_.addHandler(ch)
        logger_.propagate = False
    return logger_


logger = get_logger()


def set_level(level: int | str) -> None:
    """Sets the level of every logger under the package namespace."""
    for name in list(logging.Logger.manager.loggerDict):
        if name == "otpbase" or name.startswith("otpbase."):
            logging.getLogger(name).setLevel(level)


class OtpError(Exception):
    """Base error; `exit_code` is what the CLI exits with."""

    exit_code: int = EXIT_INVALID_CONFIG

    def __init__(self, detail: str) -> None:
        super().__init__(detail)
        self.detail = detail


class InvalidInputError(OtpError):
    exit_code = EXIT_INVALID_CONFIG


class CapacityError(InvalidInputError):
    pass


class InfeasibleBudgetError(OtpError):
    exit_code = EXIT_INFEASIBLE

    def __init__(self, detail: str, constraint: str) -> None:
        super().__init__(detail)
        self.constraint = constraint


class NumericFailureError(OtpError):
    """Non-finite numbers or a numerically degenerate problem."""

    exit_code = EXIT_NUMERIC

    def __init__(
        self,
        detail: str,
        *,
        iteration: int | None = None,
        covariate: int | None = None,
        replication: int | None = None,
    ) -> None:
        super().__init__(detail)
        self.iteration = iteration
        self.covariate = covariate
        self.replication = replication

    def locate(
        self, *, covariate: int | None = None, replication: int | None = None
    ) -> NumericFailureError:
        """Returns a copy of the error tagged with batch indices."""
        located = type(self).__new__(type(self))
        located.__dict__.update(self.__dict__)
        if covariate is not None:
            located.covariate = covariate
        if replication is not None:
            located.replication = replication
        where = [
            f"{key}={value}"
            for key, value in (
                ("replication", located.replication),
                ("covariate", located.covariate),
                ("iteration", located.iteration),
            )
            if value is not None
        ]
        located.detail = f"{self.detail.split(' [')[0]} [{', '.join(where)}]"
        located.args = (located.detail,)
        return located


class DegenerateDistributionError(NumericFailureError):
    pass


class IllConditionedError(NumericFailureError):
    def __init__(self, detail: str, smallest_pivot: float) -> None:
        super().__init__(detail)
        self.smallest_pivot = smallest_pivot


class UnderdeterminedError(NumericFailureError):
    pass


class EmptyNeighborhoodError(NumericFailureError):
    pass


class UndefinedGapError(NumericFailureError):
    pass


class ThresholdUnreachableError(NumericFailureError):
    def __init__(self, detail: str, achieved: dict[int, float]) -> None:
        super().__init__(detail)
        self.achieved = achieved


class PersistenceError(OtpError):
    exit_code = EXIT_IO


class ParseError(PersistenceError):
    pass


class VersionError(PersistenceError):
    pass


def exception_handler(func: Callable[P, T]) -> Callable[P, T]:
    """
    Decorator that maps stray exceptions onto the `OtpError` hierarchy.

    :param func: Function to be decorated.
    :return: Decorated function.
    """

    @wraps(func)
    def wrapper(*args: P.args, **kwargs: P.kwargs) -> T:
        try:
            return func(*args, **kwargs)
        except OtpError:
            raise
        except (FloatingPointError, np.linalg.LinAlgError) as e:
            logger.error("%s: %s", e.__class__.__name__, e)
            raise NumericFailureError(
                f"{func.__name__}: {e.__class__.__name__} => {e}"
            ) from e
        except OSError as e:
            logger.error("%s: %s", e.__class__.__name__, e)
            raise PersistenceError(
                f"{func.__name__}: {e.__class__.__name__} => {e}"
            ) from e
        except (ValueError, TypeError, IndexError) as e:
            logger.error("%s: %s", e.__class__.__name__, e)
            raise InvalidInputError(
                f"{func.__name__}: {e.__class__.__name__} => {e}"
            ) from e

    return wrapper


def timing_handler(func: Callable[P, T]) -> Callable[P, T]:
    """
    Decorator to measure the time taken by a function.

    :param func: Function to be decorated.
    :return: Decorated function.
    """

    @wraps(func)
    def wrapper(*args: P.args, **kwargs: P.kwargs) -> T:
        start = time.perf_counter()
        result = func(*args, **kwargs)
        end = time.perf_counter()
        logger.info("%s took %s seconds", func.__name__, round(end - start, 4))
        return result

    return wrapper


def handle(func: Callable[P, T]) -> Callable[P, T]:
    """
    Decorator that times a function and normalizes its exceptions.

    :param func: Function to be decorated.
    :return: Decorated function.
    """
    return cast(Callable[P, T], timing_handler(exception_handler(func)))


def worker_map(
    func: Callable[[U], T], items: Iterable[U], workers: int = 1
) -> list[T]:
    """
    Applies `func` to every item and returns the results in input order.

    With more than one worker the calls are offloaded to a thread pool; the
    ordering of the output never depends on scheduling. Threads overlap only
    the numpy kernels that release the GIL; pure-Python loops interleave.
    """
    seq: Sequence[U] = list(items)
    if workers <= 1 or len(seq) <= 1:
        return [func(item) for item in seq]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, seq))


def check_finite(values: Any, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericFailureError(f"non-finite {what}")
