import hashlib
import logging
import sys
from collections.abc import Generator
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import NoReturn

import numpy as np

from ebn_srm.exceptions import ValidationError

LOGGER_NAMESPACE = "ebn_srm"


def throw(message: str, exc: type[Exception] = ValidationError) -> NoReturn:
	"""Raises the given exception type with the message."""

	raise exc(message)


def get_logger(module: str) -> logging.Logger:
	"""Returns the logger for the given module."""

	return logging.getLogger(f"{LOGGER_NAMESPACE}.{module}")


def configure_logging(verbose: bool = False) -> None:
	"""Sends package logs to stderr, DEBUG when verbose and WARNING otherwise."""

	logger = logging.getLogger(LOGGER_NAMESPACE)
	logger.setLevel(logging.DEBUG if verbose else logging.WARNING)
	if not any(getattr(h, "_ebn_srm", False) for h in logger.handlers):
		handler = logging.StreamHandler(sys.stderr)
		handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
		handler._ebn_srm = True
		logger.addHandler(handler)


def log_error(title: str, message: str, module: str = "error") -> None:
	"""Logs an error with a title, then lets the caller continue."""

	get_logger(module).error("%s: %s", title, message)


def job_seed(base_seed: int, *stream: int) -> int:
	"""Returns a 128-bit key derived from the base seed and the stream indices."""

	digest = hashlib.blake2b(digest_size=16)
	digest.update(int(base_seed).to_bytes(32, "little", signed=True))
	for index in stream:
		digest.update(int(index).to_bytes(16, "little", signed=True))

	return int.from_bytes(digest.digest(), "little")


def make_rng(base_seed: int, *stream: int) -> np.random.Generator:
	"""Returns a counter-based generator for the given stream of the base seed."""

	return np.random.Generator(np.random.Philox(key=job_seed(base_seed, *stream)))


@contextmanager
def executor_context(workers: int = 1) -> Generator[ThreadPoolExecutor | None, None, None]:
	"""Context manager yielding a thread pool, or None when work should run inline."""

	if workers <= 1:
		yield None
		return

	executor = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="ebn-srm")
	try:
		yield executor
	finally:
		executor.shutdown(wait=True)


def run_ordered(executor: ThreadPoolExecutor | None, fn, items: list) -> list:
	"""Maps `fn` over `items` and returns results in item order."""

	if executor is None:
		return [fn(item) for item in items]

	return list(executor.map(fn, items))


def json_default(value):
	"""Converts numpy scalars and arrays for `json.dumps`."""

	if isinstance(value, np.generic):
		return value.item()
	if isinstance(value, np.ndarray):
		return value.tolist()
	raise TypeError(f"{type(value).__name__} is not serializable")
