import threading
from collections.abc import Callable
from typing import Any

_store: dict[str, dict[str, Any]] = {}
_lock = threading.Lock()


def _get_or_set(name: str, key: str, getter: Callable[[], Any]) -> Any:
	"""Get or set a value in the named in-process cache."""

	with _lock:
		bucket = _store.setdefault(name, {})
		if key in bucket:
			return bucket[key]

	value = getter()

	with _lock:
		bucket[key] = value

	return value

