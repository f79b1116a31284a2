import re

import numpy as np

LABEL_PATTERN = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


def is_valid_label(label: str) -> bool:
	"""Returns True if the label can be used as a node, state or component name else False."""

	return bool(LABEL_PATTERN.match(label))


def is_normalized(table: np.ndarray, tol: float = 1e-9) -> bool:
	"""Returns True if every slice along the last axis is a probability vector else False."""

	table = np.asarray(table, dtype=float)
	if np.any(~np.isfinite(table)) or np.any(table < 0):
		return False

	return bool(np.all(np.abs(table.sum(axis=-1) - 1.0) <= tol))


def is_strictly_increasing(values) -> bool:
	"""Returns True if the values are strictly increasing else False."""

	values = np.asarray(values, dtype=float)
	return bool(np.all(np.diff(values) > 0))


def correlation_issue(matrix) -> str | None:
	"""Returns a description of why the matrix is not a valid correlation matrix, or None."""

	matrix = np.asarray(matrix, dtype=float)
	if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
		return "correlation matrix is not square"
	if not np.allclose(matrix, matrix.T, atol=1e-12):
		return "correlation matrix is not symmetric"
	if not np.allclose(np.diag(matrix), 1.0, atol=1e-12):
		return "correlation matrix diagonal is not 1"

	try:
		np.linalg.cholesky(matrix)
	except np.linalg.LinAlgError:
		return "correlation matrix is not positive definite"

	return None
