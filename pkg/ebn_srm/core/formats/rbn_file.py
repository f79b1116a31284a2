import json
import math
import shlex
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ebn_srm.core.compiler.compiler import RbnModel, RbnNode
from ebn_srm.exceptions import EbnError, ModelFileError
from ebn_srm.utils import json_default

HEADER = "# reduced Bayesian network"
PROVENANCE = "#@"


@dataclass
class _PendingNode:
	line: int
	states: tuple[str, ...]
	parents: tuple[str, ...]
	rows: list[list[float]] = field(default_factory=list)


def dumps_rbn(model: RbnModel) -> str:
	"""Writes every table with exact float text, one row per parent configuration."""

	lines = [HEADER]
	for node in model.nodes.values():
		head = f"node {node.label} states={','.join(node.states)}"
		if node.parents:
			head += f" parents={','.join(node.parents)}"
		lines.append(head)
		for row in node.table.reshape(-1, node.n_states):
			lines.append("row = " + " ".join(repr(float(p)) for p in row))

	for record in model.provenance:
		lines.append(f"{PROVENANCE} {json.dumps(record, sort_keys=True, default=json_default)}")

	return "\n".join(lines) + "\n"


def loads_rbn(text: str) -> RbnModel:
	nodes: dict[str, _PendingNode] = {}
	provenance = []
	current = None

	for number, raw in enumerate(text.splitlines(), start=1):
		if raw.startswith(PROVENANCE):
			try:
				provenance.append(json.loads(raw[len(PROVENANCE) :]))
			except json.JSONDecodeError as e:
				raise ModelFileError(f"bad provenance record: {e.msg}", number, len(PROVENANCE) + e.colno) from e
			continue

		try:
			tokens = shlex.split(raw, comments=True)
		except ValueError as e:
			raise ModelFileError(str(e), number, len(raw) + 1) from e
		if not tokens:
			continue

		match tokens:
			case ["node", label, *options]:
				if label in nodes:
					raise ModelFileError(f"node {label} is declared twice", number, raw.index(label) + 1)
				values = dict(option.partition("=")[::2] for option in options)
				if not values.get("states"):
					raise ModelFileError("node needs states=...", number, len(raw) + 1)
				parents = tuple(values["parents"].split(",")) if values.get("parents") else ()
				nodes[label] = _PendingNode(number, tuple(values["states"].split(",")), parents)
				current = label
			case ["row", "=", *cells]:
				if current is None:
					raise ModelFileError("row before any node", number, 1)
				try:
					nodes[current].rows.append([float(cell) for cell in cells])
				except ValueError as e:
					raise ModelFileError(str(e), number, raw.index("=") + 2) from e
			case _:
				raise ModelFileError(f"unknown statement {tokens[0]!r}", number, 1)

	built = {}
	for label, pending in nodes.items():
		cards = []
		for parent in pending.parents:
			if parent not in nodes:
				raise ModelFileError(f"unknown parent {parent} of {label}", pending.line, 1)
			cards.append(len(nodes[parent].states))
		n_rows = math.prod(cards)
		if len(pending.rows) != n_rows or any(len(row) != len(pending.states) for row in pending.rows):
			raise ModelFileError(
				f"{label} needs {n_rows} rows of {len(pending.states)} probabilities", pending.line, 1
			)
		table = np.array(pending.rows, dtype=float).reshape((*cards, len(pending.states)))
		built[label] = RbnNode(label, pending.states, pending.parents, table)

	try:
		return RbnModel(built, provenance)
	except EbnError as e:
		raise ModelFileError(str(e)) from e


def save_rbn(model: RbnModel, path: str | Path) -> None:
	Path(path).write_text(dumps_rbn(model), encoding="utf-8")


def load_rbn(path: str | Path) -> RbnModel:
	return loads_rbn(Path(path).read_text(encoding="utf-8"))
