import shlex
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from ebn_srm.config import Settings
from ebn_srm.core.dist.dist import MarginalSpec
from ebn_srm.core.lsf.lsf import DomainSpec, ThresholdPartition, parse_domain, parse_expr
from ebn_srm.core.model.model import (
	Config,
	ContinuousNode,
	DiscreteNode,
	DomainModel,
	EbnGraph,
	PartitionModel,
	PmfModel,
	Violation,
)
from ebn_srm.core.reduce.reduce import (
	DiscretizationScheme,
	EvidenceNodeSpec,
	add_evidence_node,
	discretize_node,
)
from ebn_srm.exceptions import ExpressionSyntaxError, ModelFileError, ValidationError

OPTIONS = {
	"state",
	"states",
	"numeric",
	"expr",
	"cuts",
	"components",
	"interior",
	"tails",
	"topology",
	"label",
	"observe",
	"delta",
	"domains",
}

COMPLEMENT = "complement"


@dataclass
class Directive:
	"""A reduction step declared in a model file, applied after the graph is built."""

	kind: Literal["discretize", "evidence"]
	target: str
	payload: DiscretizationScheme | EvidenceNodeSpec
	line: int = 0


@dataclass
class ModelDocument:
	graph: EbnGraph
	directives: list[Directive] = field(default_factory=list)

	def reduced(self, settings: Settings | None = None) -> EbnGraph:
		"""Returns the graph with every discretize and evidence-node directive applied in file order."""

		graph = self.graph
		for directive in self.directives:
			if directive.kind == "discretize":
				graph = discretize_node(graph, directive.target, directive.payload)
			else:
				graph = add_evidence_node(graph, directive.payload, settings)
		return graph


@dataclass
class _Entry:
	line: int
	config: dict[str, str] | None
	payload: object


@dataclass
class _Pending:
	line: int
	kind: Literal["discrete", "continuous"]
	states: tuple[str, ...] = ()
	numeric: tuple[float, ...] | None = None
	components: tuple[str, ...] = ()
	cpt: list[_Entry] = field(default_factory=list)
	domains: list[_Entry] = field(default_factory=list)
	partitions: list[_Entry] = field(default_factory=list)
	pmfs: list[_Entry] = field(default_factory=list)
	dists: list[_Entry] = field(default_factory=list)
	correlation: np.ndarray | None = None


class _Parser:
	def __init__(self, text: str) -> None:
		self.text = text
		self.graph = EbnGraph()
		self.pending: dict[str, _Pending] = {}
		self.directives: list[Directive] = []
		self.current: str | None = None
		self.line = 0
		self.raw = ""

	def parse(self) -> ModelDocument:
		for number, raw in enumerate(self.text.splitlines(), start=1):
			self.line, self.raw = number, raw
			try:
				tokens = shlex.split(raw, comments=True)
			except ValueError as e:
				self.fail(str(e), len(raw) + 1)
			if tokens:
				self.statement(tokens)

		for label, pending in self.pending.items():
			if pending.kind == "discrete":
				self.finish_discrete(label, pending)
			else:
				self.finish_continuous(label, pending)

		return ModelDocument(self.graph, self.directives)

	def fail(self, message: str, column: int = 1):
		raise ModelFileError(message, self.line, column)

	def issue(self, kind: str, message: str, node: str | None = None, line: int | None = None) -> None:
		self.graph.issues.append(Violation(kind, message, node, line or self.line))

	def statement(self, tokens: list[str]) -> None:
		keyword, *rest = tokens
		match keyword:
			case "node":
				self.node(rest)
			case "edge":
				self.edge(rest)
			case "cpt":
				self.cpt(rest)
			case "domain":
				self.domain(rest)
			case "partition":
				self.partition(rest)
			case "pmf":
				self.pmf(rest)
			case "dist":
				self.dist(rest)
			case "corr":
				self.corr(rest)
			case "discretize":
				self.discretize(rest)
			case "evidence-node":
				self.evidence_node(rest)
			case _:
				self.fail(f"unknown statement {keyword!r}")

	# helpers

	def split(self, tokens: Iterable[str]) -> tuple[dict[str, str], dict[str, str] | None, list[str]]:
		"""Splits tokens into options, a `given` parent configuration and bare words."""

		options: dict[str, str] = {}
		config: dict[str, str] | None = None
		words = []
		for token in tokens:
			if token == "given":
				config = {}
				continue
			key, sep, value = token.partition("=")
			if not sep:
				words.append(token)
			elif key in OPTIONS:
				options[key] = value
			elif config is not None:
				config[key] = value
			else:
				self.fail(f"unknown option {key!r}", self.column(token))
		return options, config, words

	def column(self, text: str) -> int:
		return max(self.raw.find(text), 0) + 1

	def expr(self, text: str):
		try:
			return parse_expr(text)
		except ExpressionSyntaxError as e:
			self.fail(str(e), self.column(text) + e.position)

	def domain_spec(self, text: str) -> DomainSpec:
		try:
			return parse_domain(text)
		except ExpressionSyntaxError as e:
			self.fail(str(e), self.column(text) + e.position)

	def numbers(self, text: str, what: str) -> tuple[float, ...]:
		try:
			return tuple(float(v) for v in text.split(",") if v.strip())
		except ValueError:
			self.fail(f"{what} must be comma-separated numbers", self.column(text))

	def require(self, options: dict[str, str], key: str) -> str:
		if key not in options:
			self.fail(f"missing {key}=")
		return options[key]

	def owner(self, kind: str) -> _Pending:
		if self.current is None:
			self.fail("statement outside a node declaration")
		pending = self.pending[self.current]
		if pending.kind != kind:
			self.fail(f"statement applies to {kind} nodes only")
		return pending

	# statements

	def node(self, tokens: list[str]) -> None:
		if len(tokens) < 2:
			self.fail("expected `node <label> discrete|continuous ...`")

		label, kind, *rest = tokens
		options, _, words = self.split(rest)
		if words:
			self.fail(f"unexpected {words[0]!r}", self.column(words[0]))

		try:
			if kind == "discrete":
				states = tuple(s for s in self.require(options, "states").split(",") if s)
				numeric = self.numbers(options["numeric"], "numeric") if "numeric" in options else None
				self.graph.add_node(DiscreteNode(label, states, numeric=numeric))
				self.pending[label] = _Pending(self.line, "discrete", states=states, numeric=numeric)
			elif kind == "continuous":
				components = tuple(c for c in self.require(options, "components").split(",") if c)
				self.graph.add_node(ContinuousNode(label, components))
				self.pending[label] = _Pending(self.line, "continuous", components=components)
			else:
				self.fail(f"node kind must be discrete or continuous, not {kind!r}", self.column(kind))
		except ValidationError as e:
			self.fail(str(e), self.column(label))

		self.current = label

	def edge(self, tokens: list[str]) -> None:
		if len(tokens) != 3 or tokens[1] != "->":
			self.fail("expected `edge <from> -> <to>`")
		self.graph.add_edge(tokens[0], tokens[2])

	def cpt(self, tokens: list[str]) -> None:
		pending = self.owner("discrete")
		if "=" not in tokens:
			self.fail("expected `cpt [given ...] = <row>`")

		at = tokens.index("=")
		_, config, words = self.split(tokens[:at])
		if words:
			self.fail(f"unexpected {words[0]!r}", self.column(words[0]))

		rows = " ".join(tokens[at + 1 :]).split(";")
		pending.cpt.append(_Entry(self.line, config, [row.split() for row in rows]))

	def domain(self, tokens: list[str]) -> None:
		pending = self.owner("discrete")
		options, config, words = self.split(tokens)
		state = self.require(options, "state")
		if words == [COMPLEMENT]:
			spec = None
		elif not words:
			spec = self.domain_spec(self.require(options, "expr"))
		else:
			self.fail(f"unexpected {words[0]!r}", self.column(words[0]))
		pending.domains.append(_Entry(self.line, config, (state, spec)))

	def partition(self, tokens: list[str]) -> None:
		pending = self.owner("discrete")
		options, config, _ = self.split(tokens)
		expr = self.expr(self.require(options, "expr"))
		cuts = self.numbers(self.require(options, "cuts"), "cuts")
		try:
			partition = ThresholdPartition(expr, cuts)
		except ValidationError as e:
			self.fail(str(e), self.column(options["cuts"]))
		pending.partitions.append(_Entry(self.line, config, partition))

	def pmf(self, tokens: list[str]) -> None:
		pending = self.owner("discrete")
		options, config, _ = self.split(tokens)
		state = self.require(options, "state")
		pending.pmfs.append(_Entry(self.line, config, (state, self.expr(self.require(options, "expr")))))

	def dist(self, tokens: list[str]) -> None:
		pending = self.owner("continuous")
		specs = {}
		config = None
		given = False
		for token in tokens:
			if token == "given":
				given, config = True, {}
				continue
			key, sep, value = token.partition("=")
			if not sep:
				self.fail(f"unexpected {token!r}", self.column(token))
			if given:
				config[key] = value
				continue
			if key not in pending.components:
				self.fail(f"{key} is not a component of {self.current}", self.column(token))
			try:
				specs[key] = MarginalSpec.from_text(value)
			except ExpressionSyntaxError as e:
				self.fail(str(e), self.column(value) + e.position)
			except ValidationError as e:
				self.fail(str(e), self.column(value))

		pending.dists.append(_Entry(self.line, config, specs))

	def corr(self, tokens: list[str]) -> None:
		pending = self.owner("continuous")
		if not tokens or tokens[0] != "=":
			self.fail("expected `corr = <row>; <row>`")

		try:
			rows = [[float(v) for v in row.split()] for row in " ".join(tokens[1:]).split(";")]
			pending.correlation = np.array(rows, dtype=float)
		except ValueError:
			self.fail("correlation rows must be numbers of equal length")

	def discretize(self, tokens: list[str]) -> None:
		if not tokens:
			self.fail("expected `discretize <label> cuts=...`")

		target, *rest = tokens
		options, _, words = self.split(rest)
		if words:
			self.fail(f"unexpected {words[0]!r}", self.column(words[0]))

		try:
			scheme = DiscretizationScheme(
				self.numbers(self.require(options, "cuts"), "cuts"),
				interior=options.get("interior", "truncated"),
				tails=self.numbers(options["tails"], "tails") if "tails" in options else None,
				topology=options.get("topology", "shared").replace("-", "_"),
				label=options.get("label"),
			)
		except ValidationError as e:
			self.fail(str(e))

		self.directives.append(Directive("discretize", target, scheme, self.line))
		self.current = None

	def evidence_node(self, tokens: list[str]) -> None:
		if len(tokens) < 3 or tokens[1] != "on":
			self.fail("expected `evidence-node <label> on <targets> ...`")

		label, _, targets, *rest = tokens
		domains: list[DomainSpec | None] = []
		options: dict[str, str] = {}
		collecting = False
		for token in rest:
			key, sep, value = token.partition("=")
			if sep and key in OPTIONS:
				collecting = key == "domains"
				if collecting:
					domains.append(None if value == COMPLEMENT else self.domain_spec(value))
				else:
					options[key] = value
			elif collecting and not sep:
				domains.append(None if token == COMPLEMENT else self.domain_spec(token))
			else:
				self.fail(f"unexpected {token!r}", self.column(token))

		try:
			spec = EvidenceNodeSpec(
				label,
				tuple(t for t in targets.split(",") if t),
				domains=tuple(domains),
				observe=self.expr(options["observe"]) if "observe" in options else None,
				delta=float(options["delta"]) if "delta" in options else None,
				states=tuple(options["states"].split(",")) if "states" in options else None,
			)
		except (ValueError, ValidationError) as e:
			self.fail(str(e))

		self.directives.append(Directive("evidence", label, spec, self.line))
		self.current = None

	# assembly

	def configs(self, label: str, entries: list[_Entry]) -> list[tuple[Config | None, _Entry]]:
		"""Resolves `given` assignments to state-index configurations; bad ones become issues."""

		parents = self.graph.discrete_parents(label)
		resolved = []
		for entry in entries:
			if entry.config is None:
				resolved.append((None, entry))
				continue

			if set(entry.config) != set(parents):
				self.issue(
					"local-model",
					f"given must assign every discrete parent ({', '.join(parents) or 'none'})",
					label,
					entry.line,
				)
				continue

			config = []
			for parent in parents:
				states = self.graph.discrete(parent).states
				if entry.config[parent] not in states:
					self.issue("local-model", f"{parent} has no state {entry.config[parent]!r}", label, entry.line)
					break
				config.append(states.index(entry.config[parent]))
			else:
				resolved.append((tuple(config), entry))
		return resolved

	def finish_discrete(self, label: str, pending: _Pending) -> None:
		kinds = [
			kind
			for kind, entries in (
				("cpt", pending.cpt),
				("domain", pending.domains + pending.partitions),
				("pmf", pending.pmfs),
			)
			if entries
		]
		if len(kinds) > 1:
			self.issue("local-model", f"mixes {' and '.join(kinds)} definitions", label, pending.line)
			return
		if not kinds:
			self.issue("local-model", "no cpt, state domains or probability expressions", label, pending.line)
			return

		if kinds[0] == "cpt":
			node = DiscreteNode(label, pending.states, "cpt", pending.numeric, cpt=self.table(label, pending))
		elif kinds[0] == "domain":
			local = self.state_models(label, pending, pending.domains, DomainModel)
			for config, entry in self.configs(label, pending.partitions):
				local[config] = PartitionModel(entry.payload)
			node = DiscreteNode(label, pending.states, "domain", pending.numeric, local=local)
		else:
			local = self.state_models(label, pending, pending.pmfs, PmfModel)
			node = DiscreteNode(label, pending.states, "pmf", pending.numeric, local=local)

		self.graph.set_node(node)

	def table(self, label: str, pending: _Pending) -> np.ndarray | None:
		configs = self.graph.parent_configs(label)
		shape = tuple(self.graph.discrete(p).n_states for p in self.graph.discrete_parents(label))
		table = np.full((*shape, len(pending.states)), np.nan)

		for config, entry in self.configs(label, pending.cpt):
			rows = entry.payload
			if config is not None:
				targets = [config]
			elif len(rows) == 1 and len(configs) > 1:
				self.issue("cpt", f"one row given for {len(configs)} parent configurations", label, entry.line)
				continue
			else:
				targets = configs
			if len(rows) != len(targets):
				self.issue("cpt", f"{len(rows)} rows for {len(targets)} parent configurations", label, entry.line)
				continue

			for target, row in zip(targets, rows, strict=True):
				values = self.row(label, pending.states, row, entry.line)
				if values is not None:
					table[target] = values

		if np.isnan(table).any():
			if not any(v.node == label and v.kind == "cpt" for v in self.graph.issues):
				self.issue("cpt", "some parent configurations have no row", label, pending.line)
			return None
		return table

	def row(self, label: str, states: tuple[str, ...], cells: list[str], line: int) -> np.ndarray | None:
		values = np.full(len(states), np.nan)
		labeled = all(":" in cell for cell in cells)
		if not labeled and len(cells) != len(states):
			self.issue("cpt", f"{len(cells)} entries for {len(states)} states", label, line)
			return None

		for k, cell in enumerate(cells):
			state, _, number = cell.rpartition(":") if labeled else ("", "", cell)
			if labeled and state not in states:
				self.issue("cpt", f"unknown state label {state!r}", label, line)
				return None
			try:
				values[states.index(state) if labeled else k] = float(number)
			except ValueError:
				self.issue("cpt", f"{number!r} is not a number", label, line)
				return None

		if np.isnan(values).any():
			self.issue("cpt", "every state needs a probability", label, line)
			return None
		return values

	def state_models(self, label: str, pending: _Pending, entries: list[_Entry], model) -> dict:
		grouped: dict[Config | None, dict[int, object]] = {}
		lines: dict[Config | None, int] = {}
		for config, entry in self.configs(label, entries):
			state, spec = entry.payload
			if state not in pending.states:
				self.issue("local-model", f"unknown state label {state!r}", label, entry.line)
				continue
			grouped.setdefault(config, {})[pending.states.index(state)] = spec
			lines.setdefault(config, entry.line)

		local = {}
		last = len(pending.states) - 1
		for config, by_state in grouped.items():
			missing = [k for k in range(len(pending.states)) if k not in by_state]
			if missing and missing != [last]:
				self.issue(
					"local-model",
					f"state {pending.states[missing[0]]!r} has no definition",
					label,
					lines[config],
				)
				continue
			if any(by_state.get(k) is None for k in range(last)):
				self.issue("local-model", "only the last state may be the complement", label, lines[config])
				continue
			local[config] = model(tuple(by_state.get(k) for k in range(len(pending.states))))
		return local

	def finish_continuous(self, label: str, pending: _Pending) -> None:
		marginals = {}
		for config, entry in self.configs(label, pending.dists):
			current = marginals.setdefault(config, {})
			current.update(entry.payload)

		complete = {}
		for config, specs in marginals.items():
			if missing := [c for c in pending.components if c not in specs]:
				self.issue("distribution", f"no distribution for {', '.join(missing)}", label, pending.line)
				continue
			complete[config] = tuple(specs[c] for c in pending.components)

		self.graph.set_node(ContinuousNode(label, pending.components, complete, pending.correlation))


def parse_model(text: str) -> ModelDocument:
	"""Parses model-file text.

	Syntax errors raise ModelFileError with the line and column; semantic problems (unknown state
	labels, missing rows) are recorded on the graph as violations so validation can report them.
	"""

	return _Parser(text).parse()


def load_model(path: str | Path) -> ModelDocument:
	return parse_model(Path(path).read_text(encoding="utf-8"))


def _num(value: float) -> str:
	return repr(float(value))


def _quote(text: str) -> str:
	return f'"{text}"'


def _given(graph: EbnGraph, label: str, config: Config | None) -> str:
	if config is None:
		return ""
	parents = graph.discrete_parents(label)
	pairs = " ".join(
		f"{parent}={graph.discrete(parent).states[k]}" for parent, k in zip(parents, config, strict=True)
	)
	return f" given {pairs}"


def _unparse_discrete(graph: EbnGraph, node: DiscreteNode) -> list[str]:
	head = f"node {node.label} discrete states={','.join(node.states)}"
	if node.numeric is not None:
		head += f" numeric={','.join(_num(v) for v in node.numeric)}"
	lines = [head]

	if node.kind == "cpt":
		if node.cpt is not None:
			for config in graph.parent_configs(node.label):
				cells = " ".join(f"{s}:{_num(p)}" for s, p in zip(node.states, node.cpt[config], strict=True))
				lines.append(f"cpt{_given(graph, node.label, config or None)} = {cells}")
		return lines

	for config, model in node.local.items():
		given = _given(graph, node.label, config)
		if isinstance(model, PartitionModel):
			cuts = ",".join(_num(c) for c in model.partition.cuts)
			lines.append(f"partition{given} expr={_quote(model.partition.expr.unparse())} cuts={cuts}")
		elif isinstance(model, DomainModel):
			for state, domain in zip(node.states, model.domains, strict=True):
				body = COMPLEMENT if domain is None else f"expr={_quote(domain.unparse())}"
				lines.append(f"domain state={state}{given} {body}")
		else:
			for state, expr in zip(node.states, model.exprs, strict=True):
				if expr is not None:
					lines.append(f"pmf state={state}{given} expr={_quote(expr.unparse())}")
	return lines


def _unparse_continuous(graph: EbnGraph, node: ContinuousNode) -> list[str]:
	lines = [f"node {node.label} continuous components={','.join(node.components)}"]
	for config, specs in node.marginals.items():
		assignments = " ".join(
			f"{component}={_quote(spec.unparse())}" for component, spec in zip(node.components, specs, strict=True)
		)
		lines.append(f"dist {assignments}{_given(graph, node.label, config)}")
	if node.correlation is not None:
		rows = "; ".join(" ".join(_num(v) for v in row) for row in np.asarray(node.correlation))
		lines.append(f"corr = {rows}")
	return lines


def _unparse_directive(directive: Directive) -> str:
	payload = directive.payload
	if directive.kind == "discretize":
		line = (
			f"discretize {directive.target} cuts={','.join(_num(b) for b in payload.boundaries)}"
			f" interior={payload.interior} topology={payload.topology.replace('_', '-')}"
		)
		if payload.tails is not None:
			line += f" tails={','.join(_num(t) for t in payload.tails)}"
		if payload.label:
			line += f" label={payload.label}"
		return line

	line = f"evidence-node {payload.label} on {','.join(payload.targets)}"
	if payload.observe is not None:
		line += f" observe={_quote(payload.observe.unparse())}"
		if payload.delta is not None:
			line += f" delta={_num(payload.delta)}"
	else:
		domains = " ".join(COMPLEMENT if d is None else _quote(d.unparse()) for d in payload.domains)
		line += f" domains={domains}"
	if payload.states:
		line += f" states={','.join(payload.states)}"
	return line


def unparse_model(document: ModelDocument | EbnGraph) -> str:
	"""Writes a graph (and its directives) back as model-file text."""

	if isinstance(document, EbnGraph):
		document = ModelDocument(document)

	graph = document.graph
	lines = []
	for label in graph.labels:
		node = graph.node(label)
		if isinstance(node, DiscreteNode):
			lines += _unparse_discrete(graph, node)
		else:
			lines += _unparse_continuous(graph, node)

	lines += [f"edge {parent} -> {child}" for parent, child in graph.edges]
	lines += [_unparse_directive(directive) for directive in document.directives]
	return "\n".join(lines) + "\n"
