import itertools
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from typing import Literal

import networkx as nx
import numpy as np
import uuid_utils

from ebn_srm.core.dist.dist import ChainBlock, MarginalSpec
from ebn_srm.core.lsf.lsf import DomainSpec, Expr, Num, ThresholdPartition, intersect_all
from ebn_srm.exceptions import CycleError, DoesNotExistError, EbnError, ValidationError
from ebn_srm.utils import throw
from ebn_srm.utils.validation import correlation_issue, is_normalized, is_valid_label

NODE_NAMESPACE = uuid_utils.UUID("5b0c9a8e-3f1d-5e62-9b4a-0d6f2c1e7a43")

Config = tuple[int, ...]


def node_uuid(label: str) -> str:
	"""Returns the stable opaque identifier of a node label."""

	return str(uuid_utils.uuid5(NODE_NAMESPACE, label))


@dataclass(frozen=True, eq=False)
class DomainModel:
	"""Child states as event domains; a trailing None state is the complement of the others."""

	domains: tuple[DomainSpec | None, ...]

	def __post_init__(self) -> None:
		if any(domain is None for domain in self.domains[:-1]):
			throw("Only the last state may be defined as the complement.")

	@property
	def n_states(self) -> int:
		return len(self.domains)

	@property
	def has_complement(self) -> bool:
		return self.domains[-1] is None

	def explicit(self) -> list[DomainSpec]:
		return [domain for domain in self.domains if domain is not None]

	def state_domain(self, k: int) -> DomainSpec:
		if self.domains[k] is not None:
			return self.domains[k]
		return intersect_all(domain.complement() for domain in self.explicit())

	def membership(self, bindings) -> np.ndarray:
		"""Returns a boolean matrix (n_samples, n_states) of state-domain membership."""

		columns = [np.atleast_1d(domain.contains(bindings)) for domain in self.explicit()]
		n = max((len(c) for c in columns), default=1)
		columns = [np.broadcast_to(c, (n,)) for c in columns]
		if self.has_complement:
			columns.append(~np.any(np.column_stack(columns), axis=1) if columns else np.ones(n, dtype=bool))
		return np.column_stack(columns)

	def state_index(self, bindings) -> np.ndarray:
		"""Returns the first state whose domain holds, or -1 where none does."""

		member = self.membership(bindings)
		return np.where(member.any(axis=1), member.argmax(axis=1), -1)

	def variables(self) -> frozenset[str]:
		return frozenset().union(*(domain.variables() for domain in self.explicit()))

	def expressions(self) -> list[Expr]:
		return [member for domain in self.explicit() for member in domain.members()]

	def substitute(self, mapping) -> "DomainModel":
		return DomainModel(tuple(d.substitute(mapping) if d is not None else None for d in self.domains))


@dataclass(frozen=True, eq=False)
class PartitionModel:
	"""Child states as ordered intervals of one expression; exclusive and exhaustive by construction."""

	partition: ThresholdPartition

	@property
	def n_states(self) -> int:
		return self.partition.n_states

	def state_domain(self, k: int) -> DomainSpec:
		return self.partition.domain(k)

	def state_index(self, bindings) -> np.ndarray:
		return np.atleast_1d(self.partition.state_index(bindings))

	def variables(self) -> frozenset[str]:
		return self.partition.expr.variables()

	def expressions(self) -> list[Expr]:
		return [self.partition.expr]

	def substitute(self, mapping) -> "PartitionModel":
		return PartitionModel(ThresholdPartition(self.partition.expr.substitute(mapping), self.partition.cuts))


@dataclass(frozen=True, eq=False)
class PmfModel:
	"""Per-state probability expressions; a trailing None state takes the remaining probability."""

	exprs: tuple[Expr | None, ...]

	def __post_init__(self) -> None:
		if any(expr is None for expr in self.exprs[:-1]):
			throw("Only the last state may be defined as the complement.")

	@property
	def n_states(self) -> int:
		return len(self.exprs)

	def probability_expr(self, k: int) -> Expr:
		if self.exprs[k] is not None:
			return self.exprs[k]

		rest: Expr = Num(1.0)
		for expr in self.exprs[:-1]:
			rest = rest - expr
		return rest

	def probabilities(self, bindings) -> np.ndarray:
		columns = [np.atleast_1d(self.probability_expr(k).evaluate(bindings)) for k in range(self.n_states)]
		n = max(len(c) for c in columns)
		return np.column_stack([np.broadcast_to(np.asarray(c, dtype=float), (n,)) for c in columns])

	def variables(self) -> frozenset[str]:
		return frozenset().union(*(expr.variables() for expr in self.exprs if expr is not None))

	def expressions(self) -> list[Expr]:
		return [expr for expr in self.exprs if expr is not None]

	def substitute(self, mapping) -> "PmfModel":
		return PmfModel(tuple(e.substitute(mapping) if e is not None else None for e in self.exprs))


LocalModel = DomainModel | PartitionModel | PmfModel


@dataclass(frozen=True, eq=False)
class DiscreteNode:
	label: str
	states: tuple[str, ...]
	kind: Literal["cpt", "domain", "pmf"] = "cpt"
	numeric: tuple[float, ...] | None = None
	cpt: np.ndarray | None = None
	local: Mapping[Config | None, LocalModel] = field(default_factory=dict)

	@property
	def id(self) -> str:
		return node_uuid(self.label)

	@property
	def n_states(self) -> int:
		return len(self.states)

	@property
	def codes(self) -> tuple[float, ...]:
		return self.numeric if self.numeric is not None else tuple(float(k) for k in range(self.n_states))

	def state_index(self, state: str) -> int:
		try:
			return self.states.index(state)
		except ValueError:
			throw(f"Node {self.label} has no state {state!r}.", DoesNotExistError)

	def local_model(self, config: Config) -> LocalModel:
		model = self.local.get(tuple(config), self.local.get(None))
		if model is None:
			throw(f"Node {self.label} has no local model for parent configuration {config}.")
		return model

	def local_models(self) -> list[LocalModel]:
		return list(self.local.values())


@dataclass(frozen=True, eq=False)
class ContinuousNode:
	label: str
	components: tuple[str, ...]
	marginals: Mapping[Config | None, tuple[MarginalSpec, ...]] = field(default_factory=dict)
	correlation: np.ndarray | None = None

	@property
	def id(self) -> str:
		return node_uuid(self.label)

	@property
	def dim(self) -> int:
		return sum(not spec.is_deterministic for spec in next(iter(self.marginals.values()), ()))

	def marginal_specs(self, config: Config) -> tuple[MarginalSpec, ...]:
		specs = self.marginals.get(tuple(config), self.marginals.get(None))
		if specs is None:
			throw(f"Node {self.label} has no distribution for parent configuration {config}.")
		return specs

	def block(self, config: Config, mapping: Mapping | None = None) -> ChainBlock:
		"""Returns the chain block for a discrete-parent configuration, with optional substitutions."""

		specs = self.marginal_specs(config)
		if mapping:
			specs = tuple(spec.substitute(mapping) for spec in specs)
		return ChainBlock(self.components, specs, self.correlation)

	def is_deterministic(self) -> bool:
		return all(spec.is_deterministic for specs in self.marginals.values() for spec in specs)

	def variables(self) -> frozenset[str]:
		names = frozenset().union(*(spec.variables() for specs in self.marginals.values() for spec in specs))
		return names - set(self.components)


Node = DiscreteNode | ContinuousNode


class EbnGraph:
	"""A hybrid network of discrete and continuous nodes with declaration order recorded."""

	def __init__(self) -> None:
		self._g = nx.DiGraph()
		self._order: dict[str, int] = {}
		self._counter = 0
		self.issues: list["Violation"] = []
		self.dangling: list[tuple[str, str]] = []

	# construction

	def add_node(self, node: Node) -> Node:
		if not is_valid_label(node.label):
			throw(f"Invalid node label {node.label!r}.")
		if node.label in self._g:
			throw(f"Node {node.label} is already declared.")
		if isinstance(node, ContinuousNode):
			for component in node.components:
				if not is_valid_label(component):
					throw(f"Invalid component name {component!r}.")
				owner = self.component_owner(component)
				if owner is not None:
					throw(f"Component {component} is already declared by node {owner}.")

		self._g.add_node(node.label, data=node)
		self._order[node.label] = self._counter
		self._counter += 1
		return node

	def set_node(self, node: Node) -> None:
		"""Replaces the local model of an existing node, keeping its position and edges."""

		if node.label not in self._g:
			throw(f"Unknown node {node.label}.", DoesNotExistError)
		self._g.nodes[node.label]["data"] = node

	def add_edge(self, parent: str, child: str) -> None:
		if parent not in self._g or child not in self._g:
			self.dangling.append((parent, child))
			return
		self._g.add_edge(parent, child)

	def remove_edge(self, parent: str, child: str) -> None:
		self._g.remove_edge(parent, child)

	def remove_node(self, label: str) -> None:
		self._g.remove_node(label)
		del self._order[label]

	def copy(self) -> "EbnGraph":
		clone = EbnGraph()
		clone._g = self._g.copy()
		clone._order = dict(self._order)
		clone._counter = self._counter
		clone.issues = list(self.issues)
		clone.dangling = list(self.dangling)
		return clone

	# queries

	@property
	def digraph(self) -> nx.DiGraph:
		return self._g

	@property
	def labels(self) -> list[str]:
		return sorted(self._g.nodes, key=self._order.__getitem__)

	@property
	def edges(self) -> list[tuple[str, str]]:
		return sorted(self._g.edges, key=lambda e: (self._order[e[0]], self._order[e[1]]))

	def __contains__(self, label: str) -> bool:
		return label in self._g

	def __len__(self) -> int:
		return len(self._g)

	def order_of(self, label: str) -> int:
		return self._order[label]

	def sort(self, labels: Iterable[str]) -> list[str]:
		return sorted(labels, key=self._order.__getitem__)

	def node(self, label: str) -> Node:
		if label not in self._g:
			throw(f"Unknown node {label}.", DoesNotExistError)
		return self._g.nodes[label]["data"]

	def discrete(self, label: str) -> DiscreteNode:
		node = self.node(label)
		if not isinstance(node, DiscreteNode):
			throw(f"Node {label} is not discrete.")
		return node

	def continuous(self, label: str) -> ContinuousNode:
		node = self.node(label)
		if not isinstance(node, ContinuousNode):
			throw(f"Node {label} is not continuous.")
		return node

	def is_continuous(self, label: str) -> bool:
		return isinstance(self.node(label), ContinuousNode)

	def discrete_labels(self) -> list[str]:
		return [label for label in self.labels if not self.is_continuous(label)]

	def continuous_labels(self) -> list[str]:
		return [label for label in self.labels if self.is_continuous(label)]

	def parents(self, label: str) -> list[str]:
		self.node(label)
		return self.sort(self._g.predecessors(label))

	def children(self, label: str) -> list[str]:
		self.node(label)
		return self.sort(self._g.successors(label))

	def discrete_parents(self, label: str) -> list[str]:
		return [p for p in self.parents(label) if not self.is_continuous(p)]

	def continuous_parents(self, label: str) -> list[str]:
		return [p for p in self.parents(label) if self.is_continuous(p)]

	def component_owner(self, component: str) -> str | None:
		for label in self._g.nodes:
			node = self._g.nodes[label]["data"]
			if isinstance(node, ContinuousNode) and component in node.components:
				return label
		return None

	def parent_configs(self, label: str) -> list[Config]:
		"""Joint discrete-parent states in mixed-radix order, first-declared parent most significant."""

		ranges = [range(self.discrete(p).n_states) for p in self.discrete_parents(label)]
		return list(itertools.product(*ranges))

	def scope(self, label: str) -> frozenset[str]:
		"""Names an expression of this node may reference."""

		names = set(self.discrete_parents(label))
		for parent in self.continuous_parents(label):
			names |= set(self.continuous(parent).components)
		return frozenset(names)

	def parent_codes(self, label: str, config: Config) -> dict[str, float]:
		"""Numeric codes of the discrete parents in a configuration."""

		return {
			parent: self.discrete(parent).codes[k]
			for parent, k in zip(self.discrete_parents(label), config, strict=True)
		}


@dataclass(frozen=True)
class Violation:
	kind: str
	message: str
	node: str | None = None
	line: int | None = None

	def __str__(self) -> str:
		where = f"line {self.line}: " if self.line else ""
		return f"{where}{self.kind}: {self.message}"


@dataclass
class ValidationReport:
	violations: list[Violation] = field(default_factory=list)
	warnings: list[str] = field(default_factory=list)

	@property
	def ok(self) -> bool:
		return not self.violations

	def add(self, kind: str, message: str, node: str | None = None, line: int | None = None) -> None:
		self.violations.append(Violation(kind, message, node, line))


@dataclass(frozen=True)
class Envelope:
	continuous_members: tuple[str, ...]
	discrete_members: tuple[str, ...]


@dataclass(frozen=True)
class EnvelopeReport:
	envelopes: tuple[Envelope, ...]

	@property
	def clique_lower_bound(self) -> int:
		return max((len(envelope.discrete_members) for envelope in self.envelopes), default=0)


def validate_graph(graph: EbnGraph, settings=None, samples: int | None = None) -> ValidationReport:
	"""Returns every structural and local-model violation of the graph; never raises on bad models."""

	from ebn_srm.config import Settings

	settings = settings or Settings()
	samples = samples or settings.stochastic_samples
	report = ValidationReport(violations=list(graph.issues))

	for parent, child in graph.dangling:
		report.add("dangling-edge", f"edge {parent} -> {child} references an undeclared node")

	try:
		cycle = nx.find_cycle(graph.digraph)
	except nx.NetworkXNoCycle:
		cycle = None

	if cycle:
		path = " -> ".join([edge[0] for edge in cycle] + [cycle[0][0]])
		report.add("cycle", f"graph contains the cycle {path}")

	for label in graph.labels:
		node = graph.node(label)
		if isinstance(node, DiscreteNode):
			_validate_discrete(graph, node, report)
		else:
			_validate_continuous(graph, node, report)

	if report.ok:
		_validate_stochastic(graph, report, samples, settings.seed)
		_validate_envelope_sizes(graph, report, settings)

	return report


def _validate_discrete(graph: EbnGraph, node: DiscreteNode, report: ValidationReport) -> None:
	label = node.label
	if node.n_states < 2:
		report.add("states", "a discrete node needs at least two states", label)
	if len(set(node.states)) != len(node.states):
		report.add("states", "state labels must be unique", label)
	if node.numeric is not None and len(node.numeric) != node.n_states:
		report.add("states", "numeric codes must match the states", label)

	continuous_parents = graph.continuous_parents(label)
	shape = tuple(graph.discrete(p).n_states for p in graph.discrete_parents(label)) + (node.n_states,)

	if node.kind == "cpt":
		if continuous_parents:
			report.add(
				"continuous-parent",
				f"plain CPT ignores continuous parent(s) {', '.join(continuous_parents)}; "
				"use state domains or probability expressions",
				label,
			)
		if node.cpt is None or tuple(np.shape(node.cpt)) != shape:
			report.add("cpt", f"table shape {np.shape(node.cpt)} does not match {shape}", label)
		elif not is_normalized(node.cpt):
			report.add("cpt", "every conditional row must be non-negative and sum to 1", label)
		return

	configs = graph.parent_configs(label)
	if not node.local:
		report.add("local-model", "no state domains or probability expressions declared", label)
		return

	scope = graph.scope(label)
	for config in configs:
		try:
			model = node.local_model(config)
		except ValidationError as e:
			report.add("local-model", str(e), label)
			continue

		if model.n_states != node.n_states:
			report.add("local-model", f"{model.n_states} state definitions for {node.n_states} states", label)
		if node.kind == "domain" and isinstance(model, PmfModel):
			report.add("local-model", "probability expressions on a domain node", label)
		if node.kind == "pmf" and not isinstance(model, PmfModel):
			report.add("local-model", "state domains on a probability-expression node", label)

	for model in node.local_models():
		if unknown := model.variables() - scope:
			report.add("scope", f"expression references undeclared name(s) {', '.join(sorted(unknown))}", label)


def _validate_continuous(graph: EbnGraph, node: ContinuousNode, report: ValidationReport) -> None:
	label = node.label
	if not node.marginals:
		report.add("distribution", "no distribution declared", label)
		return

	if node.correlation is not None:
		if np.shape(node.correlation) != (len(node.components),) * 2:
			report.add("correlation", "correlation matrix does not match the components", label)
		elif issue := correlation_issue(node.correlation):
			report.add("correlation", issue, label)

	for config in graph.parent_configs(label):
		try:
			specs = node.marginal_specs(config)
		except ValidationError as e:
			report.add("distribution", str(e), label)
			continue
		if len(specs) != len(node.components):
			report.add("distribution", "every component needs a distribution", label)

	scope = graph.scope(label)
	for specs in node.marginals.values():
		allowed = set(scope)
		for component, spec in zip(node.components, specs, strict=False):
			if unknown := spec.variables() - allowed:
				report.add(
					"scope", f"{component} references undeclared name(s) {', '.join(sorted(unknown))}", label
				)
			allowed.add(component)


def _validate_stochastic(graph: EbnGraph, report: ValidationReport, samples: int, seed: int) -> None:
	"""Samples the prior and checks state domains and probability expressions at the drawn points."""

	checked = [
		label
		for label in graph.discrete_labels()
		if graph.discrete(label).kind in ("domain", "pmf")
		and any(not isinstance(m, PartitionModel) for m in graph.discrete(label).local_models())
	]
	if not checked:
		return

	from ebn_srm.core.oracle.oracle import sample_forward

	try:
		draws = sample_forward(graph, samples, seed=seed, strict=False)
	except EbnError as e:
		report.add("sampling", f"prior sampling failed: {e}")
		return

	for label in checked:
		node = graph.discrete(label)
		for config in graph.parent_configs(label):
			mask = _config_mask(graph, label, config, draws)
			if not mask.any():
				continue

			model = node.local_model(config)
			bindings = {name: values[mask] for name, values in draws.values.items() if np.ndim(values)}
			try:
				_check_local_model(model, bindings, label, config, report)
			except EbnError as e:
				report.add("evaluation", f"{e} (parent configuration {config})", label)


def _config_mask(graph: EbnGraph, label: str, config: Config, draws) -> np.ndarray:
	mask = np.ones(draws.n, dtype=bool)
	for parent, k in zip(graph.discrete_parents(label), config, strict=True):
		mask &= draws.states[parent] == k
	return mask


def _check_local_model(model: LocalModel, bindings, label: str, config: Config, report: ValidationReport):
	if isinstance(model, DomainModel):
		counts = model.membership(bindings).sum(axis=1)
		if np.any(counts == 0):
			report.add("domains", f"state domains are not exhaustive (parent configuration {config})", label)
		if np.any(counts > 1):
			report.add("domains", f"state domains overlap (parent configuration {config})", label)
	elif isinstance(model, PmfModel):
		probabilities = model.probabilities(bindings)
		if np.any(probabilities < -1e-12) or np.any(probabilities > 1 + 1e-12):
			report.add("pmf", f"probabilities outside [0, 1] (parent configuration {config})", label)
		if np.any(np.abs(probabilities.sum(axis=1) - 1) > 1e-6):
			report.add("pmf", f"probabilities do not sum to 1 (parent configuration {config})", label)


def _validate_envelope_sizes(graph: EbnGraph, report: ValidationReport, settings) -> None:
	for envelope in markov_envelopes(graph).envelopes:
		size = len(envelope.discrete_members)
		members = ", ".join(envelope.continuous_members)
		if size > settings.envelope_max and not settings.allow_large_envelopes:
			report.add("envelope-size", f"envelope of {members} has {size} discrete members")
		elif size > settings.envelope_warn:
			report.warnings.append(f"envelope of {members} has {size} discrete members")

	for label in graph.discrete_labels():
		node = graph.discrete(label)
		if any(not expr.is_smooth() for m in node.local_models() for expr in m.expressions()):
			if settings.backend == "form":
				report.warnings.append(f"{label}: min/max/abs in expressions are not smooth; FORM may fail")


def markov_blanket(graph: EbnGraph, label: str) -> set[str]:
	"""Parents, children and the children's other parents."""

	blanket = set(graph.parents(label)) | set(graph.children(label))
	for child in graph.children(label):
		blanket |= set(graph.parents(child))
	blanket.discard(label)
	return blanket


_is_d_separator = getattr(nx, "is_d_separator", None) or getattr(nx, "d_separated")


def d_separated(graph: EbnGraph, a: Iterable[str], b: Iterable[str], given: Iterable[str] = ()) -> bool:
	a, b, given = set(a), set(b), set(given)
	for label in a | b | given:
		graph.node(label)
	if a & b or a & given or b & given:
		throw("Node sets must be disjoint.")

	return bool(_is_d_separator(graph.digraph, a, b, given))


def markov_envelopes(graph: EbnGraph) -> EnvelopeReport:
	"""Groups continuous nodes linked through their Markov blankets, with the discrete nodes they touch."""

	continuous = graph.continuous_labels()
	linked = nx.Graph()
	linked.add_nodes_from(continuous)
	for label in continuous:
		for other in markov_blanket(graph, label):
			if graph.is_continuous(other):
				linked.add_edge(label, other)

	envelopes = []
	for members in nx.connected_components(linked):
		members = graph.sort(members)
		discrete = set()
		for member in members:
			discrete |= {n for n in markov_blanket(graph, member) if not graph.is_continuous(n)}
		envelopes.append(Envelope(tuple(members), tuple(graph.sort(discrete))))

	envelopes.sort(key=lambda e: graph.order_of(e.continuous_members[0]))
	return EnvelopeReport(tuple(envelopes))


def topological_order(graph: EbnGraph) -> list[str]:
	"""Parents before children; ties by declaration order."""

	try:
		return list(nx.lexicographical_topological_sort(graph.digraph, key=graph.order_of))
	except nx.NetworkXUnfeasible:
		throw("Graph contains a cycle.", CycleError)


def check_valid(graph: EbnGraph, settings=None) -> None:
	"""Raises when the graph has violations."""

	report = validate_graph(graph, settings)
	if not report.ok:
		throw("; ".join(str(v) for v in report.violations))

