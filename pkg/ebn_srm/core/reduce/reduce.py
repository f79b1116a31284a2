import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from functools import partial
from typing import Literal, NamedTuple

import networkx as nx
import numpy as np

from ebn_srm.config import Settings
from ebn_srm.core.dist.dist import MarginalSpec
from ebn_srm.core.lsf.lsf import DomainSpec, Expr, Num, ThresholdPartition
from ebn_srm.core.model.model import (
	Config,
	ContinuousNode,
	DiscreteNode,
	DomainModel,
	EbnGraph,
	Envelope,
	PartitionModel,
	PmfModel,
	markov_envelopes,
	topological_order,
)
from ebn_srm.exceptions import CycleError, DistributionError, EbnError, ReversalError, ValidationError
from ebn_srm.utils import get_logger, throw
from ebn_srm.utils.validation import is_strictly_increasing

logger = get_logger("reduce")

Policy = Literal["enumerate-best", "greedy", "explicit"]
POLICIES = ("enumerate-best", "greedy", "explicit")

# families whose support does not depend on their parameters
UNBOUNDED_SUPPORT = {"normal": (-math.inf, math.inf), "gumbel": (-math.inf, math.inf)}
POSITIVE_SUPPORT = {"lognormal": (0.0, math.inf), "exponential": (0.0, math.inf)}


def remove_barren(graph: EbnGraph, protected: Iterable[str] = ()) -> EbnGraph:
	"""Removes unprotected childless nodes until none is left."""

	protected = set(protected)
	for label in protected:
		graph.node(label)

	reduced = graph.copy()
	while barren := [
		label for label in reduced.labels if label not in protected and not reduced.digraph.out_degree(label)
	]:
		for label in barren:
			reduced.remove_node(label)

	return reduced


def reverse_arc(graph: EbnGraph, i: str, j: str) -> EbnGraph:
	"""Reverses i -> j; both nodes inherit each other's parents. Local models are left untouched."""

	graph.node(i)
	graph.node(j)
	reversed_graph = graph.copy()
	_reverse(reversed_graph.digraph, i, j)
	return reversed_graph


def _reverse(g: nx.DiGraph, i: str, j: str) -> None:
	if not g.has_edge(i, j):
		throw(f"There is no edge {i} -> {j} to reverse.", ReversalError)

	g.remove_edge(i, j)
	if nx.has_path(g, i, j):
		g.add_edge(i, j)
		throw(f"Reversing {i} -> {j} would create a cycle through another path from {i} to {j}.", ReversalError)

	parents_i = set(g.predecessors(i))
	parents_j = set(g.predecessors(j))
	g.add_edges_from((p, i) for p in parents_j)
	g.add_edges_from((p, j) for p in parents_i)
	g.add_edge(j, i)


class Action(NamedTuple):
	kind: Literal["remove", "reverse"]
	source: str
	target: str = ""

	def __str__(self) -> str:
		return f"reverse {self.source} -> {self.target}" if self.kind == "reverse" else f"remove {self.source}"


class Score(NamedTuple):
	jobs: int
	links: int
	clique: int


def envelope_scope(graph: EbnGraph, envelope: Envelope) -> tuple[list[str], list[str]]:
	"""Returns the discrete children of the envelope (topological order) and the conditioning nodes."""

	members = set(envelope.continuous_members)
	children = [
		label
		for label in topological_order(graph)
		if not graph.is_continuous(label) and members & set(graph.parents(label))
	]

	conditioning = set()
	for label in [*envelope.continuous_members, *children]:
		conditioning |= set(graph.discrete_parents(label))

	return children, graph.sort(conditioning - set(children))


def envelope_job_count(graph: EbnGraph, envelope: Envelope) -> int:
	"""Reliability solves for the envelope: every joint cell but the last one per conditioning cell."""

	children, conditioning = envelope_scope(graph, envelope)
	return n_cells(graph, conditioning) * (n_cells(graph, children) - 1)


def n_cells(graph: EbnGraph, labels: Iterable[str]) -> int:
	return math.prod(graph.discrete(label).n_states for label in labels)


@dataclass
class EnvelopePlan:
	envelope: Envelope
	children: tuple[str, ...]
	conditioning: tuple[str, ...]
	actions: list[Action]
	parents: dict[str, tuple[str, ...]]
	score: Score
	policy: str

	def as_dict(self) -> dict:
		return {
			"continuous": list(self.envelope.continuous_members),
			"discrete": list(self.envelope.discrete_members),
			"actions": [str(action) for action in self.actions],
			"parents": {label: list(parents) for label, parents in self.parents.items()},
			"score": self.score._asdict(),
			"policy": self.policy,
		}


@dataclass
class EliminationPlan:
	"""Per-envelope reversal and removal actions with the resulting discrete parent sets."""

	envelopes: list[EnvelopePlan]
	resulting_structure: dict[str, tuple[str, ...]]
	warnings: list[str] = field(default_factory=list)

	@property
	def score(self) -> Score:
		return Score(
			sum(plan.score.jobs for plan in self.envelopes),
			sum(plan.score.links for plan in self.envelopes),
			max((plan.score.clique for plan in self.envelopes), default=0),
		)

	@property
	def actions(self) -> list[Action]:
		return [action for plan in self.envelopes for action in plan.actions]

	def replay(self, graph: EbnGraph) -> EbnGraph:
		"""Applies the actions to a structural copy of the graph, checking acyclicity at every step."""

		replayed = graph.copy()
		for action in self.actions:
			if action.kind == "reverse":
				_reverse(replayed.digraph, action.source, action.target)
			else:
				replayed.remove_node(action.source)
			if not nx.is_directed_acyclic_graph(replayed.digraph):
				throw(f"Replaying {action} leaves a cycle.", CycleError)

		return replayed

	def as_dict(self) -> dict:
		return {
			"envelopes": [plan.as_dict() for plan in self.envelopes],
			"score": self.score._asdict(),
			"warnings": self.warnings,
		}


def eliminate_continuous(
	graph: EbnGraph,
	policy: Policy = "enumerate-best",
	order: Sequence[tuple[str, str]] = (),
	settings: Settings | None = None,
) -> EliminationPlan:
	"""Plans the removal of every continuous node, one Markov envelope at a time.

	`enumerate-best` searches every legal reversal order of an envelope with at most
	`settings.enumerate_budget` initial reversals and keeps the lowest score, ties going to the
	lexicographically smallest action list; larger envelopes fall back to `greedy`, which reverses
	the arc into the child with the fewest parents first. `explicit` applies `order` and finishes
	greedily.
	"""

	if policy not in POLICIES:
		throw(f"Unknown ordering policy {policy!r}.")

	settings = settings or Settings()
	g = graph.digraph.copy()
	plans = []
	warnings = []

	for envelope in markov_envelopes(graph).envelopes:
		children, conditioning = envelope_scope(graph, envelope)
		jobs = envelope_job_count(graph, envelope)
		members = set(envelope.continuous_members)
		score_of = partial(_score, children=children, jobs=jobs)
		used = policy

		if policy == "enumerate-best":
			arcs = sum(g.out_degree(x) for x in members)
			if arcs <= settings.enumerate_budget:
				g, actions = _enumerate(g, members, graph.order_of, score_of)
			else:
				message = f"envelope of {', '.join(envelope.continuous_members)} has {arcs} reversals; using greedy order"
				logger.warning(message)
				warnings.append(message)
				used = "greedy"
				actions = _greedy(g, members, graph.order_of)
		elif policy == "explicit":
			actions = []
			for x, y in order:
				if x in members:
					_reverse(g, x, y)
					actions.append(Action("reverse", x, y))
			actions += _greedy(g, members, graph.order_of)
		else:
			actions = _greedy(g, members, graph.order_of)

		parents = {label: tuple(graph.sort(g.predecessors(label))) for label in children}
		plans.append(
			EnvelopePlan(envelope, tuple(children), tuple(conditioning), actions, parents, score_of(g), used)
		)

	structure = {label: tuple(graph.discrete_parents(label)) for label in graph.discrete_labels()}
	for plan in plans:
		structure.update(plan.parents)

	return EliminationPlan(plans, structure, warnings)


def _score(g: nx.DiGraph, children: list[str], jobs: int) -> Score:
	links = sum(g.in_degree(label) for label in children)
	clique = max((g.in_degree(label) + 1 for label in children), default=0)
	return Score(jobs, links, clique)


def _remove_childless(g: nx.DiGraph, remaining: set[str], order_of: Callable) -> list[Action]:
	actions = []
	while childless := sorted((x for x in remaining if not g.out_degree(x)), key=order_of):
		for x in childless:
			g.remove_node(x)
			remaining.discard(x)
			actions.append(Action("remove", x))
	return actions


def _reversible(g: nx.DiGraph, remaining: set[str], order_of: Callable) -> list[tuple[str, str]]:
	candidates = []
	for x in sorted(remaining, key=order_of):
		for y in sorted(g.successors(x), key=order_of):
			g.remove_edge(x, y)
			if not nx.has_path(g, x, y):
				candidates.append((x, y))
			g.add_edge(x, y)
	return candidates


def _greedy(g: nx.DiGraph, members: set[str], order_of: Callable) -> list[Action]:
	remaining = set(members)
	actions = _remove_childless(g, remaining, order_of)
	while remaining:
		x, y = min(
			_reversible(g, remaining, order_of),
			key=lambda arc: (g.in_degree(arc[1]), order_of(arc[1]), order_of(arc[0])),
		)
		_reverse(g, x, y)
		actions.append(Action("reverse", x, y))
		actions += _remove_childless(g, remaining, order_of)
	return actions


def _enumerate(
	g: nx.DiGraph, members: set[str], order_of: Callable, score_of: Callable
) -> tuple[nx.DiGraph, list[Action]]:
	best: tuple | None = None

	def visit(h: nx.DiGraph, remaining: set[str], actions: tuple[Action, ...]) -> None:
		nonlocal best
		remaining = set(remaining)
		actions = actions + tuple(_remove_childless(h, remaining, order_of))
		if not remaining:
			key = (score_of(h), actions)
			if best is None or key < best[0]:
				best = (key, h)
			return

		for x, y in _reversible(h, remaining, order_of):
			branch = h.copy()
			_reverse(branch, x, y)
			visit(branch, remaining, actions + (Action("reverse", x, y),))

	visit(g.copy(), members, ())
	(_, actions), final = best
	return final, list(actions)


@dataclass(frozen=True)
class DiscretizationScheme:
	"""Interval boundaries of a discretized node and the model of the continuous remainder."""

	boundaries: tuple[float, ...]
	interior: Literal["truncated", "uniform"] = "truncated"
	tails: tuple[float, float] | None = None
	topology: Literal["shared", "per_child"] = "shared"
	label: str | None = None

	def __post_init__(self) -> None:
		object.__setattr__(self, "boundaries", tuple(float(b) for b in self.boundaries))
		if not self.boundaries:
			throw("A discretization needs at least one boundary.")
		if not all(math.isfinite(b) for b in self.boundaries) or not is_strictly_increasing(self.boundaries):
			throw("Discretization boundaries must be finite and strictly increasing.")
		if self.interior not in ("truncated", "uniform"):
			throw(f"Unknown interior model {self.interior!r}.")
		if self.topology not in ("shared", "per_child"):
			throw(f"Unknown discretization topology {self.topology!r}.")
		if self.tails is not None and (len(self.tails) != 2 or min(self.tails) <= 0):
			throw("Tail decay rates must be two positive numbers.")

	@property
	def n_states(self) -> int:
		return len(self.boundaries) + 1

	def intervals(self) -> list[tuple[float, float]]:
		edges = (-math.inf, *self.boundaries, math.inf)
		return list(zip(edges[:-1], edges[1:], strict=False))


def discretize_node(graph: EbnGraph, x: str, scheme: DiscretizationScheme) -> EbnGraph:
	"""Replaces a scalar continuous node by a discrete interval node and a continuous remainder.

	The discrete node inherits the parents of `x`. With a truncated interior the remainder keeps the
	parents of `x` besides the interval node, which is exact; with a uniform interior it depends on the
	interval node alone and uses exponential tails on unbounded outer intervals. A deterministic node
	keeps its definition and gains a discrete node whose states are threshold domains on its value.
	"""

	node = graph.continuous(x)
	if len(node.components) != 1:
		throw(f"Only scalar continuous nodes can be discretized; {x} has {len(node.components)} components.")

	label = scheme.label or f"{x}_d"
	states = tuple(f"i{k}" for k in range(scheme.n_states))
	parents = graph.parents(x)

	if node.is_deterministic():
		local = {
			key: PartitionModel(ThresholdPartition(specs[0].params[0], scheme.boundaries))
			for key, specs in node.marginals.items()
		}
		result = graph.copy()
		result.add_node(DiscreteNode(label, states, kind="domain", local=local))
		for parent in parents:
			result.add_edge(parent, label)
		return result

	interval_node = _interval_node(graph, node, label, states, scheme)
	component = node.components[0]
	children = graph.children(x)

	result = graph.copy()
	result.remove_node(x)
	result.add_node(interval_node)
	for parent in parents:
		result.add_edge(parent, label)

	if scheme.interior == "truncated":
		marginals = _truncated_remainder(graph, node, scheme)
		remainder_parents = [*parents, label]
	else:
		marginals = _uniform_remainder(graph, node, scheme)
		remainder_parents = [label]

	if scheme.topology == "shared":
		copies = [(f"{x}_c", component, children)]
	else:
		copies = [(f"{x}_c_{child}", f"{component}_{child}", [child]) for child in children]

	for copy_label, copy_component, copy_children in copies:
		result.add_node(ContinuousNode(copy_label, (copy_component,), marginals))
		for parent in remainder_parents:
			result.add_edge(parent, copy_label)
		for child in copy_children:
			if copy_component != component:
				result.set_node(_rename_component(result.node(child), component, copy_component))
			result.add_edge(copy_label, child)

	return result


def _interval_node(
	graph: EbnGraph, node: ContinuousNode, label: str, states: tuple[str, ...], scheme: DiscretizationScheme
) -> DiscreteNode:
	"""Interval probabilities: a table when the parents are discrete, probability expressions otherwise."""

	if not graph.continuous_parents(node.label):
		shape = tuple(graph.discrete(p).n_states for p in graph.discrete_parents(node.label))
		table = np.zeros((*shape, scheme.n_states))
		for config in graph.parent_configs(node.label):
			marginal = node.marginal_specs(config)[0].bind(graph.parent_codes(node.label, config))
			cumulative = np.concatenate([[0.0], np.atleast_1d(marginal.cdf(np.array(scheme.boundaries))), [1.0]])
			probabilities = np.diff(cumulative)
			if np.any(probabilities <= 0):
				throw(
					f"Interval of {node.label} has zero probability for parent configuration {config}.",
					DistributionError,
				)
			table[config] = probabilities
		return DiscreteNode(label, states, cpt=table)

	local = {}
	for key, specs in node.marginals.items():
		exprs: list[Expr | None] = [
			specs[0].cdf_expr(Num(hi)) - specs[0].cdf_expr(Num(lo)) for lo, hi in scheme.intervals()[:-1]
		]
		local[key] = PmfModel((*exprs, None))
	return DiscreteNode(label, states, kind="pmf", local=local)


def _truncated_remainder(
	graph: EbnGraph, node: ContinuousNode, scheme: DiscretizationScheme
) -> dict[Config, tuple[MarginalSpec, ...]]:
	marginals = {}
	for config in graph.parent_configs(node.label):
		spec = node.marginal_specs(config)[0]
		for k, (lo, hi) in enumerate(scheme.intervals()):
			marginals[(*config, k)] = (MarginalSpec("truncated", (Num(lo), Num(hi)), base=spec),)
	return marginals


def _uniform_remainder(
	graph: EbnGraph, node: ContinuousNode, scheme: DiscretizationScheme
) -> dict[Config, tuple[MarginalSpec, ...]]:
	"""Uniform segments inside and exponential tails outside, one marginal per interval.

	The remainder has the interval node as its only parent, so one tail rate serves every parent
	configuration of `node`; the default is 1/σ of its widest marginal.
	"""

	lo_support, hi_support, std = _support(graph, node)
	if scheme.tails is not None:
		rate_lo, rate_hi = scheme.tails
	elif std is not None:
		rate_lo = rate_hi = 1.0 / std
	else:
		throw(f"Tail decay rates are needed for {node.label}, whose distribution depends on continuous parents.")

	intervals = scheme.intervals()
	marginals = {}
	for k, (lo, hi) in enumerate(intervals):
		lo, hi = max(lo, lo_support), min(hi, hi_support)
		if lo >= hi:
			throw(f"Interval {k} of {node.label} lies outside the support.", DistributionError)

		if math.isinf(lo):
			spec = MarginalSpec.of("neg_exp_tail", hi, rate_lo)
		elif math.isinf(hi):
			spec = MarginalSpec.of("exp_tail", lo, rate_hi)
		else:
			spec = MarginalSpec.of("uniform_segment", lo, hi)
		marginals[(k,)] = (spec,)
	return marginals


def _support(graph: EbnGraph, node: ContinuousNode) -> tuple[float, float, float | None]:
	"""Support over all parent configurations, and the largest standard deviation when it is defined."""

	if graph.continuous_parents(node.label):
		family = next(iter(node.marginals.values()))[0].family
		support = UNBOUNDED_SUPPORT.get(family) or POSITIVE_SUPPORT.get(family)
		if support is None:
			throw(f"The support of {node.label} depends on its continuous parents.", DistributionError)
		return *support, None

	lows, highs, stds = [], [], []
	for config in graph.parent_configs(node.label):
		marginal = node.marginal_specs(config)[0].bind(graph.parent_codes(node.label, config))
		lo, hi = marginal.support()
		lows.append(lo)
		highs.append(hi)
		if marginal.family != "truncated":
			stds.append(float(marginal.std()))

	return min(lows), max(highs), max(stds) if stds else None


def _rename_component(node, old: str, new: str):
	mapping = {old: new}
	if isinstance(node, ContinuousNode):
		marginals = {key: tuple(spec.substitute(mapping) for spec in specs) for key, specs in node.marginals.items()}
		return ContinuousNode(node.label, node.components, marginals, node.correlation)

	local = {key: model.substitute(mapping) for key, model in node.local.items()}
	return DiscreteNode(node.label, node.states, node.kind, node.numeric, node.cpt, local)


@dataclass(frozen=True)
class EvidenceNodeSpec:
	"""Observation of continuous nodes: explicit state domains, or an equality h(x) = 0 widened to [0, delta]."""

	label: str
	targets: tuple[str, ...]
	domains: tuple[DomainSpec | None, ...] = ()
	observe: Expr | None = None
	delta: float | None = None
	states: tuple[str, ...] | None = None

	def __post_init__(self) -> None:
		if bool(self.domains) == (self.observe is not None):
			throw("An evidence node needs either state domains or an observed expression.")
		if self.domains and len(self.domains) < 2:
			throw("An evidence node needs at least two state domains.")
		if self.delta is not None and not self.delta > 0:
			throw("The observation width delta must be positive.")
		if self.states is not None and len(self.states) != self.n_states:
			throw("Evidence state labels must match the domains.")

	@property
	def n_states(self) -> int:
		return len(self.domains) if self.domains else 2


def add_evidence_node(graph: EbnGraph, spec: EvidenceNodeSpec, settings: Settings | None = None) -> EbnGraph:
	"""Adds a domain node below the target continuous nodes; its states are the observation outcomes."""

	from ebn_srm.core.oracle.oracle import sample_forward

	settings = settings or Settings()
	scope = set()
	for target in spec.targets:
		if not graph.is_continuous(target):
			throw(f"Evidence node target {target} is not a continuous node.")
		scope |= set(graph.continuous(target).components)

	if spec.observe is not None:
		delta = spec.delta or _default_delta(graph, spec.observe, settings)
		domains = (DomainSpec.parallel([-spec.observe, spec.observe - delta]), None)
		states = spec.states or ("observed", "other")
	else:
		domains = spec.domains
		states = spec.states or tuple(f"e{k}" for k in range(len(domains)))

	model = DomainModel(domains)
	if unknown := model.variables() - scope:
		throw(f"Evidence domains reference {', '.join(sorted(unknown))} outside the targets' components.")

	if not model.has_complement:
		draws = sample_forward(graph, settings.delta_prior_samples, seed=settings.seed, strict=False)
		counts = model.membership(draws.values).sum(axis=1)
		if np.any(counts != 1):
			throw(f"Evidence domains of {spec.label} are not mutually exclusive and exhaustive.")

	result = graph.copy()
	result.add_node(DiscreteNode(spec.label, states, kind="domain", local={None: model}))
	for target in spec.targets:
		result.add_edge(target, spec.label)
	return result


def _default_delta(graph: EbnGraph, observe: Expr, settings: Settings) -> float:
	"""A fraction of the prior standard deviation of the observed expression."""

	from ebn_srm.core.oracle.oracle import sample_forward

	try:
		draws = sample_forward(graph, settings.delta_prior_samples, seed=settings.seed, strict=False)
		values = np.asarray(observe.evaluate(draws.values), dtype=float)
	except EbnError as e:
		throw(f"Cannot sample the observed expression: {e}")

	std = float(np.nanstd(values))
	if not std > 0:
		throw("The observed expression has no prior spread; give delta explicitly.", ValidationError)
	return settings.delta_fraction * std
