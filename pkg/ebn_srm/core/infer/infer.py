import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import reduce
from operator import mul
from typing import Literal

import networkx as nx
import numpy as np

from ebn_srm.config import Settings
from ebn_srm.core.compiler.compiler import Potential, RbnModel
from ebn_srm.exceptions import DoesNotExistError, MemoryBoundError, ValidationError
from ebn_srm.utils import get_logger, throw

logger = get_logger("infer")

Heuristic = Literal["min-fill", "min-degree", "order"]
HEURISTICS = ("min-fill", "min-degree", "order")

Evidence = Mapping[str, str]


@dataclass
class EliminationStats:
	order: list[str] = field(default_factory=list)
	max_entries: int = 0
	max_scope: tuple[str, ...] = ()

	def update(self, scope: Sequence[str], entries: int) -> None:
		if entries > self.max_entries:
			self.max_entries = entries
			self.max_scope = tuple(scope)


@dataclass
class PosteriorResult:
	"""Posterior marginals of the targets (and their joint for joint queries) given the evidence."""

	targets: tuple[str, ...]
	evidence: dict[str, str]
	marginals: dict[str, np.ndarray] = field(default_factory=dict)
	joint: Potential | None = None
	evidence_probability: float = 1.0
	log_evidence: float = 0.0
	stats: EliminationStats = field(default_factory=EliminationStats)
	message: str = ""

	@property
	def ok(self) -> bool:
		return not self.message

	def as_dict(self, model: RbnModel) -> dict:
		report = {
			"targets": list(self.targets),
			"evidence": self.evidence,
			"evidence_probability": self.evidence_probability,
			"log_evidence": self.log_evidence,
			"posteriors": {
				label: dict(zip(model.node(label).states, map(float, table), strict=True))
				for label, table in self.marginals.items()
			},
			"stats": {
				"order": self.stats.order,
				"max_entries": self.stats.max_entries,
				"max_scope": list(self.stats.max_scope),
			},
		}
		if self.joint is not None:
			report["joint"] = {"scope": list(self.joint.scope), "table": self.joint.flat().tolist()}
		if self.message:
			report["error"] = self.message
		return report


def check_evidence(model: RbnModel, evidence: Evidence | None) -> dict[str, int]:
	"""Maps evidence state labels to indices; unknown nodes or states raise."""

	return {label: model.node(label).state_index(state) for label, state in (evidence or {}).items()}


def relevant_nodes(model: RbnModel, labels: Iterable[str]) -> list[str]:
	"""The labels and their ancestors; every other node is barren for the query."""

	keep = set(labels)
	for label in list(keep):
		keep |= nx.ancestors(model.digraph, label)
	return [label for label in model.labels if label in keep]


def _interaction_graph(scopes: Iterable[Sequence[str]]) -> nx.Graph:
	g = nx.Graph()
	for scope in scopes:
		g.add_nodes_from(scope)
		g.add_edges_from((a, b) for i, a in enumerate(scope) for b in scope[i + 1 :])
	return g


def _fill_in(g: nx.Graph, v: str) -> int:
	neighbors = list(g.neighbors(v))
	return sum(1 for i, a in enumerate(neighbors) for b in neighbors[i + 1 :] if not g.has_edge(a, b))


def plan_elimination(
	scopes: Sequence[Sequence[str]],
	eliminate: Iterable[str],
	cards: Mapping[str, int],
	order_of: Callable[[str], int],
	heuristic: Heuristic = "min-fill",
	order: Sequence[str] = (),
) -> EliminationStats:
	"""Chooses the elimination order symbolically and records the largest potential it creates.

	Variables are picked greedily by the heuristic, ties going to the earliest declared; with
	`order`, its variables go first and any left over follow by min-fill.
	"""

	if heuristic not in HEURISTICS:
		throw(f"Unknown elimination heuristic {heuristic!r}.")

	remaining = set(eliminate)
	given = [v for v in order if v in remaining]
	g = _interaction_graph(scopes)
	stats = EliminationStats()
	for scope in scopes:
		stats.update(scope, math.prod(cards[v] for v in scope))

	score = _fill_in if heuristic != "min-degree" else (lambda h, v: h.degree(v))
	while remaining:
		if given:
			v = given.pop(0)
		else:
			v = min(remaining, key=lambda u: (score(g, u), order_of(u)))
		neighbors = sorted(g.neighbors(v), key=order_of)
		scope = [v, *neighbors]
		stats.update(scope, math.prod(cards[u] for u in scope))
		g.add_edges_from((a, b) for i, a in enumerate(neighbors) for b in neighbors[i + 1 :])
		g.remove_node(v)
		remaining.discard(v)
		stats.order.append(v)

	return stats


def _components(factors: list[Potential]) -> list[list[Potential]]:
	"""Groups factors that share variables; scalar factors stand alone."""

	g = nx.Graph()
	for k, factor in enumerate(factors):
		g.add_node(("f", k))
		for v in factor.scope:
			g.add_edge(("f", k), ("v", v))

	groups = []
	for component in nx.connected_components(g):
		indices = sorted(k for kind, k in component if kind == "f")
		groups.append([factors[k] for k in indices])
	groups.sort(key=lambda group: min(factors.index(f) for f in group))
	return groups


def _eliminate(
	factors: list[Potential],
	keep: Sequence[str],
	model: RbnModel,
	heuristic: Heuristic,
	order: Sequence[str],
) -> tuple[Potential, float, EliminationStats]:
	"""Sums every variable but `keep` out of the product of factors; returns the scaled result and its log scale."""

	cards = {label: model.node(label).n_states for label in model.labels}
	variables = {v for f in factors for v in f.scope}
	stats = plan_elimination(
		[f.scope for f in factors], variables - set(keep), cards, model.order_of, heuristic, order
	)

	log_scale = 0.0
	factors = list(factors)
	for v in stats.order:
		related = [f for f in factors if v in f.scope]
		factors = [f for f in factors if v not in f.scope]
		summed = reduce(mul, related).sum_out([v])
		top = summed.table.max(initial=0.0)
		if top > 0:
			summed = Potential(summed.scope, summed.table / top)
			log_scale += math.log(top)
		factors.append(summed)

	result = reduce(mul, factors, Potential((), np.array(1.0)))
	return result.transpose([v for v in keep if v in result.scope]), log_scale, stats


def _posterior_joint(
	model: RbnModel, keep: Sequence[str], observed: dict[str, int], heuristic: Heuristic, order: Sequence[str]
) -> tuple[Potential | None, float, EliminationStats]:
	"""The unnormalized joint of `keep` with the evidence, as (table, log evidence, stats)."""

	factors = []
	for label in relevant_nodes(model, [*keep, *observed]):
		factor = model.node(label).potential()
		for observed_label, k in observed.items():
			factor = factor.restrict(observed_label, k)
		factors.append(factor)

	log_evidence = 0.0
	joint = Potential((), np.array(1.0))
	stats = EliminationStats()
	for group in _components(factors):
		scope = [v for v in keep if any(v in f.scope for f in group)]
		result, log_scale, group_stats = _eliminate(group, scope, model, heuristic, order)
		total = result.total()
		if not total > 0:
			return None, -math.inf, stats
		log_evidence += math.log(total) + log_scale
		if scope:
			joint = joint * Potential(result.scope, result.table / total)
		stats.order += group_stats.order
		if group_stats.max_entries > stats.max_entries:
			stats.max_entries, stats.max_scope = group_stats.max_entries, group_stats.max_scope

	return joint.transpose(keep), log_evidence, stats


def evidence_probability(log_evidence: float) -> float:
	"""P(evidence) from its log, kept in (0, 1]; an underflow gives the smallest positive float."""

	p = math.exp(log_evidence)
	if p == 0.0:
		logger.warning("P(evidence) = exp(%.6g) underflows; use log_evidence", log_evidence)
		return math.ulp(0.0)
	return min(p, 1.0)


def _zero(targets: tuple[str, ...], evidence: Evidence, stats: EliminationStats) -> PosteriorResult:
	message = "evidence has zero probability under the model"
	logger.warning("%s: %s", message, dict(evidence))
	return PosteriorResult(targets, dict(evidence), evidence_probability=0.0, log_evidence=-math.inf, stats=stats, message=message)


def query(
	model: RbnModel,
	targets: Iterable[str],
	evidence: Evidence | None = None,
	heuristic: Heuristic = "min-fill",
	order: Sequence[str] = (),
) -> PosteriorResult:
	"""Posterior marginal of each target given the evidence, by variable elimination."""

	targets = tuple(targets)
	if not targets:
		throw("A query needs at least one target.")
	for label in targets:
		model.node(label)
	evidence = dict(evidence or {})
	observed = check_evidence(model, evidence)

	marginals = {}
	log_evidence = None
	stats = EliminationStats()
	for label in targets:
		if label in observed:
			marginals[label] = np.eye(model.node(label).n_states)[observed[label]]
			continue
		joint, log_p, run = _posterior_joint(model, [label], observed, heuristic, order)
		if joint is None:
			return _zero(targets, evidence, run)
		marginals[label] = joint.table
		log_evidence = log_p if log_evidence is None else log_evidence
		if run.max_entries > stats.max_entries or not stats.order:
			stats = run

	if log_evidence is None:
		_, log_evidence, _ = _posterior_joint(model, [], observed, heuristic, order)
		if log_evidence == -math.inf:
			return _zero(targets, evidence, stats)

	return PosteriorResult(
		targets, evidence, marginals, None, evidence_probability(log_evidence), log_evidence, stats
	)


def joint_query(
	model: RbnModel,
	scope: Sequence[str],
	evidence: Evidence | None = None,
	heuristic: Heuristic = "min-fill",
	order: Sequence[str] = (),
	settings: Settings | None = None,
) -> PosteriorResult:
	"""Posterior joint over an ordered scope, with its marginals."""

	settings = settings or Settings()
	scope = tuple(scope)
	if not scope or len(set(scope)) != len(scope):
		throw("A joint query needs distinct target nodes.")
	evidence = dict(evidence or {})
	observed = check_evidence(model, evidence)
	if overlap := set(scope) & set(observed):
		throw(f"Joint query nodes {sorted(overlap)} are observed.", ValidationError)

	entries = math.prod(model.node(label).n_states for label in scope)
	if entries > settings.max_joint_entries:
		throw(
			f"The joint over {len(scope)} nodes has {entries} entries; the bound is {settings.max_joint_entries}.",
			MemoryBoundError,
		)

	joint, log_evidence, stats = _posterior_joint(model, scope, observed, heuristic, order)
	if joint is None:
		return _zero(scope, evidence, stats)

	marginals = {label: joint.sum_out([v for v in scope if v != label]).table for label in scope}
	return PosteriorResult(scope, evidence, marginals, joint, evidence_probability(log_evidence), log_evidence, stats)


@dataclass
class ModelStats:
	max_entries: int
	max_scope: tuple[str, ...]
	total_entries: int
	parents: dict[str, int]
	order: list[str]

	def as_dict(self) -> dict:
		return {
			"max_entries": self.max_entries,
			"max_scope": list(self.max_scope),
			"total_entries": self.total_entries,
			"parents": self.parents,
			"order": self.order,
		}


def model_stats(model: RbnModel, heuristic: Heuristic = "min-fill", order: Sequence[str] = ()) -> ModelStats:
	"""Sizes that bound inference cost: the largest potential met when eliminating every node."""

	if not model.labels:
		raise DoesNotExistError("The model has no nodes.")

	cards = {label: node.n_states for label, node in model.nodes.items()}
	scopes = [(*node.parents, label) for label, node in model.nodes.items()]
	stats = plan_elimination(scopes, model.labels, cards, model.order_of, heuristic, order)
	return ModelStats(
		stats.max_entries,
		stats.max_scope,
		model.total_entries,
		{label: len(node.parents) for label, node in model.nodes.items()},
		stats.order,
	)
