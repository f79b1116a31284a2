import itertools
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Literal, NamedTuple

import networkx as nx
import numpy as np

from ebn_srm.config import Settings
from ebn_srm.core.dist.dist import JointChain
from ebn_srm.core.lsf.lsf import intersect_all
from ebn_srm.core.model.model import EbnGraph, PmfModel, topological_order
from ebn_srm.core.reduce.reduce import EliminationPlan, EnvelopePlan, eliminate_continuous
from ebn_srm.core.srm.backends import MonteCarloBackend, ReliabilityBackend
from ebn_srm.core.srm.srm import ReliabilityProblem, reduce_total_probability
from ebn_srm.exceptions import CompilationAbortError, CycleError, DoesNotExistError, EbnError, ValidationError
from ebn_srm.utils import executor_context, get_logger, job_seed, log_error, run_ordered, throw

logger = get_logger("compiler")

NEGATIVE_ABORT = -1e-3
RENORMALIZE_LOG = 1e-9
SLICE_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class Potential:
	"""A non-negative table over discrete variables; axes follow `scope`."""

	scope: tuple[str, ...]
	table: np.ndarray

	def __post_init__(self) -> None:
		table = np.asarray(self.table, dtype=float)
		if table.ndim != len(self.scope):
			throw(f"Table has {table.ndim} axes for scope {self.scope}.")
		if len(set(self.scope)) != len(self.scope):
			throw(f"Scope {self.scope} repeats a variable.")
		object.__setattr__(self, "scope", tuple(self.scope))
		object.__setattr__(self, "table", table)

	@property
	def cards(self) -> tuple[int, ...]:
		return self.table.shape

	@property
	def size(self) -> int:
		return self.table.size

	def flat(self) -> np.ndarray:
		"""Entries in mixed-radix order, first scope variable most significant."""

		return self.table.ravel()

	def aligned(self, scope: Sequence[str]) -> np.ndarray:
		"""The table arranged to broadcast against `scope`, which must contain this scope."""

		order = [self.scope.index(v) for v in scope if v in self.scope]
		shape = [self.table.shape[self.scope.index(v)] if v in self.scope else 1 for v in scope]
		return np.transpose(self.table, order).reshape(shape)

	def __mul__(self, other: "Potential") -> "Potential":
		scope = self.scope + tuple(v for v in other.scope if v not in self.scope)
		return Potential(scope, self.aligned(scope) * other.aligned(scope))

	def sum_out(self, labels: Iterable[str]) -> "Potential":
		labels = set(labels) & set(self.scope)
		axes = tuple(self.scope.index(v) for v in labels)
		return Potential(tuple(v for v in self.scope if v not in labels), self.table.sum(axis=axes))

	def restrict(self, label: str, k: int) -> "Potential":
		if label not in self.scope:
			return self
		axis = self.scope.index(label)
		return Potential(self.scope[:axis] + self.scope[axis + 1 :], np.take(self.table, k, axis=axis))

	def transpose(self, scope: Sequence[str]) -> "Potential":
		return Potential(tuple(scope), np.transpose(self.table, [self.scope.index(v) for v in scope]))

	def total(self) -> float:
		return float(self.table.sum())


@dataclass(frozen=True, eq=False)
class RbnNode:
	label: str
	states: tuple[str, ...]
	parents: tuple[str, ...]
	table: np.ndarray

	def __post_init__(self) -> None:
		object.__setattr__(self, "table", np.asarray(self.table, dtype=float))

	@property
	def n_states(self) -> int:
		return len(self.states)

	def potential(self) -> Potential:
		return Potential((*self.parents, self.label), self.table)

	def state_index(self, state: str) -> int:
		try:
			return self.states.index(state)
		except ValueError:
			throw(f"Node {self.label} has no state {state!r}.", DoesNotExistError)


@dataclass(eq=False)
class RbnModel:
	"""A discrete Bayesian network; each table is indexed by its parents then its own state."""

	nodes: dict[str, RbnNode]
	provenance: list[dict] = field(default_factory=list)

	def __post_init__(self) -> None:
		self.validate()

	def validate(self) -> None:
		for node in self.nodes.values():
			for parent in node.parents:
				if parent not in self.nodes:
					throw(f"Node {node.label} has unknown parent {parent}.", DoesNotExistError)
			expected = (*(self.nodes[p].n_states for p in node.parents), node.n_states)
			if node.table.shape != expected:
				throw(f"Table of {node.label} has shape {node.table.shape}; expected {expected}.")
			if np.any(node.table < 0) or not np.all(np.isfinite(node.table)):
				throw(f"Table of {node.label} has negative or non-finite entries.")
			error = np.abs(node.table.sum(axis=-1) - 1.0).max(initial=0.0)
			if error > SLICE_TOLERANCE:
				throw(f"Table of {node.label} has a slice summing to 1 {error:+.3g}.")

		if not nx.is_directed_acyclic_graph(self.digraph):
			throw("Network contains a cycle.", CycleError)

	@property
	def labels(self) -> list[str]:
		return list(self.nodes)

	@cached_property
	def digraph(self) -> nx.DiGraph:
		g = nx.DiGraph()
		g.add_nodes_from(self.nodes)
		g.add_edges_from((p, node.label) for node in self.nodes.values() for p in node.parents)
		return g

	def node(self, label: str) -> RbnNode:
		if label not in self.nodes:
			throw(f"Node {label} not found.", DoesNotExistError)
		return self.nodes[label]

	def order_of(self, label: str) -> int:
		return self.labels.index(label)

	def potentials(self) -> list[Potential]:
		return [node.potential() for node in self.nodes.values()]

	@property
	def structure(self) -> dict[str, tuple[str, ...]]:
		return {label: node.parents for label, node in self.nodes.items()}

	@property
	def total_entries(self) -> int:
		return sum(node.table.size for node in self.nodes.values())


class SrmJob(NamedTuple):
	"""One reliability problem; `cell` holds the state indices it conditions on and asks for."""

	index: tuple[int, int, int]
	cell: dict[str, int]
	problem: ReliabilityProblem

	def key(self) -> tuple:
		return self.problem.canonical_key()


@dataclass
class EnvelopeJobs:
	"""The reliability workload of one Markov envelope, children in chain order."""

	index: int
	plan: EnvelopePlan
	members: tuple[str, ...]
	children: tuple[str, ...]
	conditioning: tuple[str, ...]
	child_cards: tuple[int, ...]
	conditioning_cards: tuple[int, ...]
	scheme: Literal["chain", "flat"]

	@property
	def n_conditions(self) -> int:
		return math.prod(self.conditioning_cards)

	@property
	def cells(self) -> int:
		return self.n_conditions * math.prod(self.child_cards)

	@property
	def srm_jobs(self) -> int:
		return self.n_conditions * (math.prod(self.child_cards) - 1)

	@property
	def top_jobs(self) -> int:
		if self.scheme == "flat":
			return self.srm_jobs
		return self.n_conditions * math.prod(self.child_cards[:-1]) * (self.child_cards[-1] - 1)

	@property
	def kind(self) -> Literal["component", "system"]:
		return "component" if len(self.children) == 1 else "system"

	@property
	def levels(self) -> list[int]:
		if self.scheme == "flat":
			return [len(self.children)]
		return list(range(1, len(self.children) + 1))

	def level_cells(self, level: int) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
		"""(conditioning states, child states) of every job of a level, in job order."""

		conditions = list(itertools.product(*(range(c) for c in self.conditioning_cards)))
		if self.scheme == "flat":
			states = list(itertools.product(*(range(c) for c in self.child_cards)))[:-1]
			return [(s, c) for s in conditions for c in states]

		prefixes = list(itertools.product(*(range(c) for c in self.child_cards[: level - 1])))
		tails = range(self.child_cards[level - 1] - 1)
		return [(s, (*prefix, k)) for s in conditions for prefix in prefixes for k in tails]

	def as_dict(self) -> dict:
		return {
			"continuous": list(self.members),
			"discrete": list(self.plan.envelope.discrete_members),
			"children": list(self.children),
			"conditioning": list(self.conditioning),
			"scheme": self.scheme,
			"kind": self.kind,
			"cells": self.cells,
			"srm_jobs": self.srm_jobs,
			"top_jobs": self.top_jobs,
			"top_jobs_per_condition": self.top_jobs // self.n_conditions,
		}


def envelope_jobs(graph: EbnGraph, plan: EliminationPlan, settings: Settings | None = None) -> list[EnvelopeJobs]:
	"""Lays out the reliability workload of every envelope in the plan."""

	settings = settings or Settings()
	order = topological_order(graph)
	contexts = []
	for index, envelope_plan in enumerate(plan.envelopes):
		envelope = envelope_plan.envelope
		size = len(envelope.discrete_members)
		if size > settings.envelope_max and not settings.allow_large_envelopes:
			throw(
				f"Envelope of {', '.join(envelope.continuous_members)} has {size} discrete members; "
				f"the limit is {settings.envelope_max}."
			)

		children = _chain_order(graph, envelope_plan)
		members = tuple(label for label in order if label in set(envelope.continuous_members))
		flat = any(p in children for x in members for p in graph.discrete_parents(x))
		contexts.append(
			EnvelopeJobs(
				index,
				envelope_plan,
				members,
				children,
				envelope_plan.conditioning,
				tuple(graph.discrete(label).n_states for label in children),
				tuple(graph.discrete(label).n_states for label in envelope_plan.conditioning),
				"flat" if flat else "chain",
			)
		)

	return contexts


def _chain_order(graph: EbnGraph, plan: EnvelopePlan) -> tuple[str, ...]:
	children = set(plan.children)
	g = nx.DiGraph()
	g.add_nodes_from(children)
	g.add_edges_from((p, c) for c in children for p in plan.parents[c] if p in children)
	return tuple(nx.lexicographical_topological_sort(g, key=graph.order_of))


def _build_problem(graph: EbnGraph, ctx: EnvelopeJobs, assignment: Mapping[str, int], asked: Sequence[str]):
	codes = {label: graph.discrete(label).codes[k] for label, k in assignment.items()}

	needed: set[str] = set()
	stack = [p for label in asked for p in graph.continuous_parents(label)]
	while stack:
		x = stack.pop()
		if x not in needed:
			needed.add(x)
			stack += graph.continuous_parents(x)

	blocks = tuple(
		graph.continuous(x).block(_config(graph, x, assignment)) for x in ctx.members if x in needed
	)

	domains, pmfs = [], []
	for label in asked:
		model = graph.discrete(label).local_model(_config(graph, label, assignment))
		if isinstance(model, PmfModel):
			pmfs.append(model.probability_expr(assignment[label]))
		else:
			domains.append(model.state_domain(assignment[label]))

	prob = ReliabilityProblem(JointChain(blocks), intersect_all(domains) if domains else None, codes)
	for expr in pmfs:
		prob = reduce_total_probability(expr, prob)
	return prob


def _config(graph: EbnGraph, label: str, assignment: Mapping[str, int]) -> tuple[int, ...]:
	return tuple(assignment[p] for p in graph.discrete_parents(label))


def level_jobs(graph: EbnGraph, ctx: EnvelopeJobs, level: int, cells=None) -> list[SrmJob]:
	"""Jobs of one level; `cells` restricts them to a subset of `ctx.level_cells(level)` positions."""

	layout = ctx.level_cells(level)
	positions = range(len(layout)) if cells is None else cells
	asked = ctx.children[:level]
	jobs = []
	for position in positions:
		s, c = layout[position]
		assignment = dict(zip(ctx.conditioning, s, strict=True)) | dict(zip(asked, c, strict=True))
		jobs.append(SrmJob((ctx.index, level, position), assignment, _build_problem(graph, ctx, assignment, asked)))
	return jobs


def enumerate_jobs(graph: EbnGraph, plan: EliminationPlan, settings: Settings | None = None) -> list[SrmJob]:
	"""Every reliability job the plan needs, envelope by envelope and level by level."""

	return [
		job
		for ctx in envelope_jobs(graph, plan, settings)
		for level in ctx.levels
		for job in level_jobs(graph, ctx, level)
	]


def job_report(graph: EbnGraph, plan: EliminationPlan, settings: Settings | None = None) -> dict:
	"""Closed-form job counts per envelope with the number of distinct problems after renaming."""

	envelopes = []
	keys = set()
	for ctx in envelope_jobs(graph, plan, settings):
		own = {job.key() for level in ctx.levels for job in level_jobs(graph, ctx, level)}
		keys |= own
		envelopes.append(ctx.as_dict() | {"unique_jobs": len(own)})

	return {
		"envelopes": envelopes,
		"cells": sum(e["cells"] for e in envelopes),
		"srm_jobs": sum(e["srm_jobs"] for e in envelopes),
		"top_jobs": sum(e["top_jobs"] for e in envelopes),
		"unique_jobs": len(keys),
	}


def compute_joint(job: SrmJob, backend: ReliabilityBackend, seed: int = 0) -> tuple[float, dict]:
	"""Solves one job, retrying with Monte Carlo when another backend raises.

	A job that fails under Monte Carlo too comes back as nan with both errors in the provenance.
	"""

	job_key = job_seed(seed, *job.index)
	try:
		return backend.solve(job.problem, job_key)
	except EbnError as e:
		first = e
		log_error("Reliability job failed", f"{job.index}: {e}", module="compiler")

	failed_with = backend.backend_for(job.problem)
	if isinstance(failed_with, MonteCarloBackend):
		return math.nan, {"backend": "failed", "error": str(first)}

	try:
		p, provenance = backend.solve(job.problem, job_key, using=MonteCarloBackend(backend.settings))
	except EbnError as e:
		log_error("Monte Carlo retry failed", f"{job.index}: {e}", module="compiler")
		return math.nan, {"backend": "failed", "error": f"{failed_with.name}: {first}; mc: {e}"}

	return p, provenance | {"fallback_from": failed_with.name, "error": str(first)}


class _Solver:
	"""Runs jobs once per canonical problem across the whole compilation."""

	def __init__(self, backend: ReliabilityBackend, seed: int, executor) -> None:
		self.backend = backend
		self.seed = seed
		self.executor = executor
		self.cache: dict[tuple, tuple[float, dict, tuple]] = {}

	def solve(self, jobs: list[SrmJob]) -> list[tuple[float, dict, tuple]]:
		keys = [job.key() for job in jobs]
		pending: dict[tuple, SrmJob] = {}
		for job, key in zip(jobs, keys, strict=True):
			if key not in self.cache and key not in pending:
				pending[key] = job

		results = run_ordered(self.executor, lambda job: compute_joint(job, self.backend, self.seed), list(pending.values()))
		for (key, job), (p, provenance) in zip(pending.items(), results, strict=True):
			self.cache[key] = (p, provenance, job.index)

		return [self.cache[key] for key in keys]


class Factors(NamedTuple):
	potentials: dict[str, Potential]
	flags: list[dict]


def factorize_joint(
	joint: Potential, structure: Mapping[str, Sequence[str]], conditioning: Sequence[str] = ()
) -> Factors:
	"""Splits a joint over children (given `conditioning`) into one conditional per child.

	Children are taken in scope order and each conditional is projected onto the child's
	parents in `structure`, reading it at the configuration with the largest denominator.
	Configurations whose denominator is zero get a uniform row and a flag.
	"""

	conditioning = tuple(conditioning)
	if missing := set(conditioning) - set(joint.scope):
		throw(f"Conditioning variables {sorted(missing)} are not in the joint.")

	children = tuple(v for v in joint.scope if v not in conditioning)
	table = joint.transpose(conditioning + children).table
	n_cond = len(conditioning)
	potentials = {}
	flags = []

	for t, child in enumerate(children):
		parents = tuple(structure[child])
		allowed = conditioning + children[:t]
		if extra := set(parents) - set(allowed):
			throw(f"Parents {sorted(extra)} of {child} are not earlier in the joint.")

		marginal = table.sum(axis=tuple(range(n_cond + t + 1, table.ndim)))
		denominator = marginal.sum(axis=-1)
		dropped = tuple(v for v in allowed if v not in parents)
		perm = [allowed.index(v) for v in parents + dropped]
		cards = tuple(table.shape[allowed.index(v)] for v in parents)
		m = table.shape[n_cond + t]

		d = np.transpose(denominator, perm).reshape((*cards, -1))
		q = np.transpose(marginal, [*perm, len(allowed)]).reshape((*cards, d.shape[-1], m))
		best = d.argmax(axis=-1)
		top = np.take_along_axis(d, best[..., None], axis=-1)[..., 0]
		numerator = np.take_along_axis(q, best[..., None, None], axis=-2)[..., 0, :]

		zero = ~(top > 0)
		with np.errstate(divide="ignore", invalid="ignore"):
			conditional = numerator / np.where(zero, 1.0, top)[..., None]
		conditional[zero] = 1.0 / m
		conditional /= conditional.sum(axis=-1, keepdims=True)

		for config in zip(*np.nonzero(zero)) if cards else ([()] if zero else []):
			flags.append(
				{"node": child, "parents": dict(zip(parents, map(int, config), strict=True)), "flag": "uniform"}
			)
		potentials[child] = Potential(parents + (child,), conditional)

	return Factors(potentials, flags)


def compile_rbn(
	graph: EbnGraph,
	plan: EliminationPlan | None = None,
	settings: Settings | None = None,
	seed: int | None = None,
) -> RbnModel:
	"""Replaces every continuous node by reliability-computed tables over its envelope's discrete nodes."""

	settings = settings or Settings()
	seed = settings.seed if seed is None else seed
	plan = plan or eliminate_continuous(graph, settings=settings)
	contexts = envelope_jobs(graph, plan, settings)
	backend = ReliabilityBackend(replace(settings, workers=1))

	tables: dict[str, Potential] = {}
	provenance: list[dict] = []
	failures = 0

	with executor_context(settings.workers) as executor:
		solver = _Solver(backend, seed, executor)
		for ctx in contexts:
			logger.info("envelope %d: %d jobs (%s scheme)", ctx.index, ctx.srm_jobs, ctx.scheme)
			joint, records, failed = _envelope_joint(graph, ctx, solver)
			provenance += records
			failures += failed
			if failures > settings.max_failed_cells:
				throw(
					f"{failures} reliability jobs failed; at most {settings.max_failed_cells} are allowed.",
					CompilationAbortError,
				)

			factors = factorize_joint(
				Potential(ctx.conditioning + ctx.children, joint), plan.resulting_structure, ctx.conditioning
			)
			for flag in factors.flags:
				logger.warning("%s: zero denominator at %s; using a uniform row", flag["node"], flag["parents"])
			provenance += [flag | {"envelope": ctx.index} for flag in factors.flags]
			tables |= factors.potentials

	nodes = {}
	for label in graph.discrete_labels():
		node = graph.discrete(label)
		if label in tables:
			potential = tables[label]
			nodes[label] = RbnNode(label, node.states, potential.scope[:-1], potential.table)
		else:
			nodes[label] = RbnNode(label, node.states, tuple(graph.discrete_parents(label)), exact_table(graph, label))

	return RbnModel(nodes, provenance)


def _envelope_joint(graph: EbnGraph, ctx: EnvelopeJobs, solver: _Solver) -> tuple[np.ndarray, list[dict], int]:
	records = []
	failed = 0

	if ctx.scheme == "flat":
		probs = np.zeros(ctx.conditioning_cards + ctx.child_cards)
		jobs = level_jobs(graph, ctx, len(ctx.children))
		failed += _fill(graph, probs, jobs, solver.solve(jobs), ctx, records)
		flat = probs.reshape((*ctx.conditioning_cards, -1))
		flat[..., -1] = 1.0 - flat[..., :-1].sum(axis=-1)
		joint = probs
		_check_residue(joint.reshape((*ctx.conditioning_cards, -1))[..., -1], ctx, len(ctx.children))
	else:
		prefix = np.ones(ctx.conditioning_cards)
		for level in ctx.levels:
			probs = np.zeros(ctx.conditioning_cards + ctx.child_cards[:level])
			layout = ctx.level_cells(level)
			positions = [i for i, (s, c) in enumerate(layout) if prefix[(*s, *c[:-1])] != 0]
			jobs = level_jobs(graph, ctx, level, positions)
			failed += _fill(graph, probs, jobs, solver.solve(jobs), ctx, records)
			probs[..., -1] = prefix - probs[..., :-1].sum(axis=-1)
			_check_residue(probs[..., -1], ctx, level)
			prefix = probs
		joint = prefix

	n_child_cells = math.prod(ctx.child_cards)
	slices = joint.reshape((ctx.n_conditions, n_child_cells))
	for s in range(ctx.n_conditions):
		if not np.all(np.isfinite(slices[s])):
			slices[s] = 1.0 / n_child_cells
			records.append({"envelope": ctx.index, "condition": s, "flag": "failed"})
			continue
		total = slices[s].sum()
		if abs(total - 1.0) > RENORMALIZE_LOG:
			logger.info("envelope %d: renormalizing condition %d by %.3g", ctx.index, s, total - 1.0)
		slices[s] /= total

	return slices.reshape(joint.shape), records, failed


def _fill(graph: EbnGraph, probs: np.ndarray, jobs: list[SrmJob], results, ctx: EnvelopeJobs, records) -> int:
	failed = 0
	for job, (p, provenance, solved_by) in zip(jobs, results, strict=True):
		index = tuple(job.cell[label] for label in ctx.conditioning + ctx.children[: probs.ndim - len(ctx.conditioning)])
		probs[index] = p
		if math.isnan(p):
			failed += 1
		cell = {label: graph.discrete(label).states[k] for label, k in job.cell.items()}
		record = {"envelope": ctx.index, "level": job.index[1], "cell": cell, "p": p} | provenance
		if solved_by != job.index:
			record["shared_with"] = list(solved_by)
		records.append(record)
	return failed


def _check_residue(residue: np.ndarray, ctx: EnvelopeJobs, level: int) -> None:
	finite = np.where(np.isfinite(residue), residue, 0.0)
	if finite.min(initial=0.0) < NEGATIVE_ABORT:
		throw(
			f"Envelope {ctx.index}: complement at level {level} is {finite.min():.3g}; "
			"reliability estimates are inconsistent.",
			CompilationAbortError,
		)
	if finite.min(initial=0.0) < 0:
		log_error("Negative complement clipped", f"envelope {ctx.index}, level {level}: {finite.min():.3g}", "compiler")
		residue[residue < 0] = 0.0


def exact_table(graph: EbnGraph, label: str) -> np.ndarray:
	"""The table of a discrete node whose parents are all discrete, evaluated exactly."""

	node = graph.discrete(label)
	if node.kind == "cpt":
		return np.asarray(node.cpt, dtype=float)
	if graph.continuous_parents(label):
		throw(f"Node {label} has continuous parents and needs reliability analysis.")

	configs = graph.parent_configs(label)
	shape = tuple(graph.discrete(p).n_states for p in graph.discrete_parents(label))
	table = np.zeros((*shape, node.n_states))
	for config in configs:
		bindings = graph.parent_codes(label, config)
		model = node.local_model(config)
		if isinstance(model, PmfModel):
			row = model.probabilities(bindings)[0]
			if np.any(row < 0) or np.any(row > 1) or abs(row.sum() - 1.0) > SLICE_TOLERANCE:
				throw(f"Probabilities of {label} at {config} do not form a distribution.", ValidationError)
		else:
			k = int(model.state_index(bindings)[0])
			if k < 0:
				throw(f"No state of {label} holds at parent configuration {config}.", ValidationError)
			row = np.eye(node.n_states)[k]
		table[config] = row

	return table
