from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from ebn_srm.core.dist.dist import JointChain
from ebn_srm.core.model.model import ContinuousNode, DiscreteNode, EbnGraph, topological_order
from ebn_srm.exceptions import EvidenceError, ValidationError
from ebn_srm.utils import executor_context, get_logger, make_rng, run_ordered, throw

logger = get_logger("oracle")

MIN_EFFECTIVE_SAMPLES = 100


@dataclass
class Draws:
	"""Forward samples: component values and discrete codes by name, state indices by label."""

	n: int
	values: dict[str, np.ndarray] = field(default_factory=dict)
	states: dict[str, np.ndarray] = field(default_factory=dict)
	weights: np.ndarray | None = None


def sample_forward(
	graph: EbnGraph,
	n: int,
	seed: int = 0,
	evidence: Mapping[str, str] | None = None,
	stream: int = 0,
	strict: bool = True,
) -> Draws:
	"""Samples the hybrid network in topological order.

	Evidence on CPT or probability-expression nodes is clamped and weighted by its conditional
	probability; evidence on domain nodes is sampled and rejected on mismatch (weight 0). With
	`strict=False` samples outside every state domain get state -1 instead of raising.
	"""

	rng = make_rng(seed, stream)
	evidence = _evidence_indices(graph, evidence or {})
	draws = Draws(n=n, weights=np.ones(n))

	for label in topological_order(graph):
		node = graph.node(label)
		if isinstance(node, ContinuousNode):
			_sample_continuous(graph, node, draws, rng)
			continue

		states = np.full(n, -1, dtype=int)
		observed = evidence.get(label)

		if node.kind == "cpt":
			probabilities = _cpt_rows(graph, node, draws)
			states = _categorical(probabilities, rng) if observed is None else np.full(n, observed)
			if observed is not None:
				draws.weights *= probabilities[:, observed]
		else:
			for config in graph.parent_configs(label):
				mask = _config_mask(graph, label, config, draws)
				if not mask.any():
					continue

				model = node.local_model(config)
				bindings = {name: values[mask] for name, values in draws.values.items()}
				if node.kind == "pmf":
					probabilities = model.probabilities(bindings)
					if not strict:
						probabilities = np.clip(np.nan_to_num(probabilities), 0, None)
						probabilities /= np.maximum(probabilities.sum(axis=1, keepdims=True), 1e-300)
					if observed is None:
						states[mask] = _categorical(probabilities, rng)
					else:
						states[mask] = observed
						draws.weights[mask] *= probabilities[:, observed]
				else:
					states[mask] = model.state_index(bindings)

			if strict and np.any(states < 0):
				throw(f"Samples fall outside every state domain of {label}.", ValidationError)
			if observed is not None and node.kind == "domain":
				draws.weights[states != observed] = 0.0

		draws.states[label] = states
		codes = np.asarray(node.codes, dtype=float)
		draws.values[label] = np.where(states >= 0, codes[np.clip(states, 0, None)], np.nan)

	return draws


def _evidence_indices(graph: EbnGraph, evidence: Mapping[str, str]) -> dict[str, int]:
	indices = {}
	for label, state in evidence.items():
		node = graph.node(label)
		if not isinstance(node, DiscreteNode):
			throw(f"Evidence on continuous node {label}; declare an evidence node instead.", EvidenceError)
		indices[label] = node.state_index(state)
	return indices


def _config_mask(graph: EbnGraph, label: str, config, draws: Draws) -> np.ndarray:
	mask = np.ones(draws.n, dtype=bool)
	for parent, k in zip(graph.discrete_parents(label), config, strict=True):
		mask &= draws.states[parent] == k
	return mask


def _cpt_rows(graph: EbnGraph, node: DiscreteNode, draws: Draws) -> np.ndarray:
	parents = graph.discrete_parents(node.label)
	table = np.asarray(node.cpt, dtype=float).reshape(-1, node.n_states)
	if not parents:
		return np.broadcast_to(table[0], (draws.n, node.n_states))

	dims = [graph.discrete(p).n_states for p in parents]
	index = np.ravel_multi_index([draws.states[p] for p in parents], dims)
	return table[index]


def _categorical(probabilities: np.ndarray, rng: np.random.Generator) -> np.ndarray:
	cumulative = np.cumsum(probabilities, axis=1)
	u = rng.random(len(probabilities)) * cumulative[:, -1]
	return np.minimum((u[:, None] >= cumulative).sum(axis=1), probabilities.shape[1] - 1)


def _sample_continuous(graph: EbnGraph, node: ContinuousNode, draws: Draws, rng: np.random.Generator):
	columns = {component: np.full(draws.n, np.nan) for component in node.components}

	for config in graph.parent_configs(node.label):
		mask = _config_mask(graph, node.label, config, draws)
		if not mask.any():
			continue

		chain = JointChain((node.block(config),))
		constants = {name: values[mask] for name, values in draws.values.items()}
		u = rng.standard_normal((int(mask.sum()), chain.dim))
		values = chain.transform(u, constants)
		for component in node.components:
			columns[component][mask] = values[component]

	draws.values.update(columns)


@dataclass
class OracleEstimate:
	label: str
	states: tuple[str, ...]
	probabilities: np.ndarray
	standard_errors: np.ndarray


@dataclass
class OracleResult:
	estimates: dict[str, OracleEstimate]
	samples: int
	effective_samples: float
	seed: int
	warnings: list[str] = field(default_factory=list)

	def as_dict(self) -> dict:
		return {
			"samples": self.samples,
			"effective_samples": self.effective_samples,
			"seed": self.seed,
			"warnings": self.warnings,
			"posteriors": {
				label: {
					state: {"p": float(p), "se": float(se)}
					for state, p, se in zip(e.states, e.probabilities, e.standard_errors, strict=True)
				}
				for label, e in self.estimates.items()
			},
		}


def oracle_posterior(
	graph: EbnGraph,
	targets: list[str],
	evidence: Mapping[str, str] | None = None,
	samples: int = 10**5,
	seed: int = 0,
	block_size: int = 10**4,
	workers: int = 1,
) -> OracleResult:
	"""Estimates discrete posteriors of the hybrid network by weighted forward sampling."""

	evidence = dict(evidence or {})
	for label in targets:
		if not isinstance(graph.node(label), DiscreteNode):
			throw(f"Target {label} is not a discrete node.")

	sizes = [block_size] * (samples // block_size) + ([samples % block_size] if samples % block_size else [])

	def run_block(item: tuple[int, int]) -> dict:
		index, size = item
		draws = sample_forward(graph, size, seed=seed, evidence=evidence, stream=index)
		w = draws.weights
		return {
			"w": w.sum(),
			"w2": (w * w).sum(),
			"hits": {
				label: np.bincount(draws.states[label], weights=w, minlength=graph.discrete(label).n_states)
				for label in targets
			},
			"hits2": {
				label: np.bincount(draws.states[label], weights=w * w, minlength=graph.discrete(label).n_states)
				for label in targets
			},
		}

	with executor_context(workers) as executor:
		partials = run_ordered(executor, run_block, list(enumerate(sizes)))

	total_w = sum(p["w"] for p in partials)
	total_w2 = sum(p["w2"] for p in partials)
	warnings = []
	if total_w <= 0:
		throw("No sample is consistent with the evidence.", EvidenceError)

	effective = total_w**2 / total_w2
	if effective < MIN_EFFECTIVE_SAMPLES:
		warnings.append(f"effective sample size {effective:.1f} is below {MIN_EFFECTIVE_SAMPLES}")
		logger.warning("Low effective sample size %.1f", effective)

	estimates = {}
	for label in targets:
		hits = sum(p["hits"][label] for p in partials)
		hits2 = sum(p["hits2"][label] for p in partials)
		probabilities = hits / total_w
		# ratio estimator: sum w^2 (I - p)^2 / (sum w)^2
		variance = (hits2 * (1 - probabilities) ** 2 + (total_w2 - hits2) * probabilities**2) / total_w**2
		estimates[label] = OracleEstimate(
			label, graph.discrete(label).states, probabilities, np.sqrt(np.maximum(variance, 0.0))
		)

	return OracleResult(estimates, samples, float(effective), seed, warnings)

