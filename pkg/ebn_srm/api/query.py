from collections.abc import Mapping
from pathlib import Path

from ebn_srm.config import Settings
from ebn_srm.core.formats.model_file import load_model
from ebn_srm.core.formats.rbn_file import load_rbn
from ebn_srm.core.infer.infer import joint_query, model_stats, query
from ebn_srm.core.oracle.oracle import oracle_posterior
from ebn_srm.exceptions import DoesNotExistError, EvidenceError
from ebn_srm.utils import throw


def parse_assignments(items: list[str] | None) -> dict[str, str]:
	"""Turns `Y=state` items into a mapping; a node may appear once."""

	evidence = {}
	for item in items or []:
		label, sep, state = item.partition("=")
		if not sep or not label or not state:
			throw(f"Evidence {item!r} is not of the form node=state.", EvidenceError)
		if label in evidence:
			throw(f"Evidence on {label} is given twice.", EvidenceError)
		evidence[label] = state

	return evidence


def _check_evidence(lookup, evidence: Mapping[str, str]) -> None:
	for label, state in evidence.items():
		try:
			lookup(label).state_index(state)
		except DoesNotExistError as e:
			throw(str(e), EvidenceError)


def query_rbn(
	path: str | Path,
	targets: list[str] | None = None,
	evidence: Mapping[str, str] | None = None,
	joint: bool = False,
	heuristic: str = "min-fill",
	settings: Settings | None = None,
) -> dict:
	"""Posterior marginals (or the joint) of the targets in an rBN file; unobserved nodes by default."""

	settings = settings or Settings()
	model = load_rbn(path)
	evidence = dict(evidence or {})
	_check_evidence(model.node, evidence)
	targets = targets or [label for label in model.labels if label not in evidence]

	if joint:
		result = joint_query(model, targets, evidence, heuristic, settings=settings)
	else:
		result = query(model, targets, evidence, heuristic)

	return {
		"path": str(path),
		"ok": result.ok,
		**result.as_dict(model),
		"model": model_stats(model, heuristic).as_dict(),
	}


def oracle(
	path: str | Path,
	targets: list[str] | None = None,
	evidence: Mapping[str, str] | None = None,
	samples: int = 10**5,
	settings: Settings | None = None,
) -> dict:
	"""Sampled posteriors of the hybrid model, for checking compiled tables."""

	settings = settings or Settings()
	graph = load_model(path).reduced(settings)
	evidence = dict(evidence or {})
	for label in evidence:
		if label in graph.labels and graph.is_continuous(label):
			throw(f"Evidence on continuous node {label}; declare an evidence node instead.", EvidenceError)
	_check_evidence(graph.node, evidence)
	targets = targets or [label for label in graph.discrete_labels() if label not in evidence]

	result = oracle_posterior(
		graph,
		targets,
		evidence,
		samples=samples,
		seed=settings.seed,
		block_size=settings.block_size,
		workers=settings.workers,
	)
	return {"path": str(path), "ok": True, **result.as_dict()}
