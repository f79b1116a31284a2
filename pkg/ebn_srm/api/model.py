from dataclasses import asdict
from pathlib import Path

from ebn_srm.config import Settings
from ebn_srm.core.compiler.compiler import job_report
from ebn_srm.core.formats.model_file import load_model
from ebn_srm.core.model.model import check_valid, markov_envelopes, validate_graph
from ebn_srm.core.reduce.reduce import eliminate_continuous


def validate(path: str | Path, settings: Settings | None = None, samples: int | None = None) -> dict:
	"""Validates a model file; syntax errors raise, model violations are reported."""

	settings = settings or Settings()
	document = load_model(path)
	report = validate_graph(document.graph, settings, samples)

	if report.ok and document.directives:
		reduced = validate_graph(document.reduced(settings), settings, samples)
		report.violations += reduced.violations
		report.warnings += reduced.warnings

	graph = document.graph
	return {
		"path": str(path),
		"ok": report.ok,
		"nodes": len(graph.labels),
		"discrete": len(graph.discrete_labels()),
		"continuous": len(graph.continuous_labels()),
		"directives": [{"kind": d.kind, "target": d.target, "line": d.line} for d in document.directives],
		"violations": [asdict(violation) for violation in report.violations],
		"warnings": report.warnings,
	}


def analyze(
	path: str | Path,
	settings: Settings | None = None,
	policy: str = "enumerate-best",
	order: list[tuple[str, str]] | None = None,
) -> dict:
	"""Envelopes, elimination plan and job counts of a valid model, without solving anything."""

	settings = settings or Settings()
	graph = load_model(path).reduced(settings)
	check_valid(graph, settings)

	envelopes = markov_envelopes(graph)
	plan = eliminate_continuous(graph, policy, order or (), settings)
	jobs = job_report(graph, plan, settings)

	return {
		"path": str(path),
		"envelopes": [
			{
				"continuous": list(envelope.continuous_members),
				"discrete": list(envelope.discrete_members),
				"discrete_members": len(envelope.discrete_members),
			}
			for envelope in envelopes.envelopes
		],
		"clique_lower_bound": envelopes.clique_lower_bound,
		"plan": plan.as_dict(),
		"resulting_structure": {label: list(parents) for label, parents in plan.resulting_structure.items()},
		"jobs": jobs,
		"warnings": plan.warnings + validate_graph(graph, settings).warnings,
	}
