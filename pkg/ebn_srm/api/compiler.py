from pathlib import Path

from ebn_srm.config import Settings
from ebn_srm.core.compiler.compiler import RbnModel, compile_rbn
from ebn_srm.core.formats.model_file import load_model
from ebn_srm.core.formats.rbn_file import save_rbn
from ebn_srm.core.model.model import check_valid
from ebn_srm.core.reduce.reduce import eliminate_continuous
from ebn_srm.utils import get_logger

logger = get_logger("api")


def compile_model(
	path: str | Path,
	out: str | Path,
	settings: Settings | None = None,
	policy: str = "enumerate-best",
) -> dict:
	"""Reduces and compiles a model file, writes the rBN file and returns a summary."""

	settings = settings or Settings()
	graph = load_model(path).reduced(settings)
	check_valid(graph, settings)

	plan = eliminate_continuous(graph, policy, settings=settings)
	model = compile_rbn(graph, plan, settings)
	save_rbn(model, out)
	logger.info("wrote %s", out)

	return {"path": str(path), "out": str(out), "seed": settings.seed, **summarize(model)}


def summarize(model: RbnModel) -> dict:
	"""Counts from the provenance records of a compiled model."""

	jobs = [record for record in model.provenance if "level" in record]
	covs = [record["cov"] for record in jobs if record.get("cov") is not None]
	backends = sorted({record["backend"] for record in jobs})

	return {
		"nodes": len(model.labels),
		"total_entries": model.total_entries,
		"jobs": len(jobs),
		"solved": sum(1 for record in jobs if "shared_with" not in record and record["backend"] != "failed"),
		"shared": sum(1 for record in jobs if "shared_with" in record),
		"failures": sum(1 for record in jobs if record["backend"] == "failed"),
		"flags": sum(1 for record in model.provenance if "flag" in record),
		"max_cov": max(covs, default=None),
		"backends": backends,
	}
