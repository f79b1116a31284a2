"""The `ebn` command line: validate, analyze, compile, query and oracle.

Exit status: 0 ok, 1 model or rBN file unreadable, 2 validation failure, 3 evidence failure,
4 compilation aborted.
"""

import argparse
import json
import sys
from collections.abc import Sequence

from ebn_srm.api.compiler import compile_model
from ebn_srm.api.model import analyze, validate
from ebn_srm.api.query import oracle, parse_assignments, query_rbn
from ebn_srm.config import BACKENDS, get_settings
from ebn_srm.core.infer.infer import HEURISTICS
from ebn_srm.core.reduce.reduce import POLICIES
from ebn_srm.exceptions import CompilationAbortError, EbnError, EvidenceError, ModelFileError
from ebn_srm.utils import configure_logging, get_logger, json_default

EXIT_OK = 0
EXIT_PARSE = 1
EXIT_VALIDATION = 2
EXIT_EVIDENCE = 3
EXIT_ABORT = 4

logger = get_logger("commands")


def _common() -> argparse.ArgumentParser:
	common = argparse.ArgumentParser(add_help=False)
	common.add_argument("--json", action="store_true", help="Print the report as one JSON object.")
	common.add_argument("--verbose", "-v", action="store_true", help="Log debug messages to stderr.")
	common.add_argument("--config", help="TOML settings file ([ebn_srm] table).")
	common.add_argument("--seed", type=int, help="Base seed for every random stream.")
	common.add_argument("--workers", type=int, help="Worker threads.")
	return common


def _reliability(parser: argparse.ArgumentParser) -> None:
	parser.add_argument("--backend", choices=BACKENDS)
	parser.add_argument("--cov", type=float, dest="target_cov", help="Target coefficient of variation.")
	parser.add_argument("--mc-cap", type=int, dest="mc_cap", help="Sample cap per component job.")
	parser.add_argument("--system-mc-cap", type=int, dest="system_mc_cap", help="Sample cap per system job.")
	parser.add_argument("--max-failed", type=int, dest="max_failed_cells", help="Failed jobs tolerated.")
	parser.add_argument(
		"--allow-large-envelopes", action="store_true", default=None, help="Lift the envelope-size limit."
	)
	parser.add_argument("--policy", choices=POLICIES, default="enumerate-best", help="Arc reversal order.")


def build_parser() -> argparse.ArgumentParser:
	common = _common()
	parser = argparse.ArgumentParser(prog="ebn", description="Enhanced Bayesian networks with reliability methods.")
	commands = parser.add_subparsers(dest="command", required=True)

	p = commands.add_parser("validate", parents=[common], help="Check a model file.")
	p.add_argument("model")
	p.add_argument("--samples", type=int, help="Samples for the local-model checks.")
	p.set_defaults(handler=_validate)

	p = commands.add_parser("analyze", parents=[common], help="Report envelopes, elimination plan and job counts.")
	p.add_argument("model")
	_reliability(p)
	p.set_defaults(handler=_analyze)

	p = commands.add_parser("compile", parents=[common], help="Compute the reduced network and write it.")
	p.add_argument("model")
	p.add_argument("--out", "-o", required=True, help="rBN file to write.")
	_reliability(p)
	p.set_defaults(handler=_compile)

	p = commands.add_parser("query", parents=[common], help="Posterior marginals from an rBN file.")
	p.add_argument("rbn")
	p.add_argument("--target", "-t", action="append", help="Target node; repeatable.")
	p.add_argument("--evidence", "-e", action="append", help="node=state; repeatable.")
	p.add_argument("--joint", action="store_true", help="Report the joint posterior of the targets.")
	p.add_argument("--heuristic", choices=HEURISTICS, default="min-fill")
	p.set_defaults(handler=_query)

	p = commands.add_parser("oracle", parents=[common], help="Sampled posteriors of the hybrid model.")
	p.add_argument("model")
	p.add_argument("--target", "-t", action="append", help="Target node; repeatable.")
	p.add_argument("--evidence", "-e", action="append", help="node=state; repeatable.")
	p.add_argument("--samples", type=int, default=10**5)
	p.set_defaults(handler=_oracle)

	return parser


def _settings(args: argparse.Namespace):
	overrides = {
		key: getattr(args, key, None)
		for key in (
			"seed",
			"workers",
			"backend",
			"target_cov",
			"mc_cap",
			"system_mc_cap",
			"max_failed_cells",
			"allow_large_envelopes",
		)
	}
	return get_settings(args.config, **overrides)


def _validate(args: argparse.Namespace) -> tuple[dict, int]:
	report = validate(args.model, _settings(args), args.samples)
	return report, EXIT_OK if report["ok"] else EXIT_VALIDATION


def _analyze(args: argparse.Namespace) -> tuple[dict, int]:
	return analyze(args.model, _settings(args), args.policy), EXIT_OK


def _compile(args: argparse.Namespace) -> tuple[dict, int]:
	return compile_model(args.model, args.out, _settings(args), args.policy), EXIT_OK


def _query(args: argparse.Namespace) -> tuple[dict, int]:
	report = query_rbn(
		args.rbn, args.target, parse_assignments(args.evidence), args.joint, args.heuristic, _settings(args)
	)
	return report, EXIT_OK if report["ok"] else EXIT_EVIDENCE


def _oracle(args: argparse.Namespace) -> tuple[dict, int]:
	report = oracle(args.model, args.target, parse_assignments(args.evidence), args.samples, _settings(args))
	return report, EXIT_OK


def render(command: str, report: dict) -> str:
	"""Plain-text form of a report."""

	lines = []
	match command:
		case "validate":
			state = "valid" if report["ok"] else f"{len(report['violations'])} violation(s)"
			lines.append(f"{report['path']}: {report['nodes']} nodes ({report['continuous']} continuous), {state}")
			for v in report["violations"]:
				where = f"line {v['line']}: " if v["line"] else ""
				lines.append(f"  {where}{v['kind']}: {v['message']}")
		case "analyze":
			jobs = report["jobs"]
			lines.append(
				f"{len(report['envelopes'])} envelopes, {jobs['top_jobs']} top-level jobs of {jobs['cells']} cells, "
				f"{jobs['srm_jobs']} SRM jobs ({jobs['unique_jobs']} distinct), "
				f"clique lower bound {report['clique_lower_bound']}"
			)
			for plan, counts in zip(report["plan"]["envelopes"], jobs["envelopes"], strict=True):
				lines.append(
					f"  {{{', '.join(plan['continuous'])}}}: {len(plan['discrete'])} discrete members, "
					f"{counts['top_jobs']} top-level jobs of {counts['cells']} cells, "
					f"{counts['srm_jobs']} jobs ({counts['kind']}), actions: {', '.join(plan['actions']) or '-'}"
				)
		case "compile":
			cov = "-" if report["max_cov"] is None else f"{report['max_cov']:.4g}"
			lines.append(
				f"wrote {report['out']}: {report['jobs']} jobs, {report['solved']} solved, "
				f"{report['shared']} shared, {report['failures']} failed, max cov {cov}"
			)
		case "query" | "oracle":
			if not report["ok"]:
				lines.append(f"error: {report['error']}")
			for label, states in report["posteriors"].items():
				cells = []
				for state, value in states.items():
					cells.append(f"{state}={value['p']:.6g}±{value['se']:.2g}" if isinstance(value, dict) else f"{state}={value:.6g}")
				lines.append(f"{label}: {' '.join(cells)}")
			if command == "query":
				lines.append(f"P(evidence) = {report['evidence_probability']:.6g} (log {report['log_evidence']:.6g})")
				lines.append(f"largest potential: {report['stats']['max_entries']} entries")

	for warning in report.get("warnings", []):
		lines.append(f"warning: {warning}")

	return "\n".join(lines)


def main(argv: Sequence[str] | None = None) -> int:
	args = build_parser().parse_args(argv)
	configure_logging(args.verbose)

	try:
		report, status = args.handler(args)
	except ModelFileError as e:
		print(f"error: {e}", file=sys.stderr)
		return EXIT_PARSE
	except OSError as e:
		print(f"error: {e}", file=sys.stderr)
		return EXIT_PARSE
	except CompilationAbortError as e:
		print(f"error: {e}", file=sys.stderr)
		return EXIT_ABORT
	except EvidenceError as e:
		print(f"error: {e}", file=sys.stderr)
		return EXIT_EVIDENCE
	except EbnError as e:
		print(f"error: {e}", file=sys.stderr)
		return EXIT_VALIDATION

	if args.json:
		print(json.dumps(report, indent=2, default=json_default))
	else:
		print(render(args.command, report))

	logger.debug("%s finished with status %d", args.command, status)
	return status


if __name__ == "__main__":
	sys.exit(main())
