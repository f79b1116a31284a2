import io
import json
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path
from unittest.mock import patch

import numpy as np

from ebn_srm.commands import EXIT_ABORT, EXIT_EVIDENCE, EXIT_OK, EXIT_PARSE, EXIT_VALIDATION, main
from ebn_srm.core.formats.rbn_file import load_rbn
from ebn_srm.exceptions import CompilationAbortError
from ebn_srm.fixtures import fixture_path

DETERMINISTIC = """node A states=a,b
row = 0.5 0.5
node B states=no,yes parents=A
row = 1.0 0.0
row = 1.0 0.0
"""


def run(*argv) -> tuple[int, str, str]:
	out, err = io.StringIO(), io.StringIO()
	with redirect_stdout(out), redirect_stderr(err):
		status = main([str(arg) for arg in argv])
	return status, out.getvalue(), err.getvalue()


def run_json(*argv) -> tuple[int, dict]:
	status, out, _ = run(*argv, "--json")
	return status, json.loads(out)


class CommandTestCase(unittest.TestCase):
	def setUp(self):
		self._tmp = tempfile.TemporaryDirectory()
		self.tmp = Path(self._tmp.name)

	def tearDown(self):
		self._tmp.cleanup()

	def write(self, name: str, text: str) -> Path:
		path = self.tmp / name
		path.write_text(text)
		return path


class UnitTestValidateCommand(CommandTestCase):
	def test_valid_model(self):
		status, out, _ = run("validate", fixture_path("fig1"), "--samples", 500)
		self.assertEqual(status, EXIT_OK)
		self.assertIn("valid", out)

	def test_unknown_state_cites_its_line(self):
		path = self.write("bad.ebn", "node A discrete states=a,b\ncpt = a:0.5 c:0.5\n")
		status, report = run_json("validate", path)
		self.assertEqual(status, EXIT_VALIDATION)
		self.assertFalse(report["ok"])
		self.assertEqual(report["violations"][0]["line"], 2)

	def test_truncated_file(self):
		path = self.write("cut.ebn", 'node X continuous components=x\ndist x="normal(0, 1)\n')
		status, out, err = run("validate", path)
		self.assertEqual(status, EXIT_PARSE)
		self.assertEqual(out, "")
		self.assertIn("line 2", err)

	def test_missing_file(self):
		status, _, _ = run("validate", self.tmp / "absent.ebn")
		self.assertEqual(status, EXIT_PARSE)

	def test_settings_file(self):
		good = self.write("good.toml", "[ebn_srm]\nseed = 5\n")
		bad = self.write("bad.toml", "[ebn_srm]\nseeds = 5\n")
		self.assertEqual(run("validate", fixture_path("fig1"), "--config", good)[0], EXIT_OK)
		self.assertEqual(run("validate", fixture_path("fig1"), "--config", bad)[0], EXIT_VALIDATION)


class UnitTestAnalyzeCommand(CommandTestCase):
	def test_separate_envelopes(self):
		status, report = run_json("analyze", fixture_path("fig3"))
		self.assertEqual(status, EXIT_OK)
		self.assertEqual(len(report["envelopes"]), 2)
		self.assertEqual(len(report["plan"]["envelopes"]), 2)

	def test_discretization_cuts_the_job_count(self):
		_, linked = run_json("analyze", fixture_path("fig7a"))
		_, split = run_json("analyze", fixture_path("fig7b"))
		self.assertEqual(linked["jobs"]["srm_jobs"], 3**5 - 1)
		self.assertEqual(sum(e["top_jobs_per_condition"] for e in split["jobs"]["envelopes"]), 5 * 2)

	def test_text_report_counts_top_level_jobs(self):
		status, out, _ = run("analyze", fixture_path("fig2"))
		self.assertEqual(status, EXIT_OK)
		headline, envelope = out.splitlines()[:2]
		self.assertIn("1 envelopes, 8 top-level jobs of 16 cells, 12 SRM jobs", headline)
		self.assertIn("8 top-level jobs of 16 cells", envelope)

	def test_all_discrete(self):
		status, out, _ = run("analyze", fixture_path("fig1"))
		self.assertEqual(status, EXIT_OK)
		self.assertIn("0 envelopes, 0 top-level jobs of 0 cells, 0 SRM jobs", out)


class IntegrationTestCompileAndQuery(CommandTestCase):
	def test_compile_is_deterministic(self):
		first, second = self.tmp / "a.rbn", self.tmp / "b.rbn"
		for out in (first, second):
			status, report = run_json("compile", fixture_path("single_normal"), "--out", out, "--seed", 42)
			self.assertEqual(status, EXIT_OK)
			self.assertEqual(report["failures"], 0)
		self.assertEqual(first.read_bytes(), second.read_bytes())
		np.testing.assert_allclose(load_rbn(first).node("Y").table, [0.5, 0.5], atol=1e-6)

	def test_root_prior_and_unrelated_evidence(self):
		rbn = self.tmp / "fig1.rbn"
		self.assertEqual(run("compile", fixture_path("fig1"), "-o", rbn)[0], EXIT_OK)

		status, prior = run_json("query", rbn, "-t", "Z1")
		self.assertEqual(status, EXIT_OK)
		self.assertAlmostEqual(prior["posteriors"]["Z1"]["a"], 0.3, places=12)
		self.assertAlmostEqual(prior["evidence_probability"], 1.0, places=12)

		_, posterior = run_json("query", rbn, "-t", "Z1", "-e", "Z5=b")
		self.assertEqual(posterior["posteriors"]["Z1"], prior["posteriors"]["Z1"])
		self.assertLess(posterior["evidence_probability"], 1.0)

	def test_joint_query(self):
		rbn = self.tmp / "fig1.rbn"
		run("compile", fixture_path("fig1"), "-o", rbn)
		status, report = run_json("query", rbn, "-t", "Z1", "-t", "Z4", "--joint")
		self.assertEqual(status, EXIT_OK)
		self.assertEqual(report["joint"]["scope"], ["Z1", "Z4"])
		self.assertAlmostEqual(sum(report["joint"]["table"]), 1.0, places=12)

	def test_impossible_evidence(self):
		rbn = self.write("det.rbn", DETERMINISTIC)
		status, out, _ = run("query", rbn, "-t", "A", "-e", "B=yes")
		self.assertEqual(status, EXIT_EVIDENCE)
		self.assertIn("zero probability", out)

	def test_bad_evidence(self):
		rbn = self.write("det.rbn", DETERMINISTIC)
		self.assertEqual(run("query", rbn, "-e", "B=maybe")[0], EXIT_EVIDENCE)
		self.assertEqual(run("query", rbn, "-e", "B")[0], EXIT_EVIDENCE)
		self.assertEqual(run("query", rbn, "-e", "Q=no")[0], EXIT_EVIDENCE)

	def test_unreadable_rbn(self):
		rbn = self.write("broken.rbn", "node A states=a,b\nrow = 0.5 nope\n")
		self.assertEqual(run("query", rbn)[0], EXIT_PARSE)

	def test_abort_status(self):
		with patch("ebn_srm.commands.compile_model", side_effect=CompilationAbortError("3 jobs failed")):
			status, _, err = run("compile", fixture_path("single_normal"), "-o", self.tmp / "x.rbn")
		self.assertEqual(status, EXIT_ABORT)
		self.assertIn("3 jobs failed", err)


class IntegrationTestOracleAgreement(CommandTestCase):
	def test_all_discrete_model(self):
		rbn = self.tmp / "fig1.rbn"
		run("compile", fixture_path("fig1"), "-o", rbn)
		_, exact = run_json("query", rbn, "-t", "Z4", "-e", "Z3=a")
		status, sampled = run_json("oracle", fixture_path("fig1"), "-t", "Z4", "-e", "Z3=a", "--seed", 4)
		self.assertEqual(status, EXIT_OK)
		for state, value in sampled["posteriors"]["Z4"].items():
			self.assertLessEqual(abs(value["p"] - exact["posteriors"]["Z4"][state]), 3 * value["se"] + 1e-3)

	def test_symmetric_threshold(self):
		_, sampled = run_json("oracle", fixture_path("single_normal"), "-t", "Y", "--seed", 9)
		estimate = sampled["posteriors"]["Y"]["le"]
		self.assertLessEqual(abs(estimate["p"] - 0.5), 3 * estimate["se"])

	def test_compiled_posterior_matches_sampling(self):
		rbn = self.tmp / "pmf.rbn"
		status, _ = run_json("compile", fixture_path("pmf_child"), "-o", rbn, "--system-mc-cap", 10**5, "--cov", 0.01, "--seed", 3)
		self.assertEqual(status, EXIT_OK)
		_, exact = run_json("query", rbn, "-t", "A", "-t", "Y", "-e", "E=yes")
		_, sampled = run_json("oracle", fixture_path("pmf_child"), "-t", "A", "-t", "Y", "-e", "E=yes", "--seed", 5)
		for label in ("A", "Y"):
			for state, value in sampled["posteriors"][label].items():
				with self.subTest(label=label, state=state):
					self.assertLessEqual(abs(value["p"] - exact["posteriors"][label][state]), 3 * value["se"] + 0.01)

	def test_evidence_on_continuous_node(self):
		status, _, err = run("oracle", fixture_path("single_normal"), "-e", "X=high")
		self.assertEqual(status, EXIT_EVIDENCE)
		self.assertIn("continuous", err)
