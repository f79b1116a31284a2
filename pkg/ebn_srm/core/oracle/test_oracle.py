import unittest

import numpy as np

from ebn_srm.core.dist.dist import MarginalSpec
from ebn_srm.core.dist.normal import std_cdf
from ebn_srm.core.lsf.lsf import ThresholdPartition, parse_expr
from ebn_srm.core.model.model import ContinuousNode, DiscreteNode, EbnGraph, PartitionModel, PmfModel
from ebn_srm.core.oracle.oracle import oracle_posterior, sample_forward
from ebn_srm.exceptions import ValidationError


def shifted_graph(cut: float = 0.0) -> EbnGraph:
	"""A -> X -> Y (threshold on x), X -> E (probability phi(x))."""

	graph = EbnGraph()
	graph.add_node(DiscreteNode("A", ("lo", "hi"), cpt=np.array([0.5, 0.5])))
	graph.add_node(ContinuousNode("X", ("x",), {None: (MarginalSpec.from_text("normal(2*A - 1, 1)"),)}))
	graph.add_node(
		DiscreteNode("Y", ("low", "high"), kind="domain", local={None: PartitionModel(ThresholdPartition(parse_expr("x"), (cut,)))})
	)
	graph.add_node(DiscreteNode("E", ("yes", "no"), kind="pmf", local={None: PmfModel((parse_expr("phi(x)"), None))}))
	for parent, child in (("A", "X"), ("X", "Y"), ("X", "E")):
		graph.add_edge(parent, child)
	return graph


class UnitTestSampleForward(unittest.TestCase):
	def test_marginals(self):
		draws = sample_forward(shifted_graph(), 10**5, seed=1)
		self.assertEqual(set(draws.states), {"A", "Y", "E"})
		self.assertAlmostEqual(draws.states["A"].mean(), 0.5, delta=0.01)
		self.assertAlmostEqual((draws.states["Y"] == 0).mean(), 0.5, delta=0.01)
		self.assertAlmostEqual(draws.values["x"].mean(), 0.0, delta=0.02)
		np.testing.assert_array_equal(draws.weights, 1.0)

	def test_parent_codes_shift_the_child(self):
		draws = sample_forward(shifted_graph(), 10**5, seed=2)
		hi = draws.states["A"] == 1
		self.assertAlmostEqual(draws.values["x"][hi].mean(), 1.0, delta=0.02)
		self.assertAlmostEqual(draws.values["x"][~hi].mean(), -1.0, delta=0.02)

	def test_reproducible(self):
		a = sample_forward(shifted_graph(), 1000, seed=3)
		b = sample_forward(shifted_graph(), 1000, seed=3)
		np.testing.assert_array_equal(a.values["x"], b.values["x"])

	def test_clamped_evidence(self):
		draws = sample_forward(shifted_graph(), 1000, seed=4, evidence={"E": "yes"})
		np.testing.assert_array_equal(draws.states["E"], 0)
		np.testing.assert_allclose(draws.weights, std_cdf(draws.values["x"]))

	def test_continuous_evidence(self):
		with self.assertRaises(ValidationError):
			sample_forward(shifted_graph(), 10, evidence={"X": "yes"})


class UnitTestOraclePosterior(unittest.TestCase):
	def assert_within(self, result, label: str, state: int, expected: float) -> None:
		estimate = result.estimates[label]
		self.assertLessEqual(abs(estimate.probabilities[state] - expected), 3 * estimate.standard_errors[state] + 1e-3)

	def test_domain_evidence(self):
		result = oracle_posterior(shifted_graph(), ["A"], {"Y": "low"}, samples=10**5, seed=5)
		self.assert_within(result, "A", 0, std_cdf(1.0))
		self.assertAlmostEqual(result.estimates["A"].probabilities.sum(), 1.0, places=12)

	def test_probability_evidence(self):
		result = oracle_posterior(shifted_graph(), ["A"], {"E": "yes"}, samples=10**5, seed=6)
		self.assert_within(result, "A", 0, std_cdf(-1 / np.sqrt(2)))

	def test_no_evidence(self):
		result = oracle_posterior(shifted_graph(), ["Y"], samples=10**5, seed=7)
		self.assert_within(result, "Y", 0, 0.5)
		self.assertEqual(result.effective_samples, 10**5)

	def test_independent_of_worker_count(self):
		a = oracle_posterior(shifted_graph(), ["A"], {"Y": "low"}, samples=4 * 10**4, seed=8)
		b = oracle_posterior(shifted_graph(), ["A"], {"Y": "low"}, samples=4 * 10**4, seed=8, workers=3)
		np.testing.assert_array_equal(a.estimates["A"].probabilities, b.estimates["A"].probabilities)

	def test_impossible_evidence(self):
		with self.assertRaises(ValidationError):
			oracle_posterior(shifted_graph(cut=12.0), ["A"], {"Y": "high"}, samples=10**4, seed=9)

	def test_low_effective_sample_size(self):
		with self.assertLogs("ebn_srm.oracle", level="WARNING"):
			result = oracle_posterior(shifted_graph(cut=3.5), ["A"], {"Y": "high"}, samples=10**4, seed=10)
		self.assertTrue(result.warnings)

	def test_continuous_target(self):
		with self.assertRaises(ValidationError):
			oracle_posterior(shifted_graph(), ["X"])

	def test_as_dict(self):
		report = oracle_posterior(shifted_graph(), ["A"], samples=10**3, seed=11).as_dict()
		self.assertEqual(set(report["posteriors"]["A"]), {"lo", "hi"})
		self.assertEqual(report["samples"], 10**3)
