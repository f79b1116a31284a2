import itertools
import math
import unittest

import networkx as nx
import numpy as np

from ebn_srm.config import Settings
from ebn_srm.core.compiler.compiler import RbnModel, RbnNode, compile_rbn
from ebn_srm.core.formats.model_file import load_model
from ebn_srm.core.infer.infer import joint_query, model_stats, plan_elimination, query
from ebn_srm.exceptions import DoesNotExistError, MemoryBoundError, ValidationError
from ebn_srm.fixtures import fixture_path


def binary_model(structure: dict[str, tuple[str, ...]], rng: np.random.Generator) -> RbnModel:
	"""Binary nodes with random strictly positive tables; `structure` maps labels to parents."""

	nodes = {}
	for label, parents in structure.items():
		table = rng.uniform(0.05, 1.0, (2,) * (len(parents) + 1))
		nodes[label] = RbnNode(label, ("f", "t"), tuple(parents), table / table.sum(axis=-1, keepdims=True))
	return RbnModel(nodes)


def random_dag(rng: np.random.Generator, n: int) -> dict[str, tuple[str, ...]]:
	labels = [f"V{k}" for k in range(n)]
	structure = {}
	for k, label in enumerate(labels):
		candidates = labels[:k]
		structure[label] = tuple(p for p in candidates if rng.random() < 0.35)[:3]
	return structure


def d_separated(model: RbnModel, x: str, y: str, given: set[str]) -> bool:
	check = getattr(nx, "is_d_separator", None) or nx.d_separated
	return check(model.digraph, {x}, {y}, given)


def chain() -> RbnModel:
	return RbnModel(
		{
			"A": RbnNode("A", ("a0", "a1"), (), [0.3, 0.7]),
			"B": RbnNode("B", ("b0", "b1", "b2"), ("A",), [[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]]),
			"C": RbnNode("C", ("c0", "c1"), ("B",), [[0.9, 0.1], [0.4, 0.6], [0.25, 0.75]]),
		}
	)


def chain_joint(model: RbnModel) -> np.ndarray:
	a, b, c = (model.node(label).table for label in "ABC")
	return np.einsum("a,ab,bc->abc", a, b, c)


class UnitTestQuery(unittest.TestCase):
	def test_posterior_matches_enumeration(self):
		model = chain()
		joint = chain_joint(model)
		result = query(model, ["A", "B"], {"C": "c1"})
		np.testing.assert_allclose(result.marginals["A"], joint[:, :, 1].sum(axis=1) / joint[:, :, 1].sum(), atol=1e-12)
		np.testing.assert_allclose(result.marginals["B"], joint[:, :, 1].sum(axis=0) / joint[:, :, 1].sum(), atol=1e-12)
		self.assertTrue(result.ok)

	def test_evidence_probability(self):
		model = chain()
		result = query(model, ["A"], {"C": "c0"})
		self.assertAlmostEqual(result.evidence_probability, chain_joint(model)[:, :, 0].sum(), places=12)
		self.assertAlmostEqual(result.log_evidence, np.log(result.evidence_probability), places=12)

	def test_no_evidence_gives_priors(self):
		model = chain()
		result = query(model, ["C"])
		np.testing.assert_allclose(result.marginals["C"], chain_joint(model).sum(axis=(0, 1)), atol=1e-12)
		self.assertAlmostEqual(result.evidence_probability, 1.0, places=12)

	def test_observed_target_is_one_hot(self):
		result = query(chain(), ["B", "A"], {"B": "b2"})
		np.testing.assert_array_equal(result.marginals["B"], [0.0, 0.0, 1.0])
		self.assertEqual(list(result.marginals), ["B", "A"])

	def test_unrelated_evidence_leaves_priors_bit_equal(self):
		model = compile_rbn(load_model(fixture_path("fig1")).graph)
		prior = query(model, ["Z1", "Z3"])
		posterior = query(model, ["Z1", "Z3"], {"Z5": "b"})
		for label in ("Z1", "Z3"):
			np.testing.assert_array_equal(posterior.marginals[label], prior.marginals[label])
		self.assertLess(posterior.evidence_probability, 1.0)

	def test_heuristics_agree(self):
		rng = np.random.default_rng(11)
		structure = {"A": (), "B": ("A",), "C": ("A",), "D": ("B", "C"), "E": ("C",), "F": ("D", "E")}
		model = binary_model(structure, rng)
		evidence = {"F": "t", "B": "f"}
		reference = query(model, ["A", "C", "E"], evidence)
		for heuristic, order in (("min-degree", ()), ("order", ("E", "D", "C", "B", "A"))):
			with self.subTest(heuristic=heuristic):
				result = query(model, ["A", "C", "E"], evidence, heuristic=heuristic, order=order)
				for label in ("A", "C", "E"):
					np.testing.assert_allclose(result.marginals[label], reference.marginals[label], atol=1e-12, rtol=0)

	def test_rare_evidence_keeps_a_positive_probability(self):
		rare = [1e-200, 1.0 - 1e-200]
		model = RbnModel(
			{
				"A": RbnNode("A", ("a", "b"), (), rare),
				"B": RbnNode("B", ("a", "b"), (), rare),
				"C": RbnNode("C", ("c0", "c1"), (), [0.4, 0.6]),
			}
		)
		with self.assertLogs("ebn_srm.infer", level="WARNING"):
			result = query(model, ["C"], {"A": "a", "B": "a"})
		self.assertTrue(result.ok)
		self.assertGreater(result.evidence_probability, 0.0)
		self.assertLessEqual(result.evidence_probability, 1.0)
		self.assertAlmostEqual(result.log_evidence, 2 * math.log(1e-200), delta=1e-9)
		np.testing.assert_allclose(result.marginals["C"], [0.4, 0.6], atol=1e-12)

	def test_zero_probability_evidence(self):
		model = RbnModel(
			{
				"A": RbnNode("A", ("a", "b"), (), [0.5, 0.5]),
				"B": RbnNode("B", ("no", "yes"), ("A",), [[1.0, 0.0], [1.0, 0.0]]),
			}
		)
		result = query(model, ["A"], {"B": "yes"})
		self.assertFalse(result.ok)
		self.assertEqual(result.evidence_probability, 0.0)
		self.assertEqual(result.marginals, {})
		self.assertIn("error", result.as_dict(model))

	def test_bad_evidence(self):
		with self.assertRaises(DoesNotExistError):
			query(chain(), ["A"], {"C": "c9"})
		with self.assertRaises(DoesNotExistError):
			query(chain(), ["A"], {"Q": "c0"})
		with self.assertRaises(DoesNotExistError):
			query(chain(), ["Q"])

	def test_report(self):
		model = chain()
		report = query(model, ["A"], {"C": "c1"}).as_dict(model)
		self.assertEqual(set(report["posteriors"]["A"]), {"a0", "a1"})
		self.assertAlmostEqual(sum(report["posteriors"]["A"].values()), 1.0, places=12)


class UnitTestDSeparationInvariance(unittest.TestCase):
	def test_random_networks(self):
		rng = np.random.default_rng(2024)
		checked = 0
		for trial in range(100):
			model = binary_model(random_dag(rng, int(rng.integers(3, 9))), rng)
			labels = model.labels
			target = labels[int(rng.integers(len(labels)))]
			others = [label for label in labels if label != target]
			given = {label for label in others if rng.random() < 0.3}
			extra = [label for label in others if label not in given and d_separated(model, target, label, given)]
			if not extra:
				continue

			evidence = {label: "t" for label in given}
			before = query(model, [target], evidence)
			after = query(model, [target], {**evidence, extra[0]: "f"})
			with self.subTest(trial=trial):
				np.testing.assert_array_equal(after.marginals[target], before.marginals[target])
			checked += 1

		self.assertGreater(checked, 10)


class UnitTestJointQuery(unittest.TestCase):
	def test_single_node_matches_query(self):
		model = chain()
		joint = joint_query(model, ["B"], {"C": "c0"})
		marginal = query(model, ["B"], {"C": "c0"})
		np.testing.assert_allclose(joint.joint.table, marginal.marginals["B"], atol=1e-12)

	def test_full_joint_is_the_product(self):
		model = chain()
		result = joint_query(model, ["A", "B", "C"])
		np.testing.assert_allclose(result.joint.table, chain_joint(model), atol=1e-12)
		np.testing.assert_allclose(result.marginals["B"], chain_joint(model).sum(axis=(0, 2)), atol=1e-12)

	def test_scope_order_is_kept(self):
		model = chain()
		result = joint_query(model, ["C", "A"])
		self.assertEqual(result.joint.scope, ("C", "A"))
		np.testing.assert_allclose(result.joint.table, chain_joint(model).sum(axis=1).T, atol=1e-12)

	def test_independent_nodes_give_outer_product(self):
		model = RbnModel(
			{
				"A": RbnNode("A", ("a", "b"), (), [0.3, 0.7]),
				"D": RbnNode("D", ("x", "y", "z"), (), [0.2, 0.5, 0.3]),
			}
		)
		result = joint_query(model, ["A", "D"])
		np.testing.assert_allclose(result.joint.table, np.outer([0.3, 0.7], [0.2, 0.5, 0.3]), atol=1e-15)

	def test_memory_bound(self):
		with self.assertRaises(MemoryBoundError):
			joint_query(chain(), ["A", "B", "C"], settings=Settings(max_joint_entries=8))

	def test_observed_scope(self):
		with self.assertRaises(ValidationError):
			joint_query(chain(), ["A", "C"], {"C": "c0"})
		with self.assertRaises(ValidationError):
			joint_query(chain(), ["A", "A"])


class UnitTestModelStats(unittest.TestCase):
	def test_wide_family(self):
		rng = np.random.default_rng(5)
		parents = tuple(f"P{k}" for k in range(20))
		nodes = {label: RbnNode(label, ("f", "t"), (), [0.5, 0.5]) for label in parents}
		table = rng.uniform(0.1, 1.0, (2,) * 21)
		nodes["C"] = RbnNode("C", ("f", "t"), parents, table / table.sum(axis=-1, keepdims=True))
		stats = model_stats(RbnModel(nodes))
		self.assertEqual(stats.max_entries, 2**21)
		self.assertEqual(stats.parents["C"], 20)

	def test_chain(self):
		rng = np.random.default_rng(6)
		model = binary_model({f"V{k}": ((f"V{k - 1}",) if k else ()) for k in range(8)}, rng)
		stats = model_stats(model)
		self.assertEqual(stats.max_entries, 4)
		self.assertEqual(len(stats.max_scope), 2)
		self.assertEqual(sorted(stats.order), sorted(model.labels))

	def test_linked_children_family(self):
		structure = {
			"Y1": (),
			"Y2": ("Y1",),
			"Y3": ("Y1", "Y2"),
			"Y4": ("Y3",),
			"Y5": ("Y3", "Y4"),
			"Y6": ("Y3", "Y4", "Y5"),
			"Y7": ("Y5",),
		}
		stats = model_stats(binary_model(structure, np.random.default_rng(7)))
		self.assertGreaterEqual(stats.max_entries, 16)
		self.assertLessEqual({"Y3", "Y4", "Y5", "Y6"}, set(stats.max_scope))

	def test_plan_with_given_order(self):
		scopes = [("A",), ("A", "B"), ("B", "C")]
		cards = {"A": 2, "B": 2, "C": 2}
		stats = plan_elimination(scopes, ["A", "B", "C"], cards, "ABC".index, "order", ("C",))
		self.assertEqual(stats.order[0], "C")
		self.assertEqual(len(stats.order), 3)

	def test_unknown_heuristic(self):
		with self.assertRaises(ValidationError):
			model_stats(chain(), heuristic="fastest")


class UnitTestEnumeration(unittest.TestCase):
	def test_every_evidence_state(self):
		model = chain()
		joint = chain_joint(model)
		for a, c in itertools.product(range(2), range(2)):
			evidence = {"A": model.node("A").states[a], "C": model.node("C").states[c]}
			result = query(model, ["B"], evidence)
			expected = joint[a, :, c] / joint[a, :, c].sum()
			np.testing.assert_allclose(result.marginals["B"], expected, atol=1e-12)
