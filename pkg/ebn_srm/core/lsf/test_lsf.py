import math
import unittest

import numpy as np

from ebn_srm.core.lsf.lsf import (
	DomainSpec,
	Num,
	ThresholdPartition,
	Var,
	domain_value,
	eval_expr,
	grad_expr,
	parse_call,
	parse_domain,
	parse_expr,
)
from ebn_srm.exceptions import ExpressionEvaluationError, ExpressionSyntaxError, ValidationError


class UnitTestParseExpr(unittest.TestCase):
	def test_arithmetic(self):
		self.assertEqual(eval_expr(parse_expr("2*r - s"), {"r": 1, "s": 1}), 1.0)

	def test_divorcing_limit_state_identifiers(self):
		expr = parse_expr("y4 - a1*y1 - a2*y2 - a3*y3 + h")
		self.assertEqual(len(expr.variables()), 8)

	def test_unbalanced_parenthesis_position(self):
		with self.assertRaises(ExpressionSyntaxError) as ctx:
			parse_expr("2*(r")
		self.assertEqual(ctx.exception.position, 4)

	def test_unexpected_character_position(self):
		with self.assertRaises(ExpressionSyntaxError) as ctx:
			parse_expr("x + $")
		self.assertEqual(ctx.exception.position, 4)

	def test_unknown_function(self):
		with self.assertRaises(ExpressionSyntaxError):
			parse_expr("sin(x)")

	def test_arity_mismatch(self):
		with self.assertRaises(ExpressionSyntaxError):
			parse_expr("max(x)")

	def test_precedence(self):
		self.assertEqual(eval_expr(parse_expr("1 + 2 * 3 ^ 2"), {}), 19.0)
		self.assertEqual(eval_expr(parse_expr("-2 ^ 2"), {}), -4.0)
		self.assertEqual(eval_expr(parse_expr("8 / 4 / 2"), {}), 1.0)
		self.assertEqual(eval_expr(parse_expr("10 - 4 - 3"), {}), 3.0)
		self.assertEqual(eval_expr(parse_expr("2 ^ 3 ^ 2"), {}), 64.0)
		self.assertEqual(eval_expr(parse_expr("2 ^ -1"), {}), 0.5)

	def test_dotted_names(self):
		self.assertEqual(parse_expr("X1.r + 1").variables(), frozenset({"X1.r"}))

	def test_unparse_is_fixed_point(self):
		for text in ("y4 - a1*y1 - a2*y2 + h", "-x^2 + exp(-a*b)", "max(x, 2) / (1 + -3)", "--x"):
			once = parse_expr(text)
			self.assertEqual(parse_expr(once.unparse()), once)

	def test_parse_call_keeps_nested_calls(self):
		name, args = parse_call("truncated(normal(0, 1), -1, 1)")
		self.assertEqual(name, "truncated")
		self.assertEqual(args[0].name, "normal")
		self.assertEqual(args[1], Num(-1.0))


class UnitTestEvalExpr(unittest.TestCase):
	def test_power(self):
		self.assertEqual(eval_expr(parse_expr("x^2"), {"x": 3}), 9.0)

	def test_phi(self):
		self.assertEqual(eval_expr(parse_expr("phi(0)"), {}), 0.5)

	def test_domain_errors(self):
		for text, bindings in (("ln(x)", {"x": -1}), ("sqrt(x)", {"x": -1}), ("1 / x", {"x": 0})):
			with self.assertRaises(ExpressionEvaluationError):
				eval_expr(parse_expr(text), bindings)

	def test_domain_error_names_subexpression(self):
		with self.assertRaises(ExpressionEvaluationError) as ctx:
			eval_expr(parse_expr("1 + ln(x)"), {"x": -1})
		self.assertEqual(ctx.exception.subexpression, "ln(x)")

	def test_unbound_variable(self):
		with self.assertRaises(ExpressionEvaluationError):
			eval_expr(parse_expr("x + y"), {"x": 1})

	def test_vectorized(self):
		values = eval_expr(parse_expr("x^2 + 1"), {"x": np.array([0.0, 1.0, 2.0])})
		np.testing.assert_array_equal(values, [1.0, 2.0, 5.0])

	def test_substitute(self):
		expr = parse_expr("a * x + b").substitute({"a": 2, "b": Var("c"), "x": "X.r"})
		self.assertEqual(expr.variables(), frozenset({"c", "X.r"}))
		self.assertEqual(eval_expr(expr, {"c": 1, "X.r": 3}), 7.0)


class UnitTestGradExpr(unittest.TestCase):
	def test_square(self):
		self.assertAlmostEqual(grad_expr(parse_expr("x^2"), {"x": 3})[0], 6.0, delta=1e-5)

	def test_constant(self):
		np.testing.assert_array_equal(grad_expr(parse_expr("5"), {"x": 1.0}, names=["x"]), [0.0])

	def test_exp_product(self):
		partials = grad_expr(parse_expr("exp(a*b)"), {"a": 0.5, "b": 2.0}, names=["a", "b"])
		np.testing.assert_allclose(partials, [2 * math.e, 0.5 * math.e], atol=1e-4)

	def test_quadratic_matches_analytic(self):
		expr = parse_expr("3*x^2 - 2*x*y + y^2")
		partials = grad_expr(expr, {"x": 1.5, "y": -2.0}, names=["x", "y"])
		np.testing.assert_allclose(partials, [6 * 1.5 + 4.0, -3.0 - 4.0], rtol=1e-6)

	def test_second_order_convergence(self):
		expr = parse_expr("exp(x) * sqrt(x)")
		x = 1.3
		exact = math.exp(x) * math.sqrt(x) + math.exp(x) / (2 * math.sqrt(x))
		coarse = abs(grad_expr(expr, {"x": x}, step=1e-2)[0] - exact)
		fine = abs(grad_expr(expr, {"x": x}, step=5e-3)[0] - exact)
		self.assertGreater(coarse / fine, 3.5)
		self.assertLess(coarse / fine, 4.5)


class UnitTestDomainSpec(unittest.TestCase):
	def test_component_reduces_to_expression(self):
		domain = parse_domain("x - 2")
		self.assertTrue(domain.is_component())
		self.assertEqual(domain_value(domain, {"x": 5}), 3.0)

	def test_series_and_parallel(self):
		bindings = {"g1": -1.0, "g2": 1.0}
		self.assertEqual(domain_value(parse_domain("[g1] OR [g2]"), bindings), -1.0)
		self.assertEqual(domain_value(parse_domain("[g1; g2]"), bindings), 1.0)

	def test_tie_counts_as_inside(self):
		self.assertTrue(parse_domain("x").contains({"x": 0.0}))

	def test_membership_matches_boolean_logic(self):
		rng = np.random.default_rng(7)
		bindings = {name: rng.normal(size=10**4) for name in ("a", "b", "c")}
		domain = parse_domain("[a; b] OR [c]")
		expected = ((bindings["a"] <= 0) & (bindings["b"] <= 0)) | (bindings["c"] <= 0)
		np.testing.assert_array_equal(domain.contains(bindings), expected)

	def test_complement(self):
		rng = np.random.default_rng(11)
		bindings = {name: rng.normal(size=10**4) for name in ("a", "b", "c")}
		domain = parse_domain("[a; b] OR [c]")
		np.testing.assert_array_equal(domain.complement().contains(bindings), ~domain.contains(bindings))

	def test_intersection(self):
		rng = np.random.default_rng(13)
		bindings = {name: rng.normal(size=10**4) for name in ("a", "b", "c")}
		left, right = parse_domain("[a] OR [b]"), parse_domain("c")
		np.testing.assert_array_equal(
			left.intersection(right).contains(bindings), left.contains(bindings) & right.contains(bindings)
		)

	def test_unparse_round_trip(self):
		domain = parse_domain("[g1; 2*g2] OR [g3 - 1]")
		self.assertEqual(parse_domain(domain.unparse()), domain)

	def test_empty_cutset_rejected(self):
		with self.assertRaises(ValidationError):
			DomainSpec(((),))

	def test_syntax_error_in_cutset(self):
		with self.assertRaises(ExpressionSyntaxError):
			parse_domain("[g1; ] OR [g2]")


class UnitTestThresholdPartition(unittest.TestCase):
	def test_state_index(self):
		partition = ThresholdPartition(parse_expr("x"), (-1.0, 1.0))
		states = partition.state_index({"x": np.array([-2.0, -1.0, 0.0, 1.0, 3.0])})
		np.testing.assert_array_equal(states, [0, 0, 1, 1, 2])

	def test_domains_partition(self):
		partition = ThresholdPartition(parse_expr("2*x + 1"), (-1.0, 0.5, 2.0))
		x = np.random.default_rng(3).normal(scale=2, size=10**4)
		hits = sum(domain.contains({"x": x}).astype(int) for domain in partition.domains())
		self.assertTrue(np.all(hits >= 1))
		self.assertLess(np.mean(hits > 1), 1e-3)

	def test_cuts_must_increase(self):
		with self.assertRaises(ValidationError):
			ThresholdPartition(parse_expr("x"), (1.0, 0.0))
