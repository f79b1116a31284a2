import itertools
import math
from abc import ABC, abstractmethod
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Union

import numpy as np
from lark import Lark, Token, Transformer, v_args
from lark.exceptions import (
	UnexpectedCharacters,
	UnexpectedEOF,
	UnexpectedInput,
	UnexpectedToken,
	VisitError,
)
from scipy.special import ndtr, ndtri

from ebn_srm.exceptions import ExpressionEvaluationError, ExpressionSyntaxError
from ebn_srm.utils import throw
from ebn_srm.utils.cache import _get_or_set
from ebn_srm.utils.validation import is_strictly_increasing

Bindings = Mapping[str, Union[float, np.ndarray]]

GRAMMAR = r"""
	?expr: sum

	?sum: product
		| sum "+" product -> add
		| sum "-" product -> sub

	?product: unary
		| product "*" unary -> mul
		| product "/" unary -> div

	?unary: power
		| "-" unary -> neg

	?power: atom
		| power "^" exponent -> pow

	?exponent: atom
		| "-" exponent -> neg

	?atom: NUMBER -> number
		| INF -> infinity
		| NAME -> var
		| NAME "(" [sum ("," sum)*] ")" -> call
		| "(" sum ")"

	domain: cutset ("OR" cutset)*
		| sum -> bare_domain

	cutset: "[" sum (";" sum)* "]"

	call_site: NAME "(" [sum ("," sum)*] ")"

	INF: "inf"
	NAME: /[A-Za-z_][A-Za-z0-9_.]*/
	NUMBER: /(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?/

	%import common.WS
	%ignore WS
"""

# name -> arity
FUNCTIONS = {
	"exp": 1,
	"ln": 1,
	"sqrt": 1,
	"abs": 1,
	"min": 2,
	"max": 2,
	"phi": 1,
	"inv_phi": 1,
}

NONSMOOTH_FUNCTIONS = {"abs", "min", "max"}


class Expr(ABC):
	"""A node of a limit-state expression tree."""

	@abstractmethod
	def evaluate(self, bindings: Bindings) -> float | np.ndarray:
		pass

	@abstractmethod
	def variables(self) -> frozenset[str]:
		pass

	@abstractmethod
	def unparse(self) -> str:
		pass

	@abstractmethod
	def substitute(self, mapping: Mapping[str, "Expr | float | str"]) -> "Expr":
		"""Returns a copy with variables replaced by expressions, constants or new names."""
		pass

	@abstractmethod
	def function_names(self) -> frozenset[str]:
		pass

	def is_smooth(self) -> bool:
		return not (self.function_names() & NONSMOOTH_FUNCTIONS)

	def __str__(self) -> str:
		return self.unparse()

	def __add__(self, other) -> "Expr":
		return BinOp("+", self, as_expr(other))

	def __radd__(self, other) -> "Expr":
		return BinOp("+", as_expr(other), self)

	def __sub__(self, other) -> "Expr":
		return BinOp("-", self, as_expr(other))

	def __rsub__(self, other) -> "Expr":
		return BinOp("-", as_expr(other), self)

	def __mul__(self, other) -> "Expr":
		return BinOp("*", self, as_expr(other))

	def __rmul__(self, other) -> "Expr":
		return BinOp("*", as_expr(other), self)

	def __truediv__(self, other) -> "Expr":
		return BinOp("/", self, as_expr(other))

	def __neg__(self) -> "Expr":
		if isinstance(self, Neg):
			return self.operand
		if isinstance(self, Num):
			return Num(-self.value)
		return Neg(self)


@dataclass(frozen=True, eq=True)
class Num(Expr):
	value: float

	def evaluate(self, bindings: Bindings) -> float:
		return self.value

	def variables(self) -> frozenset[str]:
		return frozenset()

	def function_names(self) -> frozenset[str]:
		return frozenset()

	def unparse(self) -> str:
		if self.value < 0:
			return f"(-{Num(-self.value).unparse()})"
		return "inf" if math.isinf(self.value) else repr(self.value)

	def substitute(self, mapping) -> Expr:
		return self


@dataclass(frozen=True, eq=True)
class Var(Expr):
	name: str

	def evaluate(self, bindings: Bindings) -> float | np.ndarray:
		try:
			return bindings[self.name]
		except KeyError:
			raise ExpressionEvaluationError(f"Unbound variable {self.name!r}.", self.name) from None

	def variables(self) -> frozenset[str]:
		return frozenset({self.name})

	def function_names(self) -> frozenset[str]:
		return frozenset()

	def unparse(self) -> str:
		return self.name

	def substitute(self, mapping) -> Expr:
		if self.name not in mapping:
			return self
		return as_expr(mapping[self.name])


@dataclass(frozen=True, eq=True)
class Neg(Expr):
	operand: Expr

	def evaluate(self, bindings: Bindings) -> float | np.ndarray:
		return -self.operand.evaluate(bindings)

	def variables(self) -> frozenset[str]:
		return self.operand.variables()

	def function_names(self) -> frozenset[str]:
		return self.operand.function_names()

	def unparse(self) -> str:
		return f"(-{self.operand.unparse()})"

	def substitute(self, mapping) -> Expr:
		return -self.operand.substitute(mapping)


@dataclass(frozen=True, eq=True)
class BinOp(Expr):
	op: str
	left: Expr
	right: Expr

	def evaluate(self, bindings: Bindings) -> float | np.ndarray:
		a = self.left.evaluate(bindings)
		b = self.right.evaluate(bindings)

		with np.errstate(all="ignore"):
			if self.op == "+":
				return a + b
			if self.op == "-":
				return a - b
			if self.op == "*":
				return a * b
			if self.op == "/":
				if np.any(np.asarray(b) == 0):
					raise ExpressionEvaluationError("Division by zero.", self.unparse())
				return a / b

			a = np.asarray(a, dtype=float)
			b = np.asarray(b, dtype=float)
			if np.any((a < 0) & (b != np.round(b))) or np.any((a == 0) & (b < 0)):
				raise ExpressionEvaluationError("Power outside its domain.", self.unparse())
			return _scalar(np.power(a, b))

	def variables(self) -> frozenset[str]:
		return self.left.variables() | self.right.variables()

	def function_names(self) -> frozenset[str]:
		return self.left.function_names() | self.right.function_names()

	def unparse(self) -> str:
		return f"({self.left.unparse()} {self.op} {self.right.unparse()})"

	def substitute(self, mapping) -> Expr:
		return BinOp(self.op, self.left.substitute(mapping), self.right.substitute(mapping))


@dataclass(frozen=True, eq=True)
class Call(Expr):
	name: str
	args: tuple[Expr, ...]

	def evaluate(self, bindings: Bindings) -> float | np.ndarray:
		values = [np.asarray(arg.evaluate(bindings), dtype=float) for arg in self.args]

		with np.errstate(all="ignore"):
			match self.name:
				case "exp":
					result = np.exp(values[0])
				case "ln":
					if np.any(values[0] <= 0):
						raise ExpressionEvaluationError("Logarithm of a non-positive value.", self.unparse())
					result = np.log(values[0])
				case "sqrt":
					if np.any(values[0] < 0):
						raise ExpressionEvaluationError("Square root of a negative value.", self.unparse())
					result = np.sqrt(values[0])
				case "abs":
					result = np.abs(values[0])
				case "min":
					result = np.minimum(values[0], values[1])
				case "max":
					result = np.maximum(values[0], values[1])
				case "phi":
					result = ndtr(values[0])
				case "inv_phi":
					if np.any((values[0] < 0) | (values[0] > 1)):
						raise ExpressionEvaluationError("inv_phi argument outside [0, 1].", self.unparse())
					result = ndtri(values[0])
				case _:
					raise ExpressionEvaluationError(f"Unknown function {self.name!r}.", self.unparse())

		return _scalar(result)

	def variables(self) -> frozenset[str]:
		return frozenset().union(*(arg.variables() for arg in self.args))

	def function_names(self) -> frozenset[str]:
		return frozenset({self.name}).union(*(arg.function_names() for arg in self.args))

	def unparse(self) -> str:
		return f"{self.name}({', '.join(arg.unparse() for arg in self.args)})"

	def substitute(self, mapping) -> Expr:
		return Call(self.name, tuple(arg.substitute(mapping) for arg in self.args))


def _scalar(value: np.ndarray) -> float | np.ndarray:
	return float(value) if np.ndim(value) == 0 else value


def as_expr(value: "Expr | float | int | str") -> Expr:
	"""Coerces a constant or a variable name to an expression."""

	if isinstance(value, Expr):
		return value
	if isinstance(value, str):
		return Var(value)
	return Num(float(value))


def call(name: str, *args) -> Call:
	return Call(name, tuple(as_expr(arg) for arg in args))


@v_args(inline=True)
class _ToExpr(Transformer):
	"""Builds `Expr` trees from the parse tree, checking function names and arity."""

	validate_calls = True

	def number(self, token: Token) -> Num:
		return Num(float(token))

	def infinity(self) -> Num:
		return Num(math.inf)

	def var(self, token: Token) -> Var:
		return Var(str(token))

	def add(self, a, b):
		return BinOp("+", a, b)

	def sub(self, a, b):
		return BinOp("-", a, b)

	def mul(self, a, b):
		return BinOp("*", a, b)

	def div(self, a, b):
		return BinOp("/", a, b)

	def pow(self, a, b):
		return BinOp("^", a, b)

	def neg(self, a):
		return -a

	def call(self, name: Token, *args) -> Call:
		args = tuple(arg for arg in args if arg is not None)
		if self.validate_calls:
			_check_call(str(name), len(args), name.start_pos or 0)
		return Call(str(name), args)

	def call_site(self, name: Token, *args) -> tuple[str, tuple[Expr, ...]]:
		return str(name), tuple(arg for arg in args if arg is not None)

	def cutset(self, *members) -> tuple[Expr, ...]:
		return tuple(members)

	def domain(self, *cutsets) -> "DomainSpec":
		return DomainSpec(tuple(cutsets))

	def bare_domain(self, expr) -> "DomainSpec":
		return DomainSpec(((expr,),))


class _ToRawExpr(_ToExpr):
	validate_calls = False


def _check_call(name: str, arity: int, position: int) -> None:
	if name not in FUNCTIONS:
		raise ExpressionSyntaxError(f"Unknown function {name!r}.", position)
	if FUNCTIONS[name] != arity:
		raise ExpressionSyntaxError(
			f"Function {name!r} takes {FUNCTIONS[name]} argument(s), got {arity}.", position
		)


_parser = Lark(GRAMMAR, parser="lalr", start=["expr", "domain", "call_site"], maybe_placeholders=True)


def _parse(text: str, start: str, transformer: Transformer):
	try:
		tree = _parser.parse(text, start=start)
	except UnexpectedInput as e:
		raise ExpressionSyntaxError(_describe(e, text), _position(e, text)) from None

	try:
		return transformer.transform(tree)
	except VisitError as e:
		raise e.orig_exc from None


def _position(e: UnexpectedInput, text: str) -> int:
	if isinstance(e, UnexpectedToken) and e.token.type == "$END":
		return len(text)
	if isinstance(e, UnexpectedEOF):
		return len(text)
	if isinstance(e, UnexpectedCharacters):
		return e.pos_in_stream
	return getattr(e, "pos_in_stream", None) or 0


def _describe(e: UnexpectedInput, text: str) -> str:
	position = _position(e, text)
	if position >= len(text):
		return f"Unexpected end of expression at position {position}."
	return f"Unexpected {text[position]!r} at position {position}."


def parse_expr(text: str) -> Expr:
	"""Parses a limit-state expression."""

	return _get_or_set("expr", text, lambda: _parse(text, "expr", _ToExpr()))


def parse_domain(text: str) -> "DomainSpec":
	"""Parses cut-set syntax `[g1; g2] OR [g3]`, or a bare expression for a component event."""

	return _get_or_set("domain", text, lambda: _parse(text, "domain", _ToExpr()))


def parse_call(text: str) -> tuple[str, tuple[Expr, ...]]:
	"""Parses `name(arg, ...)` without checking the function name; nested calls are kept raw."""

	return _parse(text, "call_site", _ToRawExpr())


def check_functions(expr: Expr) -> None:
	"""Raises if the expression calls an unknown function or uses a wrong arity."""

	if isinstance(expr, Call):
		_check_call(expr.name, len(expr.args), 0)
	for child in _children(expr):
		check_functions(child)


def _children(expr: Expr) -> Iterable[Expr]:
	match expr:
		case Neg(operand):
			return (operand,)
		case BinOp(_, left, right):
			return (left, right)
		case Call(_, args):
			return args
	return ()


def eval_expr(expr: Expr, bindings: Bindings) -> float | np.ndarray:
	"""Evaluates the expression; array bindings evaluate elementwise."""

	return expr.evaluate(bindings)


def grad_expr(
	expr: Expr, bindings: Bindings, step: float = 1e-6, names: Sequence[str] | None = None
) -> np.ndarray:
	"""Returns central-difference partials with respect to `names` (default: sorted free variables)."""

	names = list(names) if names is not None else sorted(expr.variables())
	partials = []

	for name in names:
		if name not in expr.variables():
			partials.append(np.zeros_like(np.asarray(bindings.get(name, 0.0), dtype=float)))
			continue

		x = np.asarray(bindings[name], dtype=float)
		h = np.maximum(step * np.abs(x), step)
		upper = expr.evaluate({**bindings, name: x + h})
		lower = expr.evaluate({**bindings, name: x - h})
		partials.append((np.asarray(upper) - np.asarray(lower)) / (2 * h))

	return np.array(partials, dtype=float)


@dataclass(frozen=True, eq=True)
class DomainSpec:
	"""An event {min over cut sets of max over members g(x) <= 0}."""

	cutsets: tuple[tuple[Expr, ...], ...]

	def __post_init__(self) -> None:
		if not self.cutsets:
			throw("A domain needs at least one cut set.")
		if any(not cutset for cutset in self.cutsets):
			throw("Cut sets must not be empty.")

	@classmethod
	def component(cls, expr: Expr | str) -> "DomainSpec":
		return cls(((parse_expr(expr) if isinstance(expr, str) else expr,),))

	@classmethod
	def parallel(cls, members: Iterable[Expr]) -> "DomainSpec":
		return cls((tuple(members),))

	def value(self, bindings: Bindings) -> float | np.ndarray:
		system = None
		for cutset in self.cutsets:
			worst = None
			for member in cutset:
				g = member.evaluate(bindings)
				worst = g if worst is None else np.maximum(worst, g)
			system = worst if system is None else np.minimum(system, worst)

		return _scalar(np.asarray(system, dtype=float))

	def contains(self, bindings: Bindings) -> bool | np.ndarray:
		inside = np.asarray(self.value(bindings)) <= 0
		return bool(inside) if inside.ndim == 0 else inside

	def variables(self) -> frozenset[str]:
		return frozenset().union(*(member.variables() for cutset in self.cutsets for member in cutset))

	def members(self) -> list[Expr]:
		return [member for cutset in self.cutsets for member in cutset]

	def is_component(self) -> bool:
		return len(self.cutsets) == 1 and len(self.cutsets[0]) == 1

	def is_smooth(self) -> bool:
		return all(member.is_smooth() for member in self.members())

	def substitute(self, mapping: Mapping[str, Expr | float | str]) -> "DomainSpec":
		return DomainSpec(tuple(tuple(m.substitute(mapping) for m in cutset) for cutset in self.cutsets))

	def intersection(self, other: "DomainSpec") -> "DomainSpec":
		"""Returns the intersection in cut-set form (pairwise union of cut sets)."""

		return DomainSpec(
			tuple(_unique(a + b) for a, b in itertools.product(self.cutsets, other.cutsets))
		)

	def complement(self) -> "DomainSpec":
		"""Returns the complement in cut-set form, up to the measure-zero boundary."""

		negated = [[-member for member in cutset] for cutset in self.cutsets]
		return DomainSpec(tuple(_unique(choice) for choice in itertools.product(*negated)))

	def unparse(self) -> str:
		return " OR ".join("[" + "; ".join(m.unparse() for m in cutset) + "]" for cutset in self.cutsets)

	def __str__(self) -> str:
		return self.unparse()


def _unique(members: Iterable[Expr]) -> tuple[Expr, ...]:
	return tuple(dict.fromkeys(members))


def intersect_all(domains: Iterable[DomainSpec]) -> DomainSpec:
	"""Returns the intersection of the domains."""

	result = None
	for domain in domains:
		result = domain if result is None else result.intersection(domain)

	if result is None:
		throw("Nothing to intersect.")

	return result


def domain_value(domain: DomainSpec, bindings: Bindings) -> float | np.ndarray:
	"""Returns the system g-value; the event holds where it is <= 0."""

	return domain.value(bindings)


@dataclass(frozen=True, eq=True)
class ThresholdPartition:
	"""States of a discrete node as ordered intervals of a scalar expression."""

	expr: Expr
	cuts: tuple[float, ...]

	def __post_init__(self) -> None:
		if not self.cuts:
			throw("A partition needs at least one cut point.")
		if not is_strictly_increasing(self.cuts):
			throw("Partition cut points must be strictly increasing.")

	@property
	def n_states(self) -> int:
		return len(self.cuts) + 1

	def state_index(self, bindings: Bindings) -> np.ndarray:
		"""Returns the state index of each binding; values on a cut fall in the lower interval."""

		value = np.asarray(self.expr.evaluate(bindings), dtype=float)
		return np.searchsorted(np.asarray(self.cuts), value, side="left")

	def domain(self, k: int) -> DomainSpec:
		members = []
		if k < len(self.cuts):
			members.append(self.expr - self.cuts[k])
		if k > 0:
			members.append(Num(self.cuts[k - 1]) - self.expr)

		return DomainSpec.parallel(members)

	def domains(self) -> list[DomainSpec]:
		return [self.domain(k) for k in range(self.n_states)]
