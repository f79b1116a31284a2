import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from ebn_srm.core.dist.dist import ChainBlock, JointChain, JointSpec, Marginal, MarginalSpec
from ebn_srm.core.dist.normal import std_cdf
from ebn_srm.core.lsf.lsf import DomainSpec, Expr, Var, call
from ebn_srm.exceptions import ValidationError
from ebn_srm.utils import executor_context, make_rng, run_ordered, throw

AUX_PREFIX = "_phi"
ARMIJO_A = 0.1
ARMIJO_B = 0.5
MERIT_GAMMA = 2.0
MAX_HALVINGS = 30


@dataclass(frozen=True, eq=False)
class ReliabilityProblem:
	"""Pr[x in domain] for x given by a conditional chain, plus auxiliary standard normals."""

	chain: JointChain
	domain: DomainSpec | None
	constants: Mapping[str, float] = field(default_factory=dict)
	aux: tuple[str, ...] = ()

	@classmethod
	def from_joint(cls, joint: JointSpec, names: list[str], domain: DomainSpec | None) -> "ReliabilityProblem":
		specs = tuple(_spec_of(m) for m in joint.marginals)
		return cls(JointChain((ChainBlock(tuple(names), specs, joint.correlation),)), domain)

	@classmethod
	def standard_normal(cls, names: list[str], domain: DomainSpec | None) -> "ReliabilityProblem":
		"""Independent standard normal variables, so u-space and x-space coincide."""

		specs = tuple(MarginalSpec.of("normal", 0.0, 1.0) for _ in names)
		return cls(JointChain((ChainBlock(tuple(names), specs),)), domain)

	@property
	def dim(self) -> int:
		return self.chain.dim + len(self.aux)

	@property
	def aux_phi(self) -> bool:
		return bool(self.aux)

	def values(self, u) -> dict:
		u = np.atleast_2d(np.asarray(u, dtype=float))
		values = self.chain.transform(u[:, : self.chain.dim], self.constants)
		for k, name in enumerate(self.aux):
			values[name] = u[:, self.chain.dim + k]
		return values

	def g(self, u) -> np.ndarray:
		"""System g-value of standard normal rows; inside the domain where <= 0."""

		u = np.atleast_2d(np.asarray(u, dtype=float))
		if self.domain is None:
			return -np.ones(len(u))
		return np.broadcast_to(np.asarray(self.domain.value(self.values(u)), dtype=float), (len(u),))

	def is_component(self) -> bool:
		return self.domain is not None and self.domain.is_component()

	def is_smooth(self) -> bool:
		return self.domain is None or self.domain.is_smooth()

	def canonical_key(self) -> tuple:
		"""A key equal for problems that differ only by variable names."""

		names = self.chain.names + list(self.aux)
		mapping = {name: f"v{k}" for k, name in enumerate(names)}
		mapping |= dict(self.constants)
		blocks = tuple(
			(
				tuple(mapping[name] for name in block.names),
				tuple(spec.substitute(mapping).unparse() for spec in block.specs),
				block.correlation.tobytes(),
			)
			for block in self.chain.blocks
		)
		domain = self.domain.substitute(mapping).unparse() if self.domain else None
		return blocks, domain, len(self.aux)

	def with_domain(self, domain: DomainSpec | None) -> "ReliabilityProblem":
		return ReliabilityProblem(self.chain, domain, self.constants, self.aux)


def _spec_of(marginal: Marginal) -> MarginalSpec:
	base = _spec_of(marginal.base) if marginal.base is not None else None
	return MarginalSpec.of(marginal.family, *(float(p) for p in marginal.params), base=base)


@dataclass
class FormResult:
	beta: float
	u_star: np.ndarray
	alpha: np.ndarray
	iterations: int
	converged: bool
	p: float

	def provenance(self) -> dict:
		return {"backend": "form", "beta": self.beta, "iterations": self.iterations, "converged": self.converged}


@dataclass
class EstimateResult:
	p: float
	cov: float
	n: int
	seed: int
	zero_hits: bool = False
	method: str = "mc"

	def provenance(self) -> dict:
		return {
			"backend": self.method,
			"cov": self.cov,
			"n": self.n,
			"seed": self.seed,
			"zero_hits": self.zero_hits,
		}


@dataclass(frozen=True)
class SamplingPolicy:
	"""Fixed sample count, or doubling until the target coefficient of variation or the cap."""

	n: int | None = None
	target_cov: float | None = 0.05
	cap: int = 10**6
	block_size: int = 10**4

	def __post_init__(self) -> None:
		if self.n is None and self.target_cov is None:
			throw("A sampling policy needs a sample count or a target coefficient of variation.")


def _gradient(g: Callable, u: np.ndarray, step: float) -> np.ndarray:
	h = np.maximum(step * np.abs(u), step)
	offsets = np.diag(h)
	values = g(np.vstack([u + offsets, u - offsets]))
	n = len(u)
	return (values[:n] - values[n:]) / (2 * h)


def form_component(
	prob: ReliabilityProblem,
	tol_g: float = 1e-6,
	tol_u: float = 1e-4,
	max_iter: int = 100,
	step: float = 1e-6,
	g: Callable | None = None,
) -> FormResult:
	"""Finds the design point with the improved HL-RF iteration and an Armijo line search."""

	g = g or prob.g
	u = np.zeros(prob.dim)
	g0 = float(g(u)[0])
	scale = abs(g0) if g0 != 0 else 1.0
	c = 0.0
	alpha = np.zeros(prob.dim)

	for iteration in range(1, max_iter + 1):
		value = float(g(u)[0])
		grad = _gradient(g, u, step)
		norm = float(np.linalg.norm(grad))
		# no search direction; u stays put and the run ends unconverged at max_iter
		if not np.isfinite(norm) or norm < 1e-300:
			continue

		alpha = -grad / norm
		if abs(value) / scale < tol_g and np.linalg.norm(u - (alpha @ u) * alpha) < tol_u:
			return _form_result(g0, u, alpha, iteration, True)

		d = (grad @ u - value) / norm**2 * grad - u
		if value != 0:
			c = max(c, MERIT_GAMMA * max(np.linalg.norm(u) / norm, 0.5 * np.linalg.norm(u + d) ** 2 / abs(value)))
		else:
			c = max(c, MERIT_GAMMA * np.linalg.norm(u) / norm)

		merit = 0.5 * u @ u + c * abs(value)
		slope = (u + c * np.sign(value) * grad) @ d
		lam = 1.0
		for _ in range(MAX_HALVINGS):
			trial = u + lam * d
			if 0.5 * trial @ trial + c * abs(float(g(trial)[0])) - merit <= ARMIJO_A * lam * slope:
				break
			lam *= ARMIJO_B
		u = u + lam * d

	return _form_result(g0, u, alpha, max_iter, False)


def _form_result(g0: float, u: np.ndarray, alpha: np.ndarray, iterations: int, converged: bool) -> FormResult:
	beta = math.copysign(float(np.linalg.norm(u)), g0) if g0 != 0 else 0.0
	return FormResult(beta, u.copy(), alpha, iterations, converged, float(std_cdf(-beta)))


def _block_sizes(n: int, block_size: int) -> list[int]:
	return [block_size] * (n // block_size) + ([n % block_size] if n % block_size else [])


def _sample_blocks(
	prob: ReliabilityProblem,
	seed: int,
	start: int,
	sizes: list[int],
	center: np.ndarray | None,
	workers: int,
) -> list[tuple[float, float, int]]:
	"""Returns (sum of weighted indicators, sum of their squares, count) per block, in block order."""

	def run(item: tuple[int, int]) -> tuple[float, float, int]:
		index, size = item
		z = make_rng(seed, index).standard_normal((size, prob.dim))
		if center is None:
			hits = prob.g(z) <= 0
			return float(hits.sum()), float(hits.sum()), size

		v = z + center
		w = np.exp(-v @ center + 0.5 * center @ center)
		values = np.where(prob.g(v) <= 0, w, 0.0)
		return float(values.sum()), float((values * values).sum()), size

	with executor_context(workers) as executor:
		return run_ordered(executor, run, [(start + k, size) for k, size in enumerate(sizes)])


def mc_probability(
	prob: ReliabilityProblem, policy: SamplingPolicy | None = None, seed: int = 0, workers: int = 1
) -> EstimateResult:
	"""Crude Monte Carlo in standard normal space."""

	policy = policy or SamplingPolicy()
	if policy.n is not None:
		sizes = _block_sizes(policy.n, policy.block_size)
		results = _sample_blocks(prob, seed, 0, sizes, None, workers)
		return _mc_estimate(results, seed)

	n = min(policy.block_size, policy.cap)
	results = _sample_blocks(prob, seed, 0, _block_sizes(n, policy.block_size), None, workers)
	while True:
		estimate = _mc_estimate(results, seed)
		if estimate.cov <= policy.target_cov or estimate.n >= policy.cap:
			return estimate

		extra = min(estimate.n, policy.cap - estimate.n)
		results += _sample_blocks(prob, seed, len(results), _block_sizes(extra, policy.block_size), None, workers)


def _mc_estimate(results: list[tuple[float, float, int]], seed: int) -> EstimateResult:
	hits = sum(r[0] for r in results)
	n = sum(r[2] for r in results)
	if hits == 0:
		return EstimateResult(0.0, math.inf, n, seed, zero_hits=True)

	p = hits / n
	return EstimateResult(p, math.sqrt((1 - p) / (p * n)), n, seed)


def is_probability(
	prob: ReliabilityProblem, center, n: int = 10**4, seed: int = 0, block_size: int = 10**4, workers: int = 1
) -> EstimateResult:
	"""Importance sampling with a unit-variance normal density shifted to `center`."""

	center = np.asarray(center, dtype=float)
	if center.shape != (prob.dim,) or not np.all(np.isfinite(center)):
		throw("Importance sampling center must be a finite point of the problem's dimension.")

	results = _sample_blocks(prob, seed, 0, _block_sizes(n, block_size), center, workers)
	total = sum(r[0] for r in results)
	squares = sum(r[1] for r in results)
	if total == 0:
		return EstimateResult(0.0, math.inf, n, seed, zero_hits=True, method="is")

	p = total / n
	variance = max(squares / n - p * p, 0.0)
	return EstimateResult(min(p, 1.0), math.sqrt(variance / n) / p, n, seed, method="is")


def reduce_total_probability(
	pmf_expr: Expr, prob: ReliabilityProblem, check_samples: int = 256, seed: int = 0
) -> ReliabilityProblem:
	"""Appends an auxiliary standard normal x with the event {x + inv_phi(1 - p(.)) <= 0}.

	The augmented event has probability E[p(.)] under the problem's distribution, intersected
	with the problem's own domain when it has one.
	"""

	if check_samples:
		z = make_rng(seed, -1).standard_normal((check_samples, prob.dim))
		p = np.asarray(pmf_expr.evaluate(prob.values(z)), dtype=float)
		if np.any((p < 0) | (p > 1)):
			throw("Probability expression evaluates outside [0, 1].", ValidationError)

	name = f"{AUX_PREFIX}{len(prob.aux)}"
	event = DomainSpec.component(Var(name) + call("inv_phi", 1.0 - pmf_expr))
	domain = event if prob.domain is None else prob.domain.intersection(event)
	return ReliabilityProblem(prob.chain, domain, prob.constants, prob.aux + (name,))


def smoothed_g(prob: ReliabilityProblem, sharpness: float = 50.0) -> Callable:
	"""A differentiable surrogate of the min-max system function (log-sum-exp).

	The smoothing temperature is fixed from the member values at the origin.
	"""

	def members(u) -> list[np.ndarray]:
		u = np.atleast_2d(u)
		values = prob.values(u)
		return [
			np.column_stack([np.broadcast_to(np.asarray(m.evaluate(values), dtype=float), (len(u),)) for m in cutset])
			for cutset in prob.domain.cutsets
		]

	scale = max(float(np.max(np.abs(cutset))) for cutset in members(np.zeros(prob.dim)))
	t = sharpness / max(scale, 1e-12) if np.isfinite(scale) else sharpness

	def g(u):
		worst = np.column_stack([_soft_max(cutset, t) for cutset in members(u)])
		return -_soft_max(-worst, t)

	return g


def _soft_max(values: np.ndarray, t: float) -> np.ndarray:
	top = values.max(axis=1)
	return top + np.log(np.exp(t * (values - top[:, None])).sum(axis=1)) / t


def system_probability(
	prob: ReliabilityProblem,
	method: str = "mc",
	policy: SamplingPolicy | None = None,
	seed: int = 0,
	is_samples: int = 10**4,
	workers: int = 1,
	form_options: Mapping | None = None,
) -> EstimateResult:
	"""Probability of a general cut-set event, by crude sampling or importance sampling at its design point."""

	policy = policy or SamplingPolicy(target_cov=0.05, cap=10**7)
	if method == "mc" or prob.domain is None:
		return mc_probability(prob, policy, seed, workers)

	if method != "is":
		throw(f"Unknown system method {method!r}.")

	g = prob.g if prob.is_component() and prob.is_smooth() else smoothed_g(prob)
	form = form_component(prob, g=g, **(form_options or {}))
	if not form.converged:
		return mc_probability(prob, policy, seed, workers)

	return is_probability(prob, form.u_star, is_samples, seed, policy.block_size, workers)
