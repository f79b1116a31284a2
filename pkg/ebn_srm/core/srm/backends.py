from abc import ABC, abstractmethod

from ebn_srm.config import BACKENDS, Settings
from ebn_srm.core.srm.srm import (
	EstimateResult,
	FormResult,
	ReliabilityProblem,
	SamplingPolicy,
	form_component,
	is_probability,
	mc_probability,
	system_probability,
)
from ebn_srm.utils import log_error, throw

Result = FormResult | EstimateResult


class BaseBackend(ABC):
	"""An abstract base class for reliability backends."""

	name: str = ""

	def __init__(self, settings: Settings) -> None:
		"""Initializes the backend with the solver settings."""

		self.settings = settings

	@abstractmethod
	def component(self, prob: ReliabilityProblem, seed: int) -> Result:
		"""Solves a single-member problem."""
		pass

	def system(self, prob: ReliabilityProblem, seed: int) -> Result:
		"""Solves a general cut-set problem."""

		return system_probability(prob, "mc", self._policy(self.settings.system_mc_cap), seed)

	def _policy(self, cap: int) -> SamplingPolicy:
		return SamplingPolicy(target_cov=self.settings.target_cov, cap=cap, block_size=self.settings.block_size)

	def _mc(self, prob: ReliabilityProblem, seed: int) -> EstimateResult:
		return mc_probability(prob, self._policy(self.settings.mc_cap), seed)

	def _form(self, prob: ReliabilityProblem) -> FormResult:
		return form_component(
			prob, self.settings.form_tol_g, self.settings.form_tol_u, self.settings.form_max_iter
		)


class FormBackend(BaseBackend):
	"""FORM for component problems, crude Monte Carlo when FORM does not converge."""

	name = "form"

	def component(self, prob: ReliabilityProblem, seed: int) -> Result:
		result = self._form(prob)
		if result.converged:
			return result

		log_error(
			"FORM did not converge",
			f"Falling back to Monte Carlo after {result.iterations} iterations.",
			module="srm",
		)
		return self._mc(prob, seed)


class MonteCarloBackend(BaseBackend):
	"""Crude Monte Carlo with a target coefficient of variation."""

	name = "mc"

	def component(self, prob: ReliabilityProblem, seed: int) -> Result:
		return self._mc(prob, seed)


class ImportanceSamplingBackend(BaseBackend):
	"""Importance sampling centered at the FORM design point."""

	name = "is"

	def component(self, prob: ReliabilityProblem, seed: int) -> Result:
		form = self._form(prob)
		if not form.converged:
			log_error("FORM did not converge", "Importance sampling falls back to Monte Carlo.", module="srm")
			return self._mc(prob, seed)

		return is_probability(prob, form.u_star, self.settings.is_samples, seed, self.settings.block_size)

	def system(self, prob: ReliabilityProblem, seed: int) -> Result:
		return system_probability(
			prob,
			"is",
			self._policy(self.settings.system_mc_cap),
			seed,
			is_samples=self.settings.is_samples,
			form_options={
				"tol_g": self.settings.form_tol_g,
				"tol_u": self.settings.form_tol_u,
				"max_iter": self.settings.form_max_iter,
			},
		)


class ReliabilityBackend:
	"""A reliability backend class that dispatches to a specific backend."""

	def __init__(self, settings: Settings) -> None:
		"""Initializes the dispatcher with the configured backend."""

		self.settings = settings
		self.backend = self._get_backend(settings.backend)

	def _get_backend(self, backend: str) -> BaseBackend | None:
		"""Returns the backend based on its name; None means choose per problem."""

		if backend not in BACKENDS:
			throw(f"Unsupported reliability backend: {backend}")

		match backend:
			case "form":
				return FormBackend(self.settings)
			case "mc":
				return MonteCarloBackend(self.settings)
			case "is":
				return ImportanceSamplingBackend(self.settings)

		return None

	def backend_for(self, prob: ReliabilityProblem) -> BaseBackend:
		"""Returns the backend a problem is solved with."""

		if self.backend is not None:
			return self.backend

		if prob.is_component() and prob.is_smooth():
			return FormBackend(self.settings)

		return MonteCarloBackend(self.settings)

	def solve(self, prob: ReliabilityProblem, seed: int, using: BaseBackend | None = None) -> tuple[float, dict]:
		"""Returns the probability of the problem's event and the provenance of the estimate.

		`using` overrides the configured backend for this problem.
		"""

		if prob.domain is None:
			return 1.0, {"backend": "exact"}

		backend = using or self.backend_for(prob)
		result = backend.component(prob, seed) if prob.is_component() else backend.system(prob, seed)
		return min(max(result.p, 0.0), 1.0), result.provenance()
