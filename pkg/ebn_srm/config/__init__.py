try:
	import tomllib
except ModuleNotFoundError:  # Python < 3.11
	import tomli as tomllib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from ebn_srm.utils import throw

BACKENDS = ("auto", "form", "mc", "is")


@dataclass(frozen=True)
class Settings:
	backend: str = "auto"
	target_cov: float = 0.05
	mc_cap: int = 10**6
	system_mc_cap: int = 10**7
	is_samples: int = 10**4
	block_size: int = 10**4
	form_tol_g: float = 1e-6
	form_tol_u: float = 1e-4
	form_max_iter: int = 100
	workers: int = 1
	max_failed_cells: int = 0
	enumerate_budget: int = 8
	envelope_warn: int = 15
	envelope_max: int = 20
	allow_large_envelopes: bool = False
	stochastic_samples: int = 10**4
	delta_fraction: float = 0.01
	delta_prior_samples: int = 10**3
	max_joint_entries: int = 2**20
	seed: int = 0

	def validate(self) -> "Settings":
		self.validate_backend()
		self.validate_sampling()
		self.validate_form()
		self.validate_envelope_guard()
		self.validate_workers()

		return self

	def validate_backend(self) -> None:
		"""Validates the reliability backend name."""

		if self.backend not in BACKENDS:
			throw(f"Unknown backend {self.backend!r}; expected one of {', '.join(BACKENDS)}.")

	def validate_sampling(self) -> None:
		"""Validates the sampling budget parameters."""

		if self.target_cov <= 0:
			throw("Target coefficient of variation must be positive.")

		for field in ("mc_cap", "system_mc_cap", "is_samples", "block_size", "stochastic_samples"):
			if getattr(self, field) < 1:
				throw(f"{field} must be at least 1.")

		if not 0 < self.delta_fraction < 1:
			throw("delta_fraction must lie in (0, 1).")

	def validate_form(self) -> None:
		"""Validates the FORM tolerances."""

		if self.form_tol_g <= 0 or self.form_tol_u <= 0:
			throw("FORM tolerances must be positive.")
		if self.form_max_iter < 1:
			throw("form_max_iter must be at least 1.")

	def validate_envelope_guard(self) -> None:
		"""Validates the envelope-size guard."""

		if not 0 < self.envelope_warn <= self.envelope_max:
			throw("envelope_warn must be positive and not exceed envelope_max.")

	def validate_workers(self) -> None:
		"""Validates the worker count."""

		if self.workers < 1:
			throw("workers must be at least 1.")


def get_settings(path: str | Path | None = None, **overrides) -> Settings:
	"""Returns validated settings from defaults, an optional TOML file and keyword overrides."""

	values = {}

	if path:
		with open(path, "rb") as f:
			data = tomllib.load(f)

		values.update(data.get("ebn_srm", data))

	values.update({k: v for k, v in overrides.items() if v is not None})

	known = {f.name for f in fields(Settings)}
	if unknown := set(values) - known:
		throw(f"Unknown settings: {', '.join(sorted(unknown))}.")

	return replace(Settings(), **values).validate()
