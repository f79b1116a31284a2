from pathlib import Path

FIXTURES = Path(__file__).parent


def fixture_path(name: str) -> Path:
	"""Returns the path of a bundled model file."""

	return FIXTURES / (name if name.endswith(".ebn") else f"{name}.ebn")


def bundled_models() -> list[str]:
	return sorted(path.stem for path in FIXTURES.glob("*.ebn"))
