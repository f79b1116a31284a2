class EbnError(Exception):
	"""Base class for all errors raised by ebn_srm."""


class ValidationError(EbnError):
	pass


class DoesNotExistError(EbnError):
	pass


class CycleError(ValidationError):
	pass


class ReversalError(ValidationError):
	pass


class DistributionError(ValidationError):
	pass


class ExpressionSyntaxError(ValidationError):
	def __init__(self, message: str, position: int = 0) -> None:
		super().__init__(message)
		self.position = position


class ExpressionEvaluationError(EbnError):
	def __init__(self, message: str, subexpression: str = "") -> None:
		super().__init__(message)
		self.subexpression = subexpression


class ModelFileError(EbnError):
	def __init__(self, message: str, line: int = 0, column: int = 0) -> None:
		super().__init__(f"line {line}, column {column}: {message}" if line else message)
		self.line = line
		self.column = column


class CompilationAbortError(EbnError):
	pass


class MemoryBoundError(EbnError):
	pass


class EvidenceError(ValidationError):
	pass
