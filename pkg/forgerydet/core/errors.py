from __future__ import annotations

from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_IO = 4
EXIT_NUMERIC = 5


class ForgeryDetError(Exception):
  """Base class for every failure the package reports to callers."""

  exit_code = 1


class UsageError(ForgeryDetError):
  exit_code = EXIT_USAGE


class InvalidArgumentError(ForgeryDetError, ValueError):
  """Raised when an operation receives arguments outside its contract."""

  exit_code = EXIT_VALIDATION


class UndefinedMetricError(InvalidArgumentError):
  """Raised when a metric is requested on a set that lacks one of the classes."""


class ManifestError(ForgeryDetError):
  exit_code = EXIT_VALIDATION

  def __init__(self, message: str, line: Optional[int] = None, sample_id: Optional[str] = None) -> None:
    if sample_id:
      message = f'sample {sample_id!r}: {message}'
    if line is not None and f'line {line}' not in message:
      message = f'line {line}: {message}'
    super().__init__(message)
    self.line = line
    self.sample_id = sample_id


class NumericFailureError(ForgeryDetError, ArithmeticError):
  exit_code = EXIT_NUMERIC

  def __init__(self, message: str, name: Optional[str] = None) -> None:
    super().__init__(message)
    self.name = name


class CheckpointFormatError(ForgeryDetError):
  exit_code = EXIT_IO

  def __init__(self, message: str, field: str) -> None:
    super().__init__(f'{message} (field: {field})')
    self.field = field


class ContextLookupError(ForgeryDetError, KeyError):
  exit_code = EXIT_IO

  def __init__(self, sample_id: str) -> None:
    super().__init__(f'no recorded context for sample id {sample_id!r}')
    self.sample_id = sample_id

  def __str__(self) -> str:
    return self.args[0]


class SampleFailureError(ForgeryDetError):
  """Raised when every sample of a batch run failed to load or encode."""

  exit_code = EXIT_IO
