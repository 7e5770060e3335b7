from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from forgerydet.core.errors import InvalidArgumentError


@dataclass
class ParameterEntry:
  value: np.ndarray
  grad: np.ndarray

  @property
  def shape(self) -> Tuple[int, ...]:
    return tuple(self.value.shape)


class ParameterStore:
  """Named trainable arrays with gradient slots, kept in insertion order.

  Names are dotted namespaces (``face.moe0.gate.w``); training stages select the
  namespace they own by prefix. The store is single-writer: callers must not
  mutate it concurrently with a training step.
  """

  def __init__(self, dtype=np.float32) -> None:
    self.dtype = np.dtype(dtype)
    self.step = 0
    self._entries: Dict[str, ParameterEntry] = {}

  def add(self, name: str, value: np.ndarray) -> np.ndarray:
    if name in self._entries:
      raise InvalidArgumentError(f'duplicate parameter name {name!r}')
    array = np.array(value, dtype=self.dtype, copy=True)
    self._entries[name] = ParameterEntry(value=array, grad=np.zeros_like(array))
    return array

  def __contains__(self, name: str) -> bool:
    return name in self._entries

  def __getitem__(self, name: str) -> np.ndarray:
    try:
      return self._entries[name].value
    except KeyError:
      raise InvalidArgumentError(f'unknown parameter {name!r}') from None

  def __len__(self) -> int:
    return len(self._entries)

  def __iter__(self) -> Iterator[str]:
    return iter(self._entries)

  def entry(self, name: str) -> ParameterEntry:
    self[name]
    return self._entries[name]

  def grad(self, name: str) -> np.ndarray:
    return self.entry(name).grad

  def names(self, prefix: Optional[str] = None) -> List[str]:
    if not prefix:
      return list(self._entries)
    return [name for name in self._entries if name == prefix or name.startswith(prefix + '.')]

  def set_value(self, name: str, value: np.ndarray) -> None:
    entry = self.entry(name)
    array = np.asarray(value, dtype=self.dtype)
    if array.shape != entry.value.shape:
      raise InvalidArgumentError(f'shape mismatch for {name!r}: {array.shape} vs {entry.value.shape}')
    entry.value[...] = array

  def accumulate(self, name: str, grad: np.ndarray) -> None:
    entry = self.entry(name)
    entry.grad += np.asarray(grad, dtype=self.dtype).reshape(entry.grad.shape)

  def zero_grad(self, prefix: Optional[str] = None) -> None:
    for name in self.names(prefix):
      self._entries[name].grad[...] = 0

  def astype(self, dtype) -> 'ParameterStore':
    clone = ParameterStore(dtype=dtype)
    clone.step = self.step
    for name, entry in self._entries.items():
      clone.add(name, entry.value)
    return clone

  def copy(self) -> 'ParameterStore':
    return self.astype(self.dtype)

  def subset(self, prefix: str) -> 'ParameterStore':
    clone = ParameterStore(dtype=self.dtype)
    clone.step = self.step
    for name in self.names(prefix):
      clone.add(name, self._entries[name].value)
    return clone

  def update(self, other: 'ParameterStore') -> None:
    """Adopt every entry of ``other``; names already present are overwritten in place."""
    for name in other:
      if name in self._entries:
        self.set_value(name, other[name])
      else:
        self.add(name, other[name])

  def fingerprint(self, prefix: Optional[str] = None) -> str:
    digest = hashlib.sha256()
    for name in self.names(prefix):
      value = self._entries[name].value
      digest.update(name.encode('utf-8'))
      digest.update(str(value.shape).encode('ascii'))
      digest.update(np.ascontiguousarray(value).tobytes())
    return digest.hexdigest()

  def equals(self, other: 'ParameterStore') -> bool:
    if self.step != other.step or list(self) != list(other):
      return False
    for name in self:
      left, right = self[name], other[name]
      if left.dtype != right.dtype or left.shape != right.shape or left.tobytes() != right.tobytes():
        return False
    return True
