from __future__ import annotations

import logging
from typing import Dict, List, Sequence

import numpy as np

from forgerydet.core.errors import InvalidArgumentError, NumericFailureError
from forgerydet.core.params import ParameterStore

logger = logging.getLogger(__name__)


class SGD:
  """Momentum SGD over the parameter namespaces a stage owns.

  ``v ← μ·v + g``, ``θ ← θ − lr·v``. With ``lr == 0`` values are left untouched so a
  zero-rate run reproduces its initialization bit for bit.
  """

  def __init__(self, params: ParameterStore, prefixes: Sequence[str], lr: float, momentum: float = 0.9) -> None:
    if lr < 0:
      raise InvalidArgumentError(f'learning rate must be >= 0, got {lr}')
    if not 0 <= momentum < 1:
      raise InvalidArgumentError(f'momentum must lie in [0, 1), got {momentum}')
    self.params = params
    self.prefixes = list(prefixes)
    self.lr = float(lr)
    self.momentum = float(momentum)
    self.names: List[str] = [name for prefix in self.prefixes for name in params.names(prefix)]
    if not self.names:
      raise InvalidArgumentError(f'no parameters under {self.prefixes}')
    self.velocity: Dict[str, np.ndarray] = {name: np.zeros_like(params[name]) for name in self.names}

  def zero_grad(self) -> None:
    for prefix in self.prefixes:
      self.params.zero_grad(prefix)

  def step(self) -> None:
    for name in self.names:
      grad = self.params.grad(name)
      if not np.all(np.isfinite(grad)):
        raise NumericFailureError(f'non-finite gradient for {name}', name=name)
    self.params.step += 1
    if self.lr == 0.0:
      return
    for name in self.names:
      velocity = self.velocity[name]
      velocity *= self.momentum
      velocity += self.params.grad(name)
      self.params[name][...] -= self.lr * velocity
