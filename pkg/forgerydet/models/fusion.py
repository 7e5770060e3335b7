"""Confidence-aware fusion of the face and context features.

``weight_face`` (default) feeds ``[f_ctx ; c·f_face]`` to the head, ``weight_ctx``
feeds ``[c·f_ctx ; f_face]`` and ``concat`` ignores ``c``. The head is a two-layer
perceptron ``2d → 64 → 1`` followed by a sigmoid.
"""
from __future__ import annotations

from enum import Enum
from typing import Optional, Tuple

import numpy as np

from forgerydet.core import layers
from forgerydet.core.errors import InvalidArgumentError
from forgerydet.core.params import ParameterStore
from forgerydet.models.modules import Perceptron


class FusionMode(str, Enum):
  WEIGHT_FACE = 'weight_face'
  WEIGHT_CTX = 'weight_ctx'
  CONCAT = 'concat'


class FusionModel:
  prefix = 'fusion'

  def __init__(
    self,
    feature_dim: int = 128,
    hidden: int = 64,
    mode: FusionMode = FusionMode.WEIGHT_FACE,
    params: Optional[ParameterStore] = None
  ) -> None:
    self.feature_dim = feature_dim
    self.mode = FusionMode(mode)
    self.params = params if params is not None else ParameterStore()
    self.head = Perceptron(f'{self.prefix}.head', 2 * feature_dim, hidden, 1)

  def initialize(self, rng: np.random.Generator) -> 'FusionModel':
    self.head.init_params(self.params, rng)
    return self

  def _validate(self, f_face: np.ndarray, f_ctx: np.ndarray, c: np.ndarray) -> None:
    d = self.feature_dim
    if f_face.shape[1:] != (d,) or f_ctx.shape[1:] != (d,):
      raise InvalidArgumentError(f'fusion expects {d}-dim features, got {f_face.shape[1:]} and {f_ctx.shape[1:]}')
    if f_face.shape[0] != f_ctx.shape[0] or c.shape != (f_face.shape[0],):
      raise InvalidArgumentError('fusion inputs disagree on batch size')
    if np.any(~np.isfinite(c)) or np.any(c < 0) or np.any(c > 1):
      raise InvalidArgumentError('confidence must lie in [0, 1]')

  def forward(self, f_face: np.ndarray, f_ctx: np.ndarray, c: np.ndarray):
    dtype = self.params.dtype
    f_face = np.atleast_2d(f_face).astype(dtype, copy=False)
    f_ctx = np.atleast_2d(f_ctx).astype(dtype, copy=False)
    c = np.asarray(c, dtype=dtype).reshape(-1)
    self._validate(f_face, f_ctx, c)
    weight = c[:, np.newaxis]
    if self.mode is FusionMode.WEIGHT_FACE:
      joint = np.concatenate([f_ctx, weight * f_face], axis=1)
    elif self.mode is FusionMode.WEIGHT_CTX:
      joint = np.concatenate([weight * f_ctx, f_face], axis=1)
    else:
      joint = np.concatenate([f_ctx, f_face], axis=1)
    logits, head_cache = self.head.forward(self.params, joint)
    return logits[:, 0], (f_face, f_ctx, c, head_cache)

  def backward(self, dlogits: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns gradients for (f_face, f_ctx, c)."""
    f_face, f_ctx, c, head_cache = cache
    djoint = self.head.backward(self.params, np.asarray(dlogits).reshape(-1, 1), head_cache)
    d = self.feature_dim
    dctx_slot, dface_slot = djoint[:, :d], djoint[:, d:]
    weight = c[:, np.newaxis]
    if self.mode is FusionMode.WEIGHT_FACE:
      return weight * dface_slot, dctx_slot, np.sum(dface_slot * f_face, axis=1)
    if self.mode is FusionMode.WEIGHT_CTX:
      return dface_slot, weight * dctx_slot, np.sum(dctx_slot * f_ctx, axis=1)
    return dface_slot, dctx_slot, np.zeros_like(c)

  def predict(self, f_face: np.ndarray, f_ctx: np.ndarray, c: np.ndarray) -> np.ndarray:
    logits, _ = self.forward(f_face, f_ctx, c)
    return layers.sigmoid(logits)


def fuse(f_face: np.ndarray, f_ctx: np.ndarray, c: float, model: FusionModel) -> float:
  f_face = np.asarray(f_face)
  f_ctx = np.asarray(f_ctx)
  if f_face.ndim != 1 or f_ctx.ndim != 1:
    raise InvalidArgumentError('fuse takes single feature vectors')
  return float(model.predict(f_face[np.newaxis], f_ctx[np.newaxis], np.array([c]))[0])
