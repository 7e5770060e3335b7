"""Central finite differences over a ParameterStore, used as the oracle for every backward pass."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Mapping, Optional

import numpy as np

from forgerydet.core.errors import InvalidArgumentError, NumericFailureError
from forgerydet.core.params import ParameterStore

logger = logging.getLogger(__name__)

LossFn = Callable[[ParameterStore], float]

DEFAULT_EPS = 1e-5
DEFAULT_MAX_COORDS = 64
RELATIVE_ERROR_FLOOR = 1e-6


@dataclass
class NumericGradient:
  name: str
  indices: np.ndarray
  numeric: np.ndarray

  def dense(self, shape) -> np.ndarray:
    """Scatter the sampled estimates into a zero array of the parameter's shape."""
    out = np.zeros(int(np.prod(shape)))
    out[self.indices] = self.numeric
    return out.reshape(shape)


def _sample_indices(size: int, max_coords: Optional[int], rng: np.random.Generator) -> np.ndarray:
  if max_coords is None or size <= max_coords:
    return np.arange(size)
  return np.sort(rng.choice(size, size=max_coords, replace=False))


def finite_diff_grad(
  loss_fn: LossFn,
  params: ParameterStore,
  eps: float = DEFAULT_EPS,
  names: Optional[Iterable[str]] = None,
  max_coords: Optional[int] = DEFAULT_MAX_COORDS,
  seed: int = 0
) -> Dict[str, NumericGradient]:
  """Estimate dL/dθ by (L(θ+eps) − L(θ−eps)) / (2·eps).

  Parameters larger than ``max_coords`` are sampled on a seed-controlled random
  subset of coordinates; pass ``max_coords=None`` to gradient every scalar. Values are
  restored exactly after each gradient.
  """
  if not eps > 0:
    raise InvalidArgumentError(f'eps must be positive, got {eps}')
  if max_coords is not None and max_coords < 1:
    raise InvalidArgumentError(f'max_coords must be >= 1, got {max_coords}')
  rng = np.random.default_rng(seed)
  selected = list(names) if names is not None else params.names()
  gradients: Dict[str, NumericGradient] = {}
  for name in selected:
    value = params[name]
    flat = value.reshape(-1)
    indices = _sample_indices(flat.size, max_coords, rng)
    estimates = np.zeros(indices.size)
    for slot, index in enumerate(indices):
      original = flat[index]
      flat[index] = original + eps
      upper = float(loss_fn(params))
      flat[index] = original - eps
      lower = float(loss_fn(params))
      flat[index] = original
      if not (math.isfinite(upper) and math.isfinite(lower)):
        raise NumericFailureError(f'non-finite loss while perturbing {name}[{index}]', name=name)
      estimates[slot] = (upper - lower) / (2.0 * eps)
    gradients[name] = NumericGradient(name=name, indices=indices, numeric=estimates)
  logger.debug('Estimated %d parameters (%d coordinates)', len(gradients), sum(p.indices.size for p in gradients.values()))
  return gradients


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = RELATIVE_ERROR_FLOOR) -> np.ndarray:
  """Elementwise |a − n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dominating."""
  analytic = np.asarray(analytic, dtype=np.float64)
  numeric = np.asarray(numeric, dtype=np.float64)
  scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
  return np.abs(analytic - numeric) / scale


def _analytic_at(analytic: Mapping[str, np.ndarray], name: str, gradient: NumericGradient) -> np.ndarray:
  if name not in analytic:
    raise InvalidArgumentError(f'no analytic gradient supplied for {name!r}')
  return np.asarray(analytic[name], dtype=np.float64).reshape(-1)[gradient.indices]


def worst_relative_errors(
  gradients: Mapping[str, NumericGradient],
  analytic: Mapping[str, np.ndarray],
  floor: float = RELATIVE_ERROR_FLOOR
) -> Dict[str, float]:
  worst: Dict[str, float] = {}
  for name, gradient in gradients.items():
    errors = relative_error(_analytic_at(analytic, name, gradient), gradient.numeric, floor)
    worst[name] = float(errors.max()) if errors.size else 0.0
  return worst


def worst_absolute_errors(
  gradients: Mapping[str, NumericGradient],
  analytic: Mapping[str, np.ndarray]
) -> Dict[str, float]:
  worst: Dict[str, float] = {}
  for name, gradient in gradients.items():
    errors = np.abs(_analytic_at(analytic, name, gradient) - gradient.numeric)
    worst[name] = float(errors.max()) if errors.size else 0.0
  return worst
