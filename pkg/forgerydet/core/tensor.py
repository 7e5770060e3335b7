"""Feature-map values and separable sampled-Gaussian smoothing.

Smoothing along one axis of length ``n`` is expressed as an ``n×n`` operator built
from the truncated sampled kernel and the padding policy's index map, so the
forward pass and its adjoint (used by every backward pass that runs through a
Gaussian) share one cached matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
from cachetools import LRUCache, cached
from scipy.linalg import toeplitz

from forgerydet.core.errors import InvalidArgumentError, NumericFailureError


class Padding(str, Enum):
  REFLECT = 'reflect'
  CIRCULAR = 'circular'
  REPLICATE = 'replicate'


_NUMPY_PAD_MODES = {
  Padding.REFLECT: 'reflect',
  Padding.CIRCULAR: 'wrap',
  Padding.REPLICATE: 'edge'
}


@dataclass(frozen=True)
class FeatureMap:
  """Immutable C×H×W activation map; entries are always finite."""

  data: np.ndarray

  def __post_init__(self) -> None:
    array = np.array(self.data, copy=True)
    if not np.issubdtype(array.dtype, np.floating):
      array = array.astype(np.float64)
    if array.ndim != 3 or min(array.shape) < 1:
      raise InvalidArgumentError(f'FeatureMap needs shape C×H×W with every extent >= 1, got {array.shape}')
    if not np.all(np.isfinite(array)):
      raise NumericFailureError('FeatureMap contains non-finite entries')
    array.setflags(write=False)
    object.__setattr__(self, 'data', array)

  @property
  def shape(self) -> Tuple[int, int, int]:
    return tuple(self.data.shape)  # type: ignore[return-value]

  @property
  def channels(self) -> int:
    return self.data.shape[0]

  @property
  def height(self) -> int:
    return self.data.shape[1]

  @property
  def width(self) -> int:
    return self.data.shape[2]

  def astype(self, dtype) -> 'FeatureMap':
    return FeatureMap(self.data.astype(dtype))


MapLike = Union[FeatureMap, np.ndarray]


def as_array(x: MapLike) -> np.ndarray:
  return x.data if isinstance(x, FeatureMap) else np.asarray(x)


def as_batch(x: MapLike) -> np.ndarray:
  """Lift a single C×H×W map to a batch of one; 4-D arrays pass through."""
  array = as_array(x)
  if array.ndim == 3:
    return array[np.newaxis]
  if array.ndim != 4:
    raise InvalidArgumentError(f'expected a C×H×W map or N×C×H×W batch, got shape {array.shape}')
  return array


@dataclass(frozen=True)
class GaussianSpec:
  sigma: float
  radius: Optional[int] = None
  padding: Padding = Padding.REFLECT

  def __post_init__(self) -> None:
    sigma = float(self.sigma)
    if not math.isfinite(sigma) or sigma <= 0:
      raise InvalidArgumentError(f'sigma must be positive, got {self.sigma}')
    radius = math.ceil(3.0 * sigma) if self.radius is None else int(self.radius)
    if radius < 1:
      raise InvalidArgumentError(f'radius must be >= 1, got {radius}')
    object.__setattr__(self, 'sigma', sigma)
    object.__setattr__(self, 'radius', radius)
    object.__setattr__(self, 'padding', Padding(self.padding))

  @property
  def kernel(self) -> np.ndarray:
    return sampled_gaussian_kernel(self.sigma, self.radius)


@cached(cache=LRUCache(maxsize=128))
def sampled_gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
  offsets = np.arange(-radius, radius + 1, dtype=np.float64)
  kernel = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
  kernel /= kernel.sum()
  kernel.setflags(write=False)
  return kernel


@cached(cache=LRUCache(maxsize=512))
def smoothing_operator(length: int, sigma: float, radius: int, padding: Padding) -> np.ndarray:
  """Dense 1-D smoothing matrix: ``operator @ signal`` smooths a length-``length`` signal."""
  kernel = sampled_gaussian_kernel(sigma, radius)
  padded_length = length + 2 * radius
  first_column = np.zeros(length)
  first_column[0] = kernel[0]
  first_row = np.zeros(padded_length)
  first_row[:kernel.size] = kernel
  band = toeplitz(first_column, first_row)
  source = np.pad(np.arange(length), radius, mode=_NUMPY_PAD_MODES[Padding(padding)])
  fold = np.zeros((padded_length, length))
  fold[np.arange(padded_length), source] = 1.0
  operator = band @ fold
  operator.setflags(write=False)
  return operator


def _operators(shape: Tuple[int, ...], spec: GaussianSpec, dtype) -> Tuple[np.ndarray, np.ndarray]:
  rows = smoothing_operator(shape[-2], spec.sigma, spec.radius, spec.padding).astype(dtype, copy=False)
  cols = smoothing_operator(shape[-1], spec.sigma, spec.radius, spec.padding).astype(dtype, copy=False)
  return rows, cols


def smooth_array(array: np.ndarray, spec: GaussianSpec, adjoint: bool = False) -> np.ndarray:
  """Depthwise smoothing over the last two axes (horizontal pass, then vertical).

  With ``adjoint=True`` applies the transpose operator, i.e. the backward pass of
  the forward smoothing with respect to its input.
  """
  rows, cols = _operators(array.shape, spec, array.dtype)
  if adjoint:
    return rows.T @ (array @ cols)
  return rows @ (array @ cols.T)


def gaussian_smooth(x: MapLike, spec: GaussianSpec) -> MapLike:
  if isinstance(x, FeatureMap):
    return FeatureMap(smooth_array(x.data, spec))
  array = np.asarray(x)
  if array.ndim < 2:
    raise InvalidArgumentError('gaussian_smooth needs at least two spatial axes')
  if not np.all(np.isfinite(array)):
    raise NumericFailureError('gaussian_smooth input contains non-finite entries')
  return smooth_array(array, spec)
