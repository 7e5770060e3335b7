from __future__ import annotations

import math

import numpy as np
import pytest

from forgerydet.core.errors import InvalidArgumentError, NumericFailureError
from forgerydet.core.tensor import FeatureMap, GaussianSpec, Padding, gaussian_smooth, sampled_gaussian_kernel, smooth_array


def sinusoid(period: int, size: int = 64) -> np.ndarray:
  row = np.sin(2.0 * np.pi * np.arange(size) / period)
  return np.tile(row, (size, 1))[np.newaxis]


def amplitude_ratio(output: np.ndarray, signal: np.ndarray) -> float:
  return float(np.sum(output * signal) / np.sum(signal * signal))


@pytest.mark.parametrize('sigma', [0.5, 1.0, 2.5, 7.0, 15.0])
def test_kernel_is_normalized(sigma):
  spec = GaussianSpec(sigma)
  assert spec.radius == math.ceil(3 * sigma)
  assert abs(float(spec.kernel.sum()) - 1.0) < 1e-12
  assert spec.kernel.size == 2 * spec.radius + 1


def test_kernel_is_cached_and_read_only():
  kernel = sampled_gaussian_kernel(1.0, 3)
  assert kernel is sampled_gaussian_kernel(1.0, 3)
  with pytest.raises(ValueError):
    kernel[0] = 1.0


def test_impulse_response_center_is_squared_center_weight():
  x = np.zeros((1, 9, 9))
  x[0, 4, 4] = 1.0
  out = gaussian_smooth(FeatureMap(x), GaussianSpec(1.0, radius=3))
  assert isinstance(out, FeatureMap)
  assert out.data[0, 4, 4] == pytest.approx(0.15925, abs=1e-3)
  assert out.data.sum() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize('sigma', [0.7, 2.0, 5.0])
def test_constant_map_is_fixed_point(sigma):
  x = np.full((2, 12, 10), 5.0)
  out = smooth_array(x, GaussianSpec(sigma, padding=Padding.CIRCULAR))
  np.testing.assert_allclose(out, x, rtol=0, atol=1e-12)


def test_reflect_padding_handles_radius_longer_than_map():
  x = np.full((1, 8, 8), 0.25)
  out = smooth_array(x, GaussianSpec(15.0))
  assert out.shape == x.shape
  np.testing.assert_allclose(out, x, rtol=0, atol=1e-12)


@pytest.mark.parametrize('sigma,period', [(1, 8), (1, 16), (1, 32), (2, 16), (2, 32), (4, 32)])
def test_transfer_function_matches_continuous_gaussian(sigma, period):
  omega = 2.0 * np.pi / period
  assert sigma * omega <= 1.5
  x = sinusoid(period)
  out = smooth_array(x, GaussianSpec(sigma, padding=Padding.CIRCULAR))
  expected = math.exp(-(sigma * omega) ** 2 / 2.0)
  assert amplitude_ratio(out, x) == pytest.approx(expected, rel=0.02)


def test_transfer_worked_value():
  x = sinusoid(16)
  out = smooth_array(x, GaussianSpec(2.0, padding=Padding.CIRCULAR))
  assert amplitude_ratio(out, x) == pytest.approx(0.7346, rel=0.02)


def test_circular_smoothing_conserves_mass(rng):
  spec = GaussianSpec(2.5, padding=Padding.CIRCULAR)
  for _ in range(20):
    x = rng.standard_normal((3, 17, 13))
    out = smooth_array(x, spec)
    l1 = np.abs(x).sum(axis=(1, 2))
    assert np.all(np.abs(out.sum(axis=(1, 2)) - x.sum(axis=(1, 2))) <= 1e-9 * l1)


def test_smoothing_is_linear(rng):
  spec = GaussianSpec(1.5)
  x, y = rng.standard_normal((2, 3, 11, 14))
  left = smooth_array(2.5 * x - 0.75 * y, spec)
  right = 2.5 * smooth_array(x, spec) - 0.75 * smooth_array(y, spec)
  np.testing.assert_allclose(left, right, rtol=0, atol=1e-9)


def test_circular_smoothing_commutes_with_shifts(rng):
  spec = GaussianSpec(1.0, padding=Padding.CIRCULAR)
  x = rng.standard_normal((2, 16, 16))
  shifted_first = smooth_array(np.roll(x, (3, -5), axis=(1, 2)), spec)
  shifted_after = np.roll(smooth_array(x, spec), (3, -5), axis=(1, 2))
  np.testing.assert_allclose(shifted_first, shifted_after, rtol=0, atol=1e-12)


def test_smoothing_is_depthwise(rng):
  spec = GaussianSpec(2.0)
  x = rng.standard_normal((3, 10, 10))
  out = smooth_array(x, spec)
  for channel in range(3):
    np.testing.assert_allclose(out[channel], smooth_array(x[channel:channel + 1], spec)[0], rtol=0, atol=1e-12)


def test_adjoint_operator_is_transpose(rng):
  spec = GaussianSpec(1.5, padding=Padding.REPLICATE)
  x = rng.standard_normal((1, 9, 7))
  y = rng.standard_normal((1, 9, 7))
  forward = float(np.sum(smooth_array(x, spec) * y))
  adjoint = float(np.sum(x * smooth_array(y, spec, adjoint=True)))
  assert forward == pytest.approx(adjoint, abs=1e-12)


@pytest.mark.parametrize('kwargs', [{'sigma': 0.0}, {'sigma': -1.0}, {'sigma': float('nan')}, {'sigma': 1.0, 'radius': 0}])
def test_invalid_gaussian_spec(kwargs):
  with pytest.raises(InvalidArgumentError):
    GaussianSpec(**kwargs)


def test_feature_map_rejects_non_finite_and_is_frozen():
  with pytest.raises(NumericFailureError):
    FeatureMap(np.array([[[np.nan]]]))
  with pytest.raises(InvalidArgumentError):
    FeatureMap(np.zeros((4, 4)))
  fmap = FeatureMap(np.zeros((1, 2, 2)))
  with pytest.raises(ValueError):
    fmap.data[0, 0, 0] = 1.0
  assert fmap.shape == (1, 2, 2)


def test_gaussian_smooth_rejects_non_finite_arrays():
  with pytest.raises(NumericFailureError):
    gaussian_smooth(np.full((1, 4, 4), np.inf), GaussianSpec(1.0))
