from __future__ import annotations

import numpy as np
import pytest

from forgerydet.core.errors import InvalidArgumentError, NumericFailureError
from forgerydet.core.gradcheck import finite_diff_grad, relative_error, worst_absolute_errors, worst_relative_errors
from forgerydet.core.params import ParameterStore
from forgerydet.core.tensor import GaussianSpec, smooth_array


def test_quadratic_gradient():
  store = ParameterStore(np.float64)
  store.add('theta', np.array([3.0]))
  gradients = finite_diff_grad(lambda p: float(p['theta'][0] ** 2), store)
  assert gradients['theta'].numeric[0] == pytest.approx(6.0, abs=1e-6)
  assert store['theta'][0] == 3.0


def test_constant_loss_has_zero_gradient():
  store = ParameterStore(np.float64)
  store.add('a', np.ones((2, 3)))
  store.add('b', np.zeros(4))
  gradients = finite_diff_grad(lambda p: 4.2, store)
  assert all(np.all(gradient.numeric == 0.0) for gradient in gradients.values())
  assert gradients['a'].dense((2, 3)).shape == (2, 3)


def test_smoothing_backward_matches_finite_differences(rng):
  spec = GaussianSpec(1.5)
  store = ParameterStore(np.float64)
  store.add('x', rng.standard_normal((2, 6, 7)))

  def loss(params: ParameterStore) -> float:
    return float(np.sum(smooth_array(params['x'], spec) ** 2))

  analytic = 2.0 * smooth_array(smooth_array(store['x'], spec), spec, adjoint=True)
  gradients = finite_diff_grad(loss, store, max_coords=None)
  assert gradients['x'].indices.size == 84
  assert worst_relative_errors(gradients, {'x': analytic})['x'] <= 1e-4


def test_large_parameters_are_subsampled_deterministically():
  store = ParameterStore(np.float64)
  store.add('w', np.zeros(200))
  first = finite_diff_grad(lambda p: float(np.sum(p['w'])), store, max_coords=64, seed=3)
  second = finite_diff_grad(lambda p: float(np.sum(p['w'])), store, max_coords=64, seed=3)
  assert first['w'].indices.size == 64
  assert np.unique(first['w'].indices).size == 64
  np.testing.assert_array_equal(first['w'].indices, second['w'].indices)
  np.testing.assert_allclose(first['w'].numeric, 1.0, atol=1e-8)


def test_non_finite_loss_names_the_parameter():
  store = ParameterStore(np.float64)
  store.add('safe', np.array([1.0]))
  store.add('edge', np.array([0.0]))

  def loss(params: ParameterStore) -> float:
    return float('nan') if params['edge'][0] < 0 else float(params['safe'][0] + params['edge'][0])

  with pytest.raises(NumericFailureError) as info:
    finite_diff_grad(loss, store)
  assert info.value.name == 'edge'


def test_invalid_eps():
  store = ParameterStore(np.float64)
  store.add('x', np.zeros(1))
  with pytest.raises(InvalidArgumentError):
    finite_diff_grad(lambda p: 0.0, store, eps=0.0)


def test_relative_error_floor():
  assert relative_error(np.array([0.0]), np.array([1e-8]))[0] == pytest.approx(1e-2)
  assert relative_error(np.array([0.0]), np.array([1e-5]))[0] == pytest.approx(1.0)
  assert relative_error(np.array([2.0]), np.array([1.0]))[0] == pytest.approx(0.5)


def test_missing_analytic_gradient_is_rejected():
  store = ParameterStore(np.float64)
  store.add('x', np.zeros(2))
  gradients = finite_diff_grad(lambda p: 0.0, store)
  with pytest.raises(InvalidArgumentError):
    worst_relative_errors(gradients, {})


def test_wrong_small_gradient_is_not_hidden_by_the_floor():
  store = ParameterStore(np.float64)
  store.add('x', np.array([0.5]))

  def loss(params: ParameterStore) -> float:
    return float(1e-4 * params['x'][0] ** 2)

  gradients = finite_diff_grad(loss, store)
  assert worst_relative_errors(gradients, {'x': np.array([2e-4])})['x'] == pytest.approx(0.5, rel=1e-3)
  assert worst_relative_errors(gradients, {'x': np.array([1e-4])})['x'] <= 1e-4
  assert worst_absolute_errors(gradients, {'x': np.array([2e-4])})['x'] == pytest.approx(1e-4, rel=1e-3)
