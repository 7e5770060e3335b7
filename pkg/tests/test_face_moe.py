from __future__ import annotations

import math

import numpy as np
import pytest

from forgerydet.core.errors import InvalidArgumentError
from forgerydet.core.gradcheck import finite_diff_grad, worst_relative_errors
from forgerydet.core.params import ParameterStore
from forgerydet.core.tensor import GaussianSpec, smooth_array
from forgerydet.models.face_moe import (
  EXPERT_NAMES,
  ExpertConfig,
  ExpertKind,
  FaceBranchModel,
  FaceConfig,
  GateParams,
  GateScores,
  MoELayer,
  fine_energy_ratio,
  fine_energy_ratio_backward,
  bce_from_logits,
  bce_loss,
  expert_catalog,
  face_forward,
  gate_forward,
  moe_forward
)
from forgerydet.pipeline.verification import run_gradcheck

SMALL_FACE = FaceConfig(channels=4, embed_dim=6, input_size=16, controller_hidden=4)


def _layer(rng, channels=4, names=EXPERT_NAMES):
  store = ParameterStore(np.float64)
  catalog = expert_catalog()
  layer = MoELayer('moe', channels, [catalog[name] for name in names], hidden=4)
  layer.init_params(store, rng)
  return layer, store


def test_catalog_has_two_rgb_and_two_adalog_experts():
  catalog = expert_catalog()
  assert tuple(catalog) == EXPERT_NAMES
  assert [c.kernel for c in catalog.values() if c.kind is ExpertKind.RGB_CONV] == [3, 9]
  assert catalog['adalog_fine'].bank.sigmas == (1.0, 4.0, 7.0)
  assert catalog['adalog_coarse'].bank.sigmas == (9.0, 12.0, 15.0)


def test_expert_config_validation():
  with pytest.raises(InvalidArgumentError):
    ExpertConfig('even', ExpertKind.RGB_CONV, kernel=4)
  with pytest.raises(InvalidArgumentError):
    ExpertConfig('bankless', ExpertKind.ADALOG)


def test_gate_scores_lie_on_simplex(rng):
  layer, store = _layer(rng)
  scores = gate_forward(rng.standard_normal((4, 9, 9)), layer.gate_params(store))
  assert len(scores) == 4
  assert scores.pi.sum() == pytest.approx(1.0)
  assert np.all(scores.pi > 0.0)


def test_zero_gate_weights_give_uniform_scores(rng):
  params = GateParams(w=np.zeros((4, 3, 1, 1)), b=np.zeros(4))
  scores = gate_forward(rng.standard_normal((3, 5, 5)), params)
  np.testing.assert_allclose(scores.pi, 0.25)


def test_gate_scores_reject_points_off_the_simplex():
  with pytest.raises(InvalidArgumentError):
    GateScores(np.array([0.7, 0.7]))
  with pytest.raises(InvalidArgumentError):
    GateScores(np.array([1.5, -0.5]))


def test_forced_one_hot_gate_selects_one_expert(rng):
  layer, store = _layer(rng)
  x = rng.standard_normal((4, 10, 10))
  for k, expert in enumerate(layer.experts):
    pi = np.zeros(4)
    pi[k] = 1.0
    expected, _ = expert.forward(store, x[np.newaxis])
    np.testing.assert_allclose(moe_forward(x, layer, store, pi).data, expected[0], atol=1e-12)


def test_mixture_is_linear_in_gate_scores(rng):
  layer, store = _layer(rng)
  x = rng.standard_normal((4, 8, 8))
  first = np.array([0.1, 0.2, 0.3, 0.4])
  second = np.array([0.4, 0.3, 0.2, 0.1])
  blended = moe_forward(x, layer, store, 0.5 * first + 0.5 * second).data
  halves = 0.5 * moe_forward(x, layer, store, first).data + 0.5 * moe_forward(x, layer, store, second).data
  np.testing.assert_allclose(blended, halves, atol=1e-12)


def test_forced_gate_shape_is_checked(rng):
  layer, store = _layer(rng)
  with pytest.raises(InvalidArgumentError):
    layer.forward(store, rng.standard_normal((2, 4, 8, 8)), np.full((2, 3), 1.0 / 3.0))


def test_layer_rejects_empty_or_duplicate_experts():
  catalog = expert_catalog()
  with pytest.raises(InvalidArgumentError):
    MoELayer('moe', 4, [])
  with pytest.raises(InvalidArgumentError):
    MoELayer('moe', 4, [catalog['rgb3'], catalog['rgb3']])


def test_parameter_names_follow_layer_namespace(rng):
  layer, store = _layer(rng)
  names = store.names()
  assert 'moe.gate.w' in names and 'moe.gate.b' in names
  np.testing.assert_array_equal(store['moe.gate.v'], [0.0, 0.0, 1.0, 1.0])
  assert 'moe.rgb9.w' in names
  assert 'moe.adalog_coarse.ctrl_b.w' in names


def test_moe_gradients_match_finite_differences():
  report = run_gradcheck('moe', seed=1)
  assert report.passed, report.groups
  assert report.failing() == []


def test_broken_gate_backward_is_detected(monkeypatch):
  monkeypatch.setattr('forgerydet.core.layers.softmax_backward', lambda dout, probs, axis: np.zeros_like(dout))
  report = run_gradcheck('moe', seed=1)
  assert 'gate' in report.failing()


def test_face_branch_shapes_and_gate_output(rng):
  model = FaceBranchModel(SMALL_FACE).initialize(rng)
  output = model.forward(rng.uniform(size=(3, 3, 16, 16)).astype(np.float32))
  assert output.logits.shape == (3,)
  assert output.features.shape == (3, 6)
  assert len(output.gate_scores) == 1
  np.testing.assert_allclose(output.gate_scores[0].sum(axis=1), 1.0, atol=1e-5)
  assert np.all((output.probabilities > 0.0) & (output.probabilities < 1.0))


def test_face_branch_with_expert_subset(rng):
  config = FaceConfig(channels=4, embed_dim=6, input_size=16, controller_hidden=4, experts=('rgb3', 'adalog_fine'))
  model = FaceBranchModel(config).initialize(rng)
  output = model.forward(rng.uniform(size=(2, 3, 16, 16)).astype(np.float32))
  assert output.gate_scores[0].shape == (2, 2)
  with pytest.raises(InvalidArgumentError):
    FaceBranchModel(FaceConfig(experts=('rgb5',)))


def test_predict_matches_forward(rng):
  model = FaceBranchModel(SMALL_FACE).initialize(rng)
  images = rng.uniform(size=(5, 3, 16, 16)).astype(np.float32)
  full = model.forward(images)
  chunked = model.predict(images, batch_size=2)
  np.testing.assert_allclose(chunked.logits, full.logits, rtol=1e-5, atol=1e-6)
  np.testing.assert_allclose(chunked.gate_scores[0], full.gate_scores[0], rtol=1e-5, atol=1e-6)


def test_face_forward_returns_features_and_probability(rng):
  model = FaceBranchModel(SMALL_FACE).initialize(rng)
  features, y = face_forward(rng.uniform(size=(3, 16, 16)), model)
  assert features.shape == (6,)
  assert 0.0 < y < 1.0
  with pytest.raises(InvalidArgumentError):
    face_forward(rng.uniform(size=(1, 16, 16)), model)


def test_full_face_branch_gradients(rng):
  store = ParameterStore(np.float64)
  model = FaceBranchModel(SMALL_FACE, store).initialize(rng)
  for name in store.names():
    store[name][...] += rng.normal(0.0, 0.1, size=store[name].shape)
  x = rng.uniform(size=(2, 3, 16, 16))
  w = rng.standard_normal(2)
  r = rng.standard_normal((2, 6))

  def loss(params: ParameterStore) -> float:
    output = model.forward(x)
    return float(np.sum(w * output.logits) + np.sum(r * output.features))

  store.zero_grad()
  model.backward(model.forward(x), w, r)
  analytic = {name: store.grad(name).copy() for name in store.names()}
  gradients = finite_diff_grad(loss, store, max_coords=8, seed=2)
  worst = worst_relative_errors(gradients, analytic)
  assert max(worst.values()) <= 1e-4, {k: v for k, v in worst.items() if v > 1e-4}


def test_bce_worked_values():
  assert bce_loss(0.5, 1) == pytest.approx(math.log(2.0))
  assert bce_loss(0.5, 0) == pytest.approx(math.log(2.0))
  assert bce_loss(0.9, 1) == pytest.approx(0.1054, abs=1e-4)
  assert bce_loss(0.0, 1) == pytest.approx(-math.log(1e-7))
  assert math.isfinite(bce_loss(1.0, 0))


def test_bce_rejects_soft_targets():
  with pytest.raises(InvalidArgumentError):
    bce_loss(0.5, 0.5)


def test_bce_from_logits_gradient():
  logits = np.array([0.0, 2.0, -1.0])
  targets = np.array([1, 0, 1])
  loss, grad = bce_from_logits(logits, targets)
  probs = 1.0 / (1.0 + np.exp(-logits))
  np.testing.assert_allclose(grad, (probs - targets) / 3.0)
  assert loss == pytest.approx(float(np.mean(bce_loss(probs, targets))))


def test_expert_order_does_not_change_the_mixture(rng):
  layer, store = _layer(rng)
  reversed_layer, reversed_store = _layer(np.random.default_rng(0), names=tuple(reversed(EXPERT_NAMES)))
  for name in store.names():
    value = store[name]
    if name.startswith('moe.gate.'):
      value = value[::-1]
    reversed_store[name][...] = value
  x = rng.standard_normal((2, 4, 10, 10))
  first, _ = layer.forward(store, x)
  second, _ = reversed_layer.forward(reversed_store, x)
  np.testing.assert_allclose(second, first, atol=1e-9)


def test_gate_gradient_of_a_constant_mass_vanishes(rng):
  layer, store = _layer(rng)
  x = rng.standard_normal((4, 9, 9))
  names = store.names(layer.gate_prefix)

  def total_mass(params: ParameterStore) -> float:
    return float(3.0 * gate_forward(x, layer.gate_params(params)).pi.sum())

  def first_score(params: ParameterStore) -> float:
    return float(gate_forward(x, layer.gate_params(params)).pi[0])

  flat = finite_diff_grad(total_mass, store, names=names, max_coords=None)
  assert all(np.all(np.abs(gradient.numeric) < 1e-9) for gradient in flat.values())
  moving = finite_diff_grad(first_score, store, names=[f'{layer.gate_prefix}.w'], max_coords=None)
  assert np.abs(moving[f'{layer.gate_prefix}.w'].numeric).max() > 1e-3


def test_energy_ratio_is_higher_for_fine_detail(rng):
  noise = rng.standard_normal((3, 4, 16, 16))
  smooth = smooth_array(noise, GaussianSpec(2.0))
  rough, _ = fine_energy_ratio(noise)
  flat, _ = fine_energy_ratio(smooth)
  assert np.all(rough > flat)
  constant, _ = fine_energy_ratio(np.full((1, 4, 8, 8), 2.0))
  np.testing.assert_allclose(constant, 0.0, atol=1e-12)


def test_energy_ratio_backward_matches_finite_differences(rng):
  store = ParameterStore(np.float64)
  store.add('x', rng.standard_normal((2, 3, 9, 9)))
  weights = rng.standard_normal(2)

  def loss(params: ParameterStore) -> float:
    return float(np.sum(weights * fine_energy_ratio(params['x'])[0]))

  _, cache = fine_energy_ratio(store['x'])
  analytic = fine_energy_ratio_backward(weights, cache)
  gradients = finite_diff_grad(loss, store, max_coords=None)
  assert worst_relative_errors(gradients, {'x': analytic})['x'] <= 1e-4


def test_untrained_gate_routes_fine_detail_to_adalog_experts(rng):
  layer, store = _layer(rng)
  store['moe.gate.w'][...] = 0.0
  noise = rng.standard_normal((4, 16, 16))
  smooth = smooth_array(noise, GaussianSpec(2.0))
  detailed = gate_forward(noise, layer.gate_params(store)).pi
  blurred = gate_forward(smooth, layer.gate_params(store)).pi
  assert detailed[2:].sum() > blurred[2:].sum()
  np.testing.assert_allclose(detailed[0], detailed[1])


def test_gate_without_energy_input(rng):
  store = ParameterStore(np.float64)
  catalog = expert_catalog()
  layer = MoELayer('moe', 4, [catalog[name] for name in EXPERT_NAMES], hidden=4, energy=False)
  layer.init_params(store, rng)
  assert 'moe.gate.v' not in store
  store['moe.gate.w'][...] = 0.0
  scores = gate_forward(rng.standard_normal((4, 9, 9)), layer.gate_params(store))
  np.testing.assert_allclose(scores.pi, 0.25)


def test_face_branch_gate_energy_switch(rng):
  with_energy = FaceBranchModel(SMALL_FACE).initialize(rng)
  assert 'face.moe0.gate.v' in with_energy.params
  config = FaceConfig(channels=4, embed_dim=6, input_size=16, controller_hidden=4, gate_energy=False)
  without = FaceBranchModel(config).initialize(rng)
  assert 'face.moe0.gate.v' not in without.params
