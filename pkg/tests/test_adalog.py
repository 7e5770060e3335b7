from __future__ import annotations

import math

import numpy as np
import pytest

from forgerydet.core.errors import InvalidArgumentError
from forgerydet.core.params import ParameterStore
from forgerydet.core.tensor import FeatureMap, Padding
from forgerydet.models.adalog import (
  COARSE_BANK,
  FINE_BANK,
  AdaLoGBlock,
  AdaLoGDecision,
  ControllerParams,
  ScaleBank,
  adalog_block,
  adalog_fuse,
  controller_forward,
  decision_from_raw,
  log_residual_bank
)
from forgerydet.pipeline.verification import run_gradcheck


def _controller(rng, channels=3, scales=3, hidden=4) -> ControllerParams:
  store = ParameterStore(np.float64)
  return ControllerParams.initialize(store, 'blk', channels, scales, rng, hidden)


def test_residual_of_constant_map_is_zero():
  x = FeatureMap(np.full((2, 12, 12), 3.0))
  for residual in log_residual_bank(x, COARSE_BANK):
    np.testing.assert_allclose(residual.data, 0.0, atol=1e-12)


@pytest.mark.parametrize('sigma,period', [(1.0, 32), (2.0, 128)])
def test_residual_tracks_laplacian_for_slow_sinusoid(sigma, period):
  omega = 2.0 * math.pi / period
  row = np.sin(omega * np.arange(2 * period))
  x = np.tile(row, (16, 1))[np.newaxis]
  (residual,) = log_residual_bank(x, ScaleBank((sigma,)), Padding.CIRCULAR)
  measured = float(np.sum(residual.data * x) / np.sum(x * x))
  assert 0.98 <= measured / (sigma ** 2 * omega ** 2 / 2.0) <= 1.02


def test_circular_residuals_carry_no_mean():
  draws = np.random.default_rng(7)
  for _ in range(20):
    x = draws.standard_normal((3, 18, 14)) * draws.uniform(0.5, 5.0)
    scale = float(np.abs(x).sum())
    for bank in (FINE_BANK, COARSE_BANK):
      for residual in log_residual_bank(x, bank, Padding.CIRCULAR):
        assert np.all(np.abs(residual.data.sum(axis=(1, 2))) <= 1e-9 * scale)


def test_random_decisions_stay_on_the_simplex():
  draws = np.random.default_rng(100)
  for _ in range(100):
    decision = decision_from_raw(draws.normal(0.0, 4.0, size=(4, 3, 3)))
    np.testing.assert_allclose(decision.blend_weights.sum(axis=0), 1.0, atol=1e-6)
    assert np.all((decision.gate > 0.0) & (decision.gate < 1.0))


def test_initial_controller_blends_uniformly_with_half_gate(rng):
  params = _controller(rng)
  x = rng.standard_normal((3, 10, 10))
  o_raw, decision = controller_forward(x, params)
  assert o_raw.shape == (4, 10, 10)
  np.testing.assert_allclose(decision.blend_weights, 1.0 / 3.0)
  np.testing.assert_allclose(decision.gate, 0.5)


def test_decision_is_a_simplex_with_gate_in_unit_interval(rng):
  decision = decision_from_raw(rng.standard_normal((4, 6, 5)) * 5.0)
  np.testing.assert_allclose(decision.blend_weights.sum(axis=0), 1.0, atol=1e-12)
  assert np.all(decision.blend_weights >= 0.0)
  assert np.all((decision.gate > 0.0) & (decision.gate < 1.0))
  assert decision.gate.shape == (1, 6, 5)


def test_decision_needs_gate_channel():
  with pytest.raises(InvalidArgumentError):
    decision_from_raw(np.zeros((1, 4, 4)))


def test_closed_gate_returns_the_input(rng):
  x = rng.standard_normal((2, 8, 8))
  residuals = log_residual_bank(x, FINE_BANK)
  decision = AdaLoGDecision(blend_weights=np.full((3, 8, 8), 1.0 / 3.0), gate=np.zeros((1, 8, 8)))
  np.testing.assert_allclose(adalog_fuse(x, residuals, decision).data, x)


def test_open_gate_with_one_hot_blend_selects_a_residual(rng):
  x = rng.standard_normal((2, 8, 8))
  residuals = log_residual_bank(x, FINE_BANK)
  blend = np.zeros((3, 8, 8))
  blend[1] = 1.0
  decision = AdaLoGDecision(blend_weights=blend, gate=np.ones((1, 8, 8)))
  np.testing.assert_allclose(adalog_fuse(x, residuals, decision).data, residuals[1].data)


def test_fuse_rejects_mismatched_decision(rng):
  x = rng.standard_normal((2, 8, 8))
  residuals = log_residual_bank(x, FINE_BANK)
  decision = AdaLoGDecision(blend_weights=np.full((2, 8, 8), 0.5), gate=np.ones((1, 8, 8)))
  with pytest.raises(InvalidArgumentError):
    adalog_fuse(x, residuals, decision)
  with pytest.raises(InvalidArgumentError):
    adalog_fuse(x, residuals[:2], decision)


def test_saturated_gate_bias_switches_between_input_and_residuals(rng):
  store = ParameterStore(np.float64)
  params = ControllerParams.initialize(store, 'blk', 3, 3, rng, hidden=4)
  x = rng.standard_normal((3, 12, 12))
  params.b_b[-1] = -60.0
  np.testing.assert_allclose(adalog_block(x, FINE_BANK, params).data, x, atol=1e-12)
  params.b_b[-1] = 60.0
  expected = sum(r.data for r in log_residual_bank(x, FINE_BANK)) / 3.0
  np.testing.assert_allclose(adalog_block(x, FINE_BANK, params).data, expected, atol=1e-12)


def test_functional_block_matches_store_backed_block(rng):
  store = ParameterStore(np.float64)
  block = AdaLoGBlock('blk', 3, COARSE_BANK, hidden=4)
  block.init_params(store, rng)
  store['blk.ctrl_b.w'][...] = rng.normal(0.0, 0.2, size=store['blk.ctrl_b.w'].shape)
  x = rng.standard_normal((3, 16, 16))
  z, _ = block.forward(store, x[np.newaxis])
  functional = adalog_block(x, COARSE_BANK, ControllerParams.from_store(store, 'blk'))
  np.testing.assert_allclose(z[0], functional.data, atol=1e-12)


def test_fixed_scale_block_has_no_parameters_and_averages_residuals(rng):
  store = ParameterStore(np.float64)
  block = AdaLoGBlock('blk', 2, FINE_BANK, adaptive=False)
  block.init_params(store, rng)
  assert len(store) == 0
  x = rng.standard_normal((1, 2, 10, 10))
  z, cache = block.forward(store, x)
  expected = sum(r.data for r in log_residual_bank(x[0], FINE_BANK)) / 3.0
  np.testing.assert_allclose(z[0], expected, atol=1e-12)
  assert block.backward(store, np.ones_like(z), cache).shape == x.shape


def test_bank_size_must_match_controller(rng):
  params = _controller(rng, scales=2)
  with pytest.raises(InvalidArgumentError):
    adalog_block(rng.standard_normal((3, 8, 8)), FINE_BANK, params)


def test_controller_rejects_wrong_channel_count(rng):
  params = _controller(rng, channels=3)
  with pytest.raises(InvalidArgumentError):
    controller_forward(rng.standard_normal((2, 8, 8)), params)


@pytest.mark.parametrize('sigmas', [(), (1.0, 1.0), (4.0, 1.0), (0.0, 1.0), (-2.0,)])
def test_invalid_scale_banks(sigmas):
  with pytest.raises(InvalidArgumentError):
    ScaleBank(sigmas)


def test_controller_and_input_gradients_match_finite_differences():
  report = run_gradcheck('adalog', seed=0)
  assert report.passed, report.groups
  assert {group.group for group in report.groups} == {'controller', 'input'}
