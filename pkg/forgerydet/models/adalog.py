"""Adaptive LoG block: a bank of Gaussian residuals fused by a learned per-pixel controller.

For a scale bank σ_1 < … < σ_K the residuals ``Y_k = X − G_σk(X)`` are band-limited
high-pass maps. A small convolutional controller emits K+1 channels per pixel; the
first K become softmax blend weights ``c_k`` and the last becomes a sigmoid gate
``λ``. The block returns ``Z = (1 − λ)·X + λ·Σ c_k·Y_k`` with the 1×H×W maps shared
across feature channels.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from forgerydet.core import layers
from forgerydet.core.errors import InvalidArgumentError
from forgerydet.core.params import ParameterStore
from forgerydet.core.tensor import FeatureMap, GaussianSpec, MapLike, Padding, as_batch, smooth_array

DEFAULT_HIDDEN = 16


@dataclass(frozen=True)
class ScaleBank:
  sigmas: Tuple[float, ...]

  def __post_init__(self) -> None:
    sigmas = tuple(float(s) for s in self.sigmas)
    if not sigmas:
      raise InvalidArgumentError('a scale bank needs at least one sigma')
    if any(not np.isfinite(s) or s <= 0 for s in sigmas):
      raise InvalidArgumentError(f'scale bank sigmas must be positive, got {sigmas}')
    if any(b <= a for a, b in zip(sigmas, sigmas[1:])):
      raise InvalidArgumentError(f'scale bank sigmas must be strictly increasing, got {sigmas}')
    object.__setattr__(self, 'sigmas', sigmas)

  @property
  def size(self) -> int:
    return len(self.sigmas)

  def specs(self, padding: Padding = Padding.REFLECT) -> List[GaussianSpec]:
    return [GaussianSpec(sigma, padding=padding) for sigma in self.sigmas]


FINE_BANK = ScaleBank((1.0, 4.0, 7.0))
COARSE_BANK = ScaleBank((9.0, 12.0, 15.0))


@dataclass
class ControllerParams:
  """Weights of the two-stage controller: 3×3 conv C→C_h, SiLU, 1×1 conv C_h→K+1."""

  w_a: np.ndarray
  b_a: np.ndarray
  w_b: np.ndarray
  b_b: np.ndarray

  @property
  def in_channels(self) -> int:
    return self.w_a.shape[1]

  @property
  def hidden(self) -> int:
    return self.w_a.shape[0]

  @property
  def scales(self) -> int:
    return self.w_b.shape[0] - 1

  @classmethod
  def names(cls, prefix: str) -> Tuple[str, str, str, str]:
    return (f'{prefix}.ctrl_a.w', f'{prefix}.ctrl_a.b', f'{prefix}.ctrl_b.w', f'{prefix}.ctrl_b.b')

  @classmethod
  def from_store(cls, store: ParameterStore, prefix: str) -> 'ControllerParams':
    w_a, b_a, w_b, b_b = (store[name] for name in cls.names(prefix))
    return cls(w_a=w_a, b_a=b_a, w_b=w_b, b_b=b_b)

  @classmethod
  def initialize(
    cls,
    store: ParameterStore,
    prefix: str,
    channels: int,
    scales: int,
    rng: np.random.Generator,
    hidden: int = DEFAULT_HIDDEN
  ) -> 'ControllerParams':
    names = cls.names(prefix)
    store.add(names[0], layers.fan_in_uniform(rng, (hidden, channels, 3, 3), channels * 9))
    store.add(names[1], np.zeros(hidden))
    # zero final layer: c_k = 1/K and λ = 0.5 at initialization
    store.add(names[2], np.zeros((scales + 1, hidden, 1, 1)))
    store.add(names[3], np.zeros(scales + 1))
    return cls.from_store(store, prefix)


@dataclass
class AdaLoGDecision:
  blend_weights: np.ndarray
  gate: np.ndarray

  @property
  def scales(self) -> int:
    return self.blend_weights.shape[0]


def residual_arrays(x: np.ndarray, bank: ScaleBank, padding: Padding = Padding.REFLECT) -> List[np.ndarray]:
  return [x - smooth_array(x, spec) for spec in bank.specs(padding)]


def split_decision(o_raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
  """Batched ``N×(K+1)×H×W`` logits → (blend weights ``N×K×H×W``, gate ``N×1×H×W``)."""
  if o_raw.shape[1] < 2:
    raise InvalidArgumentError(f'controller output needs K+1 >= 2 channels, got {o_raw.shape[1]}')
  blend = layers.softmax(o_raw[:, :-1], axis=1)
  gate = layers.sigmoid(o_raw[:, -1:])
  return blend, gate


def fuse_arrays(x: np.ndarray, residuals: Sequence[np.ndarray], blend: np.ndarray, gate: np.ndarray) -> np.ndarray:
  composite = np.zeros_like(x)
  for k, residual in enumerate(residuals):
    composite += blend[:, k:k + 1] * residual
  return (1.0 - gate) * x + gate * composite


def _controller_arrays(x: np.ndarray, params: ControllerParams):
  if x.shape[1] != params.in_channels:
    raise InvalidArgumentError(f'controller expects {params.in_channels} channels, got {x.shape[1]}')
  pre, cache_a = layers.conv2d(x, params.w_a, params.b_a)
  hidden, cache_act = layers.silu(pre)
  o_raw, cache_b = layers.conv2d(hidden, params.w_b, params.b_b)
  return o_raw, (cache_a, cache_act, cache_b)


def _controller_backward(do_raw: np.ndarray, caches, params: ControllerParams):
  cache_a, cache_act, cache_b = caches
  dhidden, dw_b, db_b = layers.conv2d_backward(do_raw, cache_b, params.w_b)
  dpre = layers.silu_backward(dhidden, cache_act)
  dx, dw_a, db_a = layers.conv2d_backward(dpre, cache_a, params.w_a)
  return dx, (dw_a, db_a, dw_b, db_b)


class AdaLoGBlock:
  """Store-backed batched adaLoG block with an explicit backward pass.

  With ``adaptive=False`` the controller is dropped: blend weights are uniform and
  the gate is fully open, giving the fixed-scale baseline ``Z = mean_k Y_k``.
  """

  def __init__(
    self,
    prefix: str,
    channels: int,
    bank: ScaleBank,
    hidden: int = DEFAULT_HIDDEN,
    padding: Padding = Padding.REFLECT,
    adaptive: bool = True
  ) -> None:
    self.prefix = prefix
    self.channels = channels
    self.bank = bank
    self.hidden = hidden
    self.padding = Padding(padding)
    self.adaptive = adaptive

  def init_params(self, store: ParameterStore, rng: np.random.Generator) -> None:
    if self.adaptive:
      ControllerParams.initialize(store, self.prefix, self.channels, self.bank.size, rng, self.hidden)

  def _params(self, store: ParameterStore) -> ControllerParams:
    params = ControllerParams.from_store(store, self.prefix)
    if params.scales != self.bank.size:
      raise InvalidArgumentError(f'{self.prefix}: controller emits {params.scales + 1} channels for a {self.bank.size}-scale bank')
    return params

  def decide(self, store: ParameterStore, x: np.ndarray):
    if not self.adaptive:
      n, _, h, w = x.shape
      blend = np.full((n, self.bank.size, h, w), 1.0 / self.bank.size, dtype=x.dtype)
      return blend, np.ones((n, 1, h, w), dtype=x.dtype), None
    params = self._params(store)
    o_raw, caches = _controller_arrays(x, params)
    blend, gate = split_decision(o_raw)
    return blend, gate, caches

  def forward(self, store: ParameterStore, x: np.ndarray):
    residuals = residual_arrays(x, self.bank, self.padding)
    blend, gate, caches = self.decide(store, x)
    z = fuse_arrays(x, residuals, blend, gate)
    return z, (x, residuals, blend, gate, caches)

  def backward(self, store: ParameterStore, dz: np.ndarray, cache) -> np.ndarray:
    x, residuals, blend, gate, caches = cache
    composite = fuse_arrays(np.zeros_like(x), residuals, blend, np.ones_like(gate))
    dx = dz * (1.0 - gate)
    dblend = np.empty_like(blend)
    for k, (residual, spec) in enumerate(zip(residuals, self.bank.specs(self.padding))):
      dblend[:, k:k + 1] = np.sum(dz * gate * residual, axis=1, keepdims=True)
      dresidual = dz * gate * blend[:, k:k + 1]
      dx += dresidual - smooth_array(dresidual, spec, adjoint=True)
    if not self.adaptive:
      return dx
    params = self._params(store)
    dgate = np.sum(dz * (composite - x), axis=1, keepdims=True)
    do_raw = np.concatenate([
      layers.softmax_backward(dblend, blend, axis=1),
      dgate * gate * (1.0 - gate)
    ], axis=1)
    dx_ctrl, grads = _controller_backward(do_raw, caches, params)
    for name, grad in zip(ControllerParams.names(self.prefix), grads):
      store.accumulate(name, grad)
    return dx + dx_ctrl


def _single(x: MapLike) -> np.ndarray:
  if isinstance(x, FeatureMap):
    return x.data[np.newaxis]
  array = np.asarray(x)
  if array.ndim != 3:
    raise InvalidArgumentError(f'expected a C×H×W map, got shape {array.shape}')
  return array[np.newaxis]


def log_residual_bank(x: MapLike, bank: ScaleBank, padding: Padding = Padding.REFLECT) -> List[FeatureMap]:
  batch = _single(x)
  return [FeatureMap(residual[0]) for residual in residual_arrays(batch, bank, padding)]


def decision_from_raw(o_raw: MapLike) -> AdaLoGDecision:
  blend, gate = split_decision(as_batch(o_raw))
  return AdaLoGDecision(blend_weights=blend[0], gate=gate[0])


def controller_forward(x: MapLike, params: ControllerParams) -> Tuple[FeatureMap, AdaLoGDecision]:
  o_raw, _ = _controller_arrays(_single(x), params)
  return FeatureMap(o_raw[0]), decision_from_raw(o_raw)


def adalog_fuse(x: MapLike, residuals: Sequence[MapLike], decision: AdaLoGDecision) -> FeatureMap:
  batch = _single(x)
  blend = np.asarray(decision.blend_weights)
  gate = np.asarray(decision.gate)
  if len(residuals) != blend.shape[0]:
    raise InvalidArgumentError(f'{len(residuals)} residuals for {blend.shape[0]} blend weights')
  arrays = [_single(r) for r in residuals]
  spatial = batch.shape[2:]
  if any(r.shape != batch.shape for r in arrays):
    raise InvalidArgumentError('residual shapes must match the input map')
  if blend.shape[1:] != spatial or gate.shape != (1,) + spatial:
    raise InvalidArgumentError(f'decision maps must be 1×{spatial[0]}×{spatial[1]}')
  return FeatureMap(fuse_arrays(batch, arrays, blend[np.newaxis], gate[np.newaxis])[0])


def adalog_block(
  x: MapLike,
  bank: ScaleBank,
  params: ControllerParams,
  padding: Padding = Padding.REFLECT
) -> FeatureMap:
  if params.scales != bank.size:
    raise InvalidArgumentError(f'controller emits {params.scales + 1} channels for a {bank.size}-scale bank')
  _, decision = controller_forward(x, params)
  residuals = log_residual_bank(x, bank, padding)
  return adalog_fuse(x, residuals, decision)
