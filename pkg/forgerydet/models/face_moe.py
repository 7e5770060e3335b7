"""Face branch: a small conv backbone with soft mixture-of-experts layers after block 3.

Backbone at the default 64×64 input::

  block1 (3→C) → block2 → pool/2 → block3 → MoE × moe_layers → block4 → pool/2
  → global average pool → SiLU(linear C→d) = f_face → linear d→1 = logit

Each MoE layer evaluates every expert densely and mixes them with gate scores
``π = softmax(GAP(conv1×1(x)) + v·ρ(x))`` where ``ρ`` is the fine-band energy ratio
of the layer input. ``gate_energy = false`` drops the ``v·ρ`` term.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from forgerydet.core import layers
from forgerydet.core.errors import InvalidArgumentError
from forgerydet.core.params import ParameterStore
from forgerydet.core.tensor import FeatureMap, GaussianSpec, MapLike, Padding, as_batch, smooth_array
from forgerydet.models.adalog import COARSE_BANK, DEFAULT_HIDDEN, FINE_BANK, AdaLoGBlock, ScaleBank
from forgerydet.models.modules import Conv, ConvBlock, Dense

logger = logging.getLogger(__name__)

BCE_EPSILON = 1e-7
ENERGY_SIGMA = FINE_BANK.sigmas[0]
ENERGY_EPSILON = 1e-8
# initial gate weight of the energy ratio for adaLoG experts; RGB experts start at 0
ENERGY_PRIOR = 1.0


class ExpertKind(str, Enum):
  RGB_CONV = 'rgb_conv'
  ADALOG = 'adalog'


@dataclass(frozen=True)
class ExpertConfig:
  name: str
  kind: ExpertKind
  kernel: Optional[int] = None
  bank: Optional[ScaleBank] = None

  def __post_init__(self) -> None:
    object.__setattr__(self, 'kind', ExpertKind(self.kind))
    if self.kind is ExpertKind.RGB_CONV and (self.kernel is None or self.kernel < 1 or self.kernel % 2 == 0):
      raise InvalidArgumentError(f'expert {self.name!r} needs an odd kernel size')
    if self.kind is ExpertKind.ADALOG and self.bank is None:
      raise InvalidArgumentError(f'expert {self.name!r} needs a scale bank')


EXPERT_NAMES = ('rgb3', 'rgb9', 'adalog_fine', 'adalog_coarse')


def expert_catalog(fine: ScaleBank = FINE_BANK, coarse: ScaleBank = COARSE_BANK) -> Dict[str, ExpertConfig]:
  return {
    'rgb3': ExpertConfig('rgb3', ExpertKind.RGB_CONV, kernel=3),
    'rgb9': ExpertConfig('rgb9', ExpertKind.RGB_CONV, kernel=9),
    'adalog_fine': ExpertConfig('adalog_fine', ExpertKind.ADALOG, bank=fine),
    'adalog_coarse': ExpertConfig('adalog_coarse', ExpertKind.ADALOG, bank=coarse)
  }


class RgbExpert:
  """Channel-preserving k×k convolution followed by SiLU."""

  def __init__(self, prefix: str, channels: int, kernel: int) -> None:
    self.conv = Conv(prefix, channels, channels, kernel)

  def init_params(self, store: ParameterStore, rng: np.random.Generator) -> None:
    self.conv.init_params(store, rng)

  def forward(self, store: ParameterStore, x: np.ndarray):
    y, conv_cache = self.conv.forward(store, x)
    z, act_cache = layers.silu(y)
    return z, (conv_cache, act_cache)

  def backward(self, store: ParameterStore, dz: np.ndarray, cache) -> np.ndarray:
    conv_cache, act_cache = cache
    return self.conv.backward(store, layers.silu_backward(dz, act_cache), conv_cache)


Expert = Union[RgbExpert, AdaLoGBlock]


def build_expert(
  config: ExpertConfig,
  prefix: str,
  channels: int,
  hidden: int = DEFAULT_HIDDEN,
  padding: Padding = Padding.REFLECT,
  adaptive: bool = True
) -> Expert:
  if config.kind is ExpertKind.RGB_CONV:
    return RgbExpert(prefix, channels, config.kernel)
  return AdaLoGBlock(prefix, channels, config.bank, hidden=hidden, padding=padding, adaptive=adaptive)


@dataclass
class GateScores:
  pi: np.ndarray

  def __post_init__(self) -> None:
    pi = np.asarray(self.pi, dtype=np.float64).reshape(-1)
    if pi.size < 1 or np.any(pi < 0) or abs(float(pi.sum()) - 1.0) > 1e-6:
      raise InvalidArgumentError(f'gate scores must lie on the simplex, got {pi}')
    self.pi = pi

  def __len__(self) -> int:
    return self.pi.size


@dataclass
class GateParams:
  """1×1 convolution C → E; ``w`` is ``E×C×1×1``.

  ``v`` (length E), when present, weights the input's fine-band energy ratio into
  every expert's logit so the gate can route on high-frequency content directly.
  """

  w: np.ndarray
  b: np.ndarray
  v: Optional[np.ndarray] = None
  padding: Padding = Padding.REFLECT

  @property
  def experts(self) -> int:
    return self.w.shape[0]

  @classmethod
  def from_store(cls, store: ParameterStore, prefix: str, padding: Padding = Padding.REFLECT) -> 'GateParams':
    v = store[f'{prefix}.v'] if f'{prefix}.v' in store else None
    return cls(w=store[f'{prefix}.w'], b=store[f'{prefix}.b'], v=v, padding=padding)


def fine_energy_ratio(x: np.ndarray, padding: Padding = Padding.REFLECT):
  """Per-sample ``½·log(E_fine / E_total)`` of an N×C×H×W map.

  ``E_fine`` is the mean square of ``x − G_σ(x)`` at the smallest fine scale and
  ``E_total`` the mean square of ``x`` minus its per-channel spatial mean.
  """
  spec = GaussianSpec(ENERGY_SIGMA, padding=padding)
  residual = x - smooth_array(x, spec)
  centered = x - x.mean(axis=(2, 3), keepdims=True)
  fine = np.mean(residual * residual, axis=(1, 2, 3)) + ENERGY_EPSILON
  total = np.mean(centered * centered, axis=(1, 2, 3)) + ENERGY_EPSILON
  return 0.5 * (np.log(fine) - np.log(total)), (spec, residual, centered, fine, total)


def fine_energy_ratio_backward(dratio: np.ndarray, cache) -> np.ndarray:
  spec, residual, centered, fine, total = cache
  size = float(residual[0].size)
  dresidual = residual * (dratio / (fine * size))[:, np.newaxis, np.newaxis, np.newaxis]
  dcentered = centered * (dratio / (total * size))[:, np.newaxis, np.newaxis, np.newaxis]
  dx = dresidual - smooth_array(dresidual, spec, adjoint=True)
  return dx - (dcentered - dcentered.mean(axis=(2, 3), keepdims=True))


def _gate_arrays(x: np.ndarray, params: GateParams):
  if x.shape[1] != params.w.shape[1]:
    raise InvalidArgumentError(f'gate expects {params.w.shape[1]} channels, got {x.shape[1]}')
  # a 1×1 conv commutes with global average pooling
  pooled, pool_cache = layers.global_avg_pool(x)
  logits = pooled @ params.w[:, :, 0, 0].T + params.b
  energy = None
  if params.v is not None:
    ratio, energy_cache = fine_energy_ratio(x, params.padding)
    logits = logits + ratio[:, np.newaxis] * params.v
    energy = (ratio, energy_cache)
  return layers.softmax(logits, axis=1), (pooled, pool_cache, energy)


def gate_forward(x: MapLike, gate_params: GateParams) -> GateScores:
  pi, _ = _gate_arrays(as_batch(x), gate_params)
  return GateScores(pi[0])


class MoELayer:
  def __init__(
    self,
    prefix: str,
    channels: int,
    experts: Sequence[ExpertConfig],
    hidden: int = DEFAULT_HIDDEN,
    padding: Padding = Padding.REFLECT,
    adaptive: bool = True,
    energy: bool = True
  ) -> None:
    if not experts:
      raise InvalidArgumentError('an MoE layer needs at least one expert')
    names = [config.name for config in experts]
    if len(set(names)) != len(names):
      raise InvalidArgumentError(f'duplicate expert names {names}')
    self.prefix = prefix
    self.channels = channels
    self.padding = Padding(padding)
    self.energy = energy
    self.configs = list(experts)
    self.experts: List[Expert] = [
      build_expert(config, f'{prefix}.{config.name}', channels, hidden, padding, adaptive) for config in experts
    ]

  @property
  def gate_prefix(self) -> str:
    return f'{self.prefix}.gate'

  @property
  def expert_names(self) -> List[str]:
    return [config.name for config in self.configs]

  def init_params(self, store: ParameterStore, rng: np.random.Generator) -> None:
    count = len(self.experts)
    store.add(f'{self.gate_prefix}.w', layers.fan_in_uniform(rng, (count, self.channels, 1, 1), self.channels))
    store.add(f'{self.gate_prefix}.b', np.zeros(count))
    if self.energy:
      prior = [ENERGY_PRIOR if config.kind is ExpertKind.ADALOG else 0.0 for config in self.configs]
      store.add(f'{self.gate_prefix}.v', np.array(prior))
    for expert in self.experts:
      expert.init_params(store, rng)

  def gate_params(self, store: ParameterStore) -> GateParams:
    return GateParams.from_store(store, self.gate_prefix, self.padding)

  def forward(self, store: ParameterStore, x: np.ndarray, pi: Optional[np.ndarray] = None):
    """Dense mixture ``Σ π_k·Z_k``; a fixed ``pi`` (N×E) bypasses the gate."""
    outputs, expert_caches = [], []
    for expert in self.experts:
      z, cache = expert.forward(store, x)
      outputs.append(z)
      expert_caches.append(cache)
    gate_cache = None
    if pi is None:
      pi, gate_cache = _gate_arrays(x, self.gate_params(store))
    elif pi.shape != (x.shape[0], len(self.experts)):
      raise InvalidArgumentError(f'forced gate must be {x.shape[0]}×{len(self.experts)}, got {pi.shape}')
    mixed = np.zeros_like(outputs[0])
    for k, z in enumerate(outputs):
      mixed += pi[:, k, np.newaxis, np.newaxis, np.newaxis] * z
    return mixed, MoECache(outputs=outputs, expert_caches=expert_caches, pi=pi, gate_cache=gate_cache)

  def backward(self, store: ParameterStore, dout: np.ndarray, cache: 'MoECache') -> np.ndarray:
    pi = cache.pi
    dx = np.zeros_like(dout)
    dpi = np.empty_like(pi)
    for k, (expert, z, expert_cache) in enumerate(zip(self.experts, cache.outputs, cache.expert_caches)):
      dpi[:, k] = np.sum(dout * z, axis=(1, 2, 3))
      dx += expert.backward(store, dout * pi[:, k, np.newaxis, np.newaxis, np.newaxis], expert_cache)
    if cache.gate_cache is None:
      return dx
    pooled, pool_cache, energy = cache.gate_cache
    params = self.gate_params(store)
    dlogits = layers.softmax_backward(dpi, pi, axis=1)
    store.accumulate(f'{self.gate_prefix}.w', (dlogits.T @ pooled)[:, :, np.newaxis, np.newaxis])
    store.accumulate(f'{self.gate_prefix}.b', dlogits.sum(axis=0))
    dx += layers.global_avg_pool_backward(dlogits @ params.w[:, :, 0, 0], pool_cache)
    if energy is not None:
      ratio, energy_cache = energy
      store.accumulate(f'{self.gate_prefix}.v', ratio @ dlogits)
      dx += fine_energy_ratio_backward(dlogits @ params.v, energy_cache)
    return dx


@dataclass
class MoECache:
  outputs: List[np.ndarray]
  expert_caches: list
  pi: np.ndarray
  gate_cache: Optional[tuple]


def moe_forward(x: MapLike, layer: MoELayer, params: ParameterStore, pi: Optional[Sequence[float]] = None) -> FeatureMap:
  batch = as_batch(x)
  forced = None if pi is None else np.asarray(pi, dtype=batch.dtype).reshape(1, -1)
  mixed, _ = layer.forward(params, batch, forced)
  return FeatureMap(mixed[0])


@dataclass
class FaceConfig:
  channels: int = 12
  embed_dim: int = 128
  input_size: int = 64
  experts: Tuple[str, ...] = EXPERT_NAMES
  moe_layers: int = 1
  controller_hidden: int = DEFAULT_HIDDEN
  fine_bank: Tuple[float, ...] = FINE_BANK.sigmas
  coarse_bank: Tuple[float, ...] = COARSE_BANK.sigmas
  padding: Padding = Padding.REFLECT
  adaptive: bool = True
  gate_energy: bool = True

  def expert_configs(self) -> List[ExpertConfig]:
    catalog = expert_catalog(ScaleBank(tuple(self.fine_bank)), ScaleBank(tuple(self.coarse_bank)))
    unknown = [name for name in self.experts if name not in catalog]
    if unknown or not self.experts:
      raise InvalidArgumentError(f'face_experts must be a non-empty subset of {list(catalog)}, got {list(self.experts)}')
    return [catalog[name] for name in self.experts]


@dataclass
class FaceOutput:
  logits: np.ndarray
  features: np.ndarray
  gate_scores: List[np.ndarray] = field(default_factory=list)
  cache: Optional[tuple] = None

  @property
  def probabilities(self) -> np.ndarray:
    return layers.sigmoid(self.logits)


class FaceBranchModel:
  """Face branch bound to a parameter store; all names live under ``face.``."""

  prefix = 'face'

  def __init__(self, config: Optional[FaceConfig] = None, params: Optional[ParameterStore] = None) -> None:
    self.config = config or FaceConfig()
    self.params = params if params is not None else ParameterStore()
    c = self.config.channels
    p = self.prefix
    self.blocks = [
      ConvBlock(f'{p}.block1', 3, c),
      ConvBlock(f'{p}.block2', c, c),
      ConvBlock(f'{p}.block3', c, c),
      ConvBlock(f'{p}.block4', c, c)
    ]
    experts = self.config.expert_configs()
    self.moe = [
      MoELayer(
        f'{p}.moe{i}', c, experts, self.config.controller_hidden, self.config.padding, self.config.adaptive,
        self.config.gate_energy
      )
      for i in range(self.config.moe_layers)
    ]
    self.proj = Dense(f'{p}.proj', c, self.config.embed_dim)
    self.head = Dense(f'{p}.head', self.config.embed_dim, 1)

  def initialize(self, rng: np.random.Generator) -> 'FaceBranchModel':
    for block in self.blocks[:3]:
      block.init_params(self.params, rng)
    for layer in self.moe:
      layer.init_params(self.params, rng)
    self.blocks[3].init_params(self.params, rng)
    self.proj.init_params(self.params, rng)
    self.head.init_params(self.params, rng)
    logger.debug('Initialized face branch with %d parameter arrays', len(self.params.names(self.prefix)))
    return self

  def forward(self, x: np.ndarray, pi: Optional[Sequence[np.ndarray]] = None) -> FaceOutput:
    if x.ndim != 4 or x.shape[1] != 3:
      raise InvalidArgumentError(f'face branch expects N×3×H×W input, got {x.shape}')
    store = self.params
    b1, b2, b3, b4 = self.blocks
    h, c1 = b1.forward(store, x)
    h, c2 = b2.forward(store, h)
    h, p1 = layers.avg_pool2(h)
    h, c3 = b3.forward(store, h)
    moe_caches = []
    for i, layer in enumerate(self.moe):
      h, cache = layer.forward(store, h, None if pi is None else pi[i])
      moe_caches.append(cache)
    h, c4 = b4.forward(store, h)
    h, p2 = layers.avg_pool2(h)
    pooled, gap = layers.global_avg_pool(h)
    pre, proj_cache = self.proj.forward(store, pooled)
    features, act = layers.silu(pre)
    logits, head_cache = self.head.forward(store, features)
    cache = (c1, c2, p1, c3, moe_caches, c4, p2, gap, proj_cache, act, head_cache)
    return FaceOutput(
      logits=logits[:, 0],
      features=features,
      gate_scores=[mc.pi for mc in moe_caches],
      cache=cache
    )

  def backward(self, output: FaceOutput, dlogits: np.ndarray, dfeatures: Optional[np.ndarray] = None) -> np.ndarray:
    c1, c2, p1, c3, moe_caches, c4, p2, gap, proj_cache, act, head_cache = output.cache
    store = self.params
    b1, b2, b3, b4 = self.blocks
    dfeat = self.head.backward(store, np.asarray(dlogits).reshape(-1, 1), head_cache)
    if dfeatures is not None:
      dfeat = dfeat + dfeatures
    d = self.proj.backward(store, layers.silu_backward(dfeat, act), proj_cache)
    d = layers.global_avg_pool_backward(d, gap)
    d = layers.avg_pool2_backward(d, p2)
    d = b4.backward(store, d, c4)
    for layer, cache in reversed(list(zip(self.moe, moe_caches))):
      d = layer.backward(store, d, cache)
    d = b3.backward(store, d, c3)
    d = layers.avg_pool2_backward(d, p1)
    d = b2.backward(store, d, c2)
    return b1.backward(store, d, c1)

  def predict(self, images: np.ndarray, batch_size: int = 32) -> FaceOutput:
    """Forward in chunks without keeping caches."""
    logits, features, gates = [], [], []
    for start in range(0, images.shape[0], batch_size):
      out = self.forward(images[start:start + batch_size].astype(self.params.dtype, copy=False))
      logits.append(out.logits)
      features.append(out.features)
      gates.append(out.gate_scores)
    return FaceOutput(
      logits=np.concatenate(logits) if logits else np.zeros(0),
      features=np.concatenate(features) if features else np.zeros((0, self.config.embed_dim)),
      gate_scores=[np.concatenate([g[i] for g in gates]) for i in range(len(self.moe))] if gates else []
    )


def face_forward(face_image: MapLike, model: FaceBranchModel) -> Tuple[np.ndarray, float]:
  batch = as_batch(face_image)
  if batch.shape[1] != 3:
    raise InvalidArgumentError(f'face crops must have 3 channels, got {batch.shape[1]}')
  output = model.forward(batch[:1].astype(model.params.dtype, copy=False))
  return output.features[0], float(output.probabilities[0])


def _check_targets(y_gt) -> np.ndarray:
  targets = np.asarray(y_gt, dtype=np.float64)
  if not np.all((targets == 0) | (targets == 1)):
    raise InvalidArgumentError(f'binary targets must be 0 or 1, got {y_gt}')
  return targets


def bce_loss(y, y_gt):
  """Binary cross-entropy with probabilities clamped to [1e-7, 1 − 1e-7]."""
  targets = _check_targets(y_gt)
  probs = np.clip(np.asarray(y, dtype=np.float64), BCE_EPSILON, 1.0 - BCE_EPSILON)
  loss = -(targets * np.log(probs) + (1.0 - targets) * np.log1p(-probs))
  return float(loss) if loss.ndim == 0 else loss


def bce_from_logits(logits: np.ndarray, y_gt: np.ndarray) -> Tuple[float, np.ndarray]:
  """Mean BCE over a batch of logits and its gradient with respect to the logits."""
  logits = np.asarray(logits)
  targets = _check_targets(y_gt)
  probs = layers.sigmoid(logits.astype(np.float64))
  loss = float(np.mean(bce_loss(probs, targets)))
  grad = (probs - targets) / max(targets.size, 1)
  return loss, grad.astype(logits.dtype)
