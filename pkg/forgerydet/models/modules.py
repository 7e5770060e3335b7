from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from forgerydet.core import layers
from forgerydet.core.params import ParameterStore


@dataclass
class Conv:
  prefix: str
  in_channels: int
  out_channels: int
  kernel: int = 3

  def init_params(self, store: ParameterStore, rng: np.random.Generator) -> None:
    fan_in = self.in_channels * self.kernel * self.kernel
    store.add(f'{self.prefix}.w', layers.fan_in_uniform(rng, (self.out_channels, self.in_channels, self.kernel, self.kernel), fan_in))
    store.add(f'{self.prefix}.b', np.zeros(self.out_channels))

  def forward(self, store: ParameterStore, x: np.ndarray):
    return layers.conv2d(x, store[f'{self.prefix}.w'], store[f'{self.prefix}.b'])

  def backward(self, store: ParameterStore, dout: np.ndarray, cache) -> np.ndarray:
    dx, dw, db = layers.conv2d_backward(dout, cache, store[f'{self.prefix}.w'])
    store.accumulate(f'{self.prefix}.w', dw)
    store.accumulate(f'{self.prefix}.b', db)
    return dx


@dataclass
class Dense:
  prefix: str
  in_features: int
  out_features: int
  zero_init: bool = False

  def init_params(self, store: ParameterStore, rng: np.random.Generator) -> None:
    if self.zero_init:
      weight = np.zeros((self.in_features, self.out_features))
    else:
      weight = layers.fan_in_uniform(rng, (self.in_features, self.out_features), self.in_features)
    store.add(f'{self.prefix}.w', weight)
    store.add(f'{self.prefix}.b', np.zeros(self.out_features))

  def forward(self, store: ParameterStore, x: np.ndarray):
    return layers.linear(x, store[f'{self.prefix}.w'], store[f'{self.prefix}.b'])

  def backward(self, store: ParameterStore, dout: np.ndarray, cache) -> np.ndarray:
    dx, dw, db = layers.linear_backward(dout, cache, store[f'{self.prefix}.w'])
    store.accumulate(f'{self.prefix}.w', dw)
    store.accumulate(f'{self.prefix}.b', db)
    return dx


@dataclass
class Norm:
  prefix: str
  channels: int

  def init_params(self, store: ParameterStore, rng: np.random.Generator) -> None:
    store.add(f'{self.prefix}.g', np.ones(self.channels))
    store.add(f'{self.prefix}.b', np.zeros(self.channels))

  def forward(self, store: ParameterStore, x: np.ndarray):
    return layers.layer_norm(x, store[f'{self.prefix}.g'], store[f'{self.prefix}.b'])

  def backward(self, store: ParameterStore, dout: np.ndarray, cache) -> np.ndarray:
    dx, dgamma, dbeta = layers.layer_norm_backward(dout, cache)
    store.accumulate(f'{self.prefix}.g', dgamma)
    store.accumulate(f'{self.prefix}.b', dbeta)
    return dx


@dataclass
class ConvBlock:
  """conv → layer norm → SiLU."""

  prefix: str
  in_channels: int
  out_channels: int

  def __post_init__(self) -> None:
    self.conv = Conv(f'{self.prefix}.conv', self.in_channels, self.out_channels)
    self.norm = Norm(f'{self.prefix}.norm', self.out_channels)

  def init_params(self, store: ParameterStore, rng: np.random.Generator) -> None:
    self.conv.init_params(store, rng)
    self.norm.init_params(store, rng)

  def forward(self, store: ParameterStore, x: np.ndarray):
    y, conv_cache = self.conv.forward(store, x)
    y, norm_cache = self.norm.forward(store, y)
    y, act_cache = layers.silu(y)
    return y, (conv_cache, norm_cache, act_cache)

  def backward(self, store: ParameterStore, dout: np.ndarray, cache) -> np.ndarray:
    conv_cache, norm_cache, act_cache = cache
    d = layers.silu_backward(dout, act_cache)
    d = self.norm.backward(store, d, norm_cache)
    return self.conv.backward(store, d, conv_cache)


@dataclass
class Perceptron:
  """Two-layer MLP ``in → hidden → out`` with SiLU in between."""

  prefix: str
  in_features: int
  hidden: int
  out_features: int

  def __post_init__(self) -> None:
    self.first = Dense(f'{self.prefix}.fc1', self.in_features, self.hidden)
    self.second = Dense(f'{self.prefix}.fc2', self.hidden, self.out_features)

  def init_params(self, store: ParameterStore, rng: np.random.Generator) -> None:
    self.first.init_params(store, rng)
    self.second.init_params(store, rng)

  def forward(self, store: ParameterStore, x: np.ndarray):
    h, first_cache = self.first.forward(store, x)
    h, act_cache = layers.silu(h)
    out, second_cache = self.second.forward(store, h)
    return out, (first_cache, act_cache, second_cache)

  def backward(self, store: ParameterStore, dout: np.ndarray, cache) -> np.ndarray:
    first_cache, act_cache, second_cache = cache
    d = self.second.backward(store, dout, second_cache)
    d = layers.silu_backward(d, act_cache)
    return self.first.backward(store, d, first_cache)

  def zero_output(self, store: ParameterStore) -> None:
    """Zero the output layer so the head emits exactly 0 for any input."""
    store[f'{self.second.prefix}.w'][...] = 0
    store[f'{self.second.prefix}.b'][...] = 0
