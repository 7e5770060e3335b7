"""Forward/backward pairs for the layers the detector is assembled from.

Every forward returns ``(output, cache)``; the matching ``*_backward`` takes the
upstream gradient and that cache and returns gradients for the input and, where
present, the layer's parameters. Arrays are batched ``N×C×H×W`` (maps) or ``N×F``
(vectors).
"""
from __future__ import annotations

from typing import Any, Tuple

import numpy as np
from scipy.special import expit, softmax as _softmax

from forgerydet.core.errors import InvalidArgumentError

Cache = Tuple[Any, ...]


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, Cache]:
  """Stride-1 convolution with zero "same" padding; ``w`` is ``out×in×kh×kw``."""
  n, c, h, width = x.shape
  out_channels, in_channels, kh, kw = w.shape
  if in_channels != c:
    raise InvalidArgumentError(f'conv expects {in_channels} input channels, got {c}')
  if kh % 2 == 0 or kw % 2 == 0:
    raise InvalidArgumentError('conv kernels must have odd extents')
  ph, pw = (kh - 1) // 2, (kw - 1) // 2
  padded = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
  out = np.zeros((out_channels, n, h, width), dtype=np.result_type(x, w))
  for i in range(kh):
    for j in range(kw):
      patch = padded[:, :, i:i + h, j:j + width]
      out += np.tensordot(w[:, :, i, j], patch, axes=([1], [1]))
  out = out.transpose(1, 0, 2, 3) + b[np.newaxis, :, np.newaxis, np.newaxis]
  return np.ascontiguousarray(out), (padded, x.shape)


def conv2d_backward(dout: np.ndarray, cache: Cache, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
  padded, x_shape = cache
  _, _, h, width = x_shape
  _, _, kh, kw = w.shape
  ph, pw = (kh - 1) // 2, (kw - 1) // 2
  dout_t = dout.transpose(1, 0, 2, 3)
  dpadded = np.zeros_like(padded)
  dw = np.zeros_like(w)
  for i in range(kh):
    for j in range(kw):
      patch = padded[:, :, i:i + h, j:j + width]
      dw[:, :, i, j] = np.tensordot(dout, patch, axes=([0, 2, 3], [0, 2, 3]))
      dpadded[:, :, i:i + h, j:j + width] += np.tensordot(w[:, :, i, j], dout_t, axes=([0], [0])).transpose(1, 0, 2, 3)
  db = dout.sum(axis=(0, 2, 3))
  dx = dpadded[:, :, ph:ph + h, pw:pw + width]
  return np.ascontiguousarray(dx), dw, db


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, Cache]:
  if x.shape[-1] != w.shape[0]:
    raise InvalidArgumentError(f'linear expects {w.shape[0]} inputs, got {x.shape[-1]}')
  return x @ w + b, (x,)


def linear_backward(dout: np.ndarray, cache: Cache, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
  (x,) = cache
  return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def silu(x: np.ndarray) -> Tuple[np.ndarray, Cache]:
  s = expit(x)
  return x * s, (x, s)


def silu_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
  x, s = cache
  return dout * (s + x * s * (1.0 - s))


def tanh(x: np.ndarray) -> Tuple[np.ndarray, Cache]:
  out = np.tanh(x)
  return out, (out,)


def tanh_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
  (out,) = cache
  return dout * (1.0 - out * out)


def sigmoid(x: np.ndarray) -> np.ndarray:
  return expit(x)


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
  # scipy subtracts the running max before exponentiating
  return _softmax(x, axis=axis)


def softmax_backward(dout: np.ndarray, probs: np.ndarray, axis: int) -> np.ndarray:
  return probs * (dout - np.sum(dout * probs, axis=axis, keepdims=True))


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> Tuple[np.ndarray, Cache]:
  """Per-sample normalization over C×H×W with per-channel affine parameters."""
  mean = x.mean(axis=(1, 2, 3), keepdims=True)
  centered = x - mean
  var = np.mean(centered * centered, axis=(1, 2, 3), keepdims=True)
  inv_std = 1.0 / np.sqrt(var + eps)
  xhat = centered * inv_std
  out = gamma[np.newaxis, :, np.newaxis, np.newaxis] * xhat + beta[np.newaxis, :, np.newaxis, np.newaxis]
  return out, (xhat, inv_std, gamma)


def layer_norm_backward(dout: np.ndarray, cache: Cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
  xhat, inv_std, gamma = cache
  dgamma = np.sum(dout * xhat, axis=(0, 2, 3))
  dbeta = dout.sum(axis=(0, 2, 3))
  dxhat = dout * gamma[np.newaxis, :, np.newaxis, np.newaxis]
  count = xhat[0].size
  dx = (inv_std / count) * (
    count * dxhat
    - dxhat.sum(axis=(1, 2, 3), keepdims=True)
    - xhat * np.sum(dxhat * xhat, axis=(1, 2, 3), keepdims=True)
  )
  return dx, dgamma, dbeta


def avg_pool2(x: np.ndarray) -> Tuple[np.ndarray, Cache]:
  n, c, h, w = x.shape
  if h % 2 or w % 2:
    raise InvalidArgumentError(f'2×2 pooling needs even spatial extents, got {h}×{w}')
  out = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
  return out, (x.shape,)


def avg_pool2_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
  return np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) * 0.25


def avg_pool(x: np.ndarray, factor: int) -> Tuple[np.ndarray, Cache]:
  n, c, h, w = x.shape
  if h % factor or w % factor:
    raise InvalidArgumentError(f'{factor}×{factor} pooling needs extents divisible by {factor}, got {h}×{w}')
  out = x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
  return out, (factor,)


def avg_pool_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
  (factor,) = cache
  return np.repeat(np.repeat(dout, factor, axis=2), factor, axis=3) / float(factor * factor)


def global_avg_pool(x: np.ndarray) -> Tuple[np.ndarray, Cache]:
  return x.mean(axis=(2, 3)), (x.shape,)


def global_avg_pool_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
  (shape,) = cache
  n, c, h, w = shape
  return np.broadcast_to(dout[:, :, np.newaxis, np.newaxis] / float(h * w), shape).copy()


def fan_in_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
  bound = 1.0 / np.sqrt(max(fan_in, 1))
  return rng.uniform(-bound, bound, size=shape)
