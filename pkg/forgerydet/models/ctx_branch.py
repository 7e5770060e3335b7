"""Contextualized branch heads, the toy rationale vocabulary and the stage-one token loss."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax

from forgerydet.core import layers
from forgerydet.core.errors import InvalidArgumentError, NumericFailureError
from forgerydet.core.params import ParameterStore
from forgerydet.models.modules import Perceptron

SENTINEL = '<s>'
BOS = '<bos>'
MAX_TOKENS = 8

VOCABULARY: Tuple[str, ...] = (
  SENTINEL, BOS,
  'real', 'photo', 'blending', 'boundary', 'near', 'face', 'unnaturally', 'smooth', 'skin',
  'eyes', 'mouth', 'jaw', 'cheek', 'hair', 'edge', 'seam', 'texture', 'lighting', 'sharp',
  'oversmoothed', 'visible', 'around', 'the', 'no', 'artifacts', 'forged', 'natural', 'region',
  'background', '<unk>'
)
TOKEN_IDS: Dict[str, int] = {token: index for index, token in enumerate(VOCABULARY)}
SENTINEL_ID = TOKEN_IDS[SENTINEL]
BOS_ID = TOKEN_IDS[BOS]

RATIONALE_TEMPLATES: Dict[str, str] = {
  'real': 'real photo',
  'blend_partial': 'blending boundary near face',
  'smooth_full': 'unnaturally smooth skin'
}


@dataclass(frozen=True)
class RationaleSequence:
  """Token ids ``y_1..y_T``; the last id is always the sentinel."""

  ids: Tuple[int, ...]
  text: str = ''

  def __post_init__(self) -> None:
    ids = tuple(int(i) for i in self.ids)
    if not 1 <= len(ids) <= MAX_TOKENS:
      raise InvalidArgumentError(f'rationale length must be in [1, {MAX_TOKENS}], got {len(ids)}')
    if any(i < 0 or i >= len(VOCABULARY) for i in ids):
      raise InvalidArgumentError(f'rationale ids must be < {len(VOCABULARY)}, got {ids}')
    object.__setattr__(self, 'ids', ids)

  def __len__(self) -> int:
    return len(self.ids)

  @classmethod
  def from_text(cls, text: str) -> 'RationaleSequence':
    words = text.split()
    ids = [TOKEN_IDS.get(word, TOKEN_IDS['<unk>']) for word in words[:MAX_TOKENS - 1]]
    return cls(ids=tuple(ids) + (SENTINEL_ID,), text=' '.join(words))

  @classmethod
  def from_ids(cls, ids: Sequence[int]) -> 'RationaleSequence':
    """Decoded ids with their text: the words before the sentinel."""
    sequence = cls(ids=tuple(ids))
    return cls(ids=sequence.ids, text=' '.join(sequence.words()[:-1]))

  @classmethod
  def for_source(cls, source: str) -> 'RationaleSequence':
    try:
      return cls.from_text(RATIONALE_TEMPLATES[source])
    except KeyError:
      raise InvalidArgumentError(f'no rationale template for source {source!r}') from None

  def decoder_inputs(self) -> Tuple[int, ...]:
    return (BOS_ID,) + self.ids[:-1]

  def words(self) -> List[str]:
    return [VOCABULARY[i] for i in self.ids]


@dataclass
class ContextOutput:
  token_embeddings: np.ndarray
  sentinel_state: np.ndarray
  global_visual: np.ndarray

  def __post_init__(self) -> None:
    w = np.atleast_2d(np.asarray(self.token_embeddings, dtype=np.float64))
    h_s = np.asarray(self.sentinel_state, dtype=np.float64).reshape(-1)
    f_clip = np.asarray(self.global_visual, dtype=np.float64).reshape(-1)
    if w.shape[0] < 1 or w.shape[1] != h_s.size:
      raise InvalidArgumentError(f'token matrix {w.shape} does not match sentinel width {h_s.size}')
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(h_s)) and np.all(np.isfinite(f_clip))):
      raise NumericFailureError('context output contains non-finite entries')
    self.token_embeddings, self.sentinel_state, self.global_visual = w, h_s, f_clip

  @property
  def tokens(self) -> int:
    return self.token_embeddings.shape[0]

  @property
  def embed_dim(self) -> int:
    return self.token_embeddings.shape[1]

  @property
  def global_dim(self) -> int:
    return self.global_visual.size

  def allclose(self, other: 'ContextOutput', atol: float = 1e-7) -> bool:
    return (
      self.token_embeddings.shape == other.token_embeddings.shape
      and np.allclose(self.token_embeddings, other.token_embeddings, rtol=0, atol=atol)
      and np.allclose(self.sentinel_state, other.sentinel_state, rtol=0, atol=atol)
      and np.allclose(self.global_visual, other.global_visual, rtol=0, atol=atol)
    )


class Pooling(str, Enum):
  MAX = 'max'
  MEAN = 'mean'


def pool_tokens(w: np.ndarray, pooling: Pooling = Pooling.MAX) -> Tuple[np.ndarray, tuple]:
  w = np.asarray(w)
  if w.ndim != 2 or w.shape[0] < 1:
    raise InvalidArgumentError(f'token matrix must be N×e with N >= 1, got shape {w.shape}')
  if Pooling(pooling) is Pooling.MEAN:
    return w.mean(axis=0), (w.shape, None)
  return w.max(axis=0), (w.shape, np.argmax(w, axis=0))


def pool_tokens_backward(dpooled: np.ndarray, cache: tuple) -> np.ndarray:
  shape, winners = cache
  if winners is None:
    return np.broadcast_to(dpooled / shape[0], shape).copy()
  dw = np.zeros(shape, dtype=dpooled.dtype)
  dw[winners, np.arange(shape[1])] = dpooled
  return dw


class CtxHeads:
  """Projection head (pooled W → f_ctx) and confidence head ([h_s; f_clip] → c), under ``heads.``."""

  prefix = 'heads'

  def __init__(
    self,
    embed_dim: int,
    global_dim: int,
    feature_dim: int = 128,
    hidden: int = 64,
    pooling: Pooling = Pooling.MAX,
    params: Optional[ParameterStore] = None
  ) -> None:
    self.embed_dim = embed_dim
    self.global_dim = global_dim
    self.feature_dim = feature_dim
    self.pooling = Pooling(pooling)
    self.params = params if params is not None else ParameterStore()
    self.projection = Perceptron(f'{self.prefix}.proj', embed_dim, hidden, feature_dim)
    self.confidence_head = Perceptron(f'{self.prefix}.conf', embed_dim + global_dim, hidden, 1)

  def initialize(self, rng: np.random.Generator) -> 'CtxHeads':
    self.projection.init_params(self.params, rng)
    self.confidence_head.init_params(self.params, rng)
    return self

  def pool(self, token_matrices: Sequence[np.ndarray]) -> Tuple[np.ndarray, list]:
    pooled, caches = [], []
    for w in token_matrices:
      if np.asarray(w).ndim != 2 or np.asarray(w).shape[1] != self.embed_dim:
        raise InvalidArgumentError(f'token embeddings must be N×{self.embed_dim}, got {np.asarray(w).shape}')
      vector, cache = pool_tokens(w, self.pooling)
      pooled.append(vector)
      caches.append(cache)
    return np.stack(pooled).astype(self.params.dtype, copy=False), caches

  def project_forward(self, pooled: np.ndarray):
    return self.projection.forward(self.params, pooled)

  def project_backward(self, dout: np.ndarray, cache) -> np.ndarray:
    return self.projection.backward(self.params, dout, cache)

  def confidence_forward(self, h_s: np.ndarray, f_clip: np.ndarray):
    h_s = np.atleast_2d(h_s)
    f_clip = np.atleast_2d(f_clip)
    if h_s.shape[1] != self.embed_dim or f_clip.shape[1] != self.global_dim:
      raise InvalidArgumentError(
        f'confidence head expects widths ({self.embed_dim}, {self.global_dim}), got ({h_s.shape[1]}, {f_clip.shape[1]})'
      )
    joint = np.concatenate([h_s, f_clip], axis=1).astype(self.params.dtype, copy=False)
    logits, cache = self.confidence_head.forward(self.params, joint)
    return layers.sigmoid(logits[:, 0]), (logits[:, 0], cache)

  def confidence_backward(self, dc: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray]:
    """Backward from dL/dc; returns gradients for (h_s, f_clip)."""
    logits, head_cache = cache
    c = layers.sigmoid(logits)
    djoint = self.confidence_head.backward(self.params, (dc * c * (1.0 - c))[:, np.newaxis], head_cache)
    return djoint[:, :self.embed_dim], djoint[:, self.embed_dim:]


def project_ctx(w: np.ndarray, heads: CtxHeads) -> np.ndarray:
  pooled, _ = heads.pool([w])
  f_ctx, _ = heads.project_forward(pooled)
  return f_ctx[0]


def confidence(h_s: np.ndarray, f_clip: np.ndarray, heads: CtxHeads) -> float:
  h_s = np.asarray(h_s).reshape(1, -1)
  f_clip = np.asarray(f_clip).reshape(1, -1)
  c, _ = heads.confidence_forward(h_s, f_clip)
  return float(c[0])


TargetsLike = Union[RationaleSequence, Sequence[int]]


def _target_ids(logit_rows: np.ndarray, targets: TargetsLike) -> np.ndarray:
  ids = np.asarray(targets.ids if isinstance(targets, RationaleSequence) else targets, dtype=np.int64)
  if logit_rows.ndim != 2 or logit_rows.shape[0] != ids.size:
    raise InvalidArgumentError(f'{ids.size} targets for logit rows of shape {logit_rows.shape}')
  if ids.size and (ids.min() < 0 or ids.max() >= logit_rows.shape[1]):
    raise InvalidArgumentError(f'target ids must be < vocabulary size {logit_rows.shape[1]}')
  return ids


def next_token_nll(logit_rows: np.ndarray, targets: TargetsLike) -> float:
  """−Σ_t log softmax(logit_rows[t])[y_t]."""
  rows = np.asarray(logit_rows, dtype=np.float64)
  ids = _target_ids(rows, targets)
  return float(-np.sum(log_softmax(rows, axis=1)[np.arange(ids.size), ids]))


def next_token_nll_grad(logit_rows: np.ndarray, targets: TargetsLike) -> Tuple[float, np.ndarray]:
  rows = np.asarray(logit_rows)
  ids = _target_ids(rows, targets)
  log_probs = log_softmax(rows.astype(np.float64), axis=1)
  grad = np.exp(log_probs)
  grad[np.arange(ids.size), ids] -= 1.0
  return float(-np.sum(log_probs[np.arange(ids.size), ids])), grad.astype(rows.dtype)
