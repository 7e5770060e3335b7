"""Context-encoder backends producing ``ContextOutput`` (W, h_s, f_clip) for full-frame images.

``mock``     seeded hash of image statistics → fixed pseudo-random embeddings
``toy``      small trainable conv encoder plus a conditioned token decoder
``recorded`` precomputed outputs read from a container file keyed by sample id
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from cachetools import LRUCache, cached

from forgerydet.core import layers
from forgerydet.core.errors import ContextLookupError, InvalidArgumentError
from forgerydet.core.params import ParameterStore
from forgerydet.core.tensor import MapLike, as_array
from forgerydet.models.ctx_branch import (
  BOS_ID,
  MAX_TOKENS,
  SENTINEL_ID,
  VOCABULARY,
  ContextOutput,
  RationaleSequence,
  next_token_nll_grad
)
from forgerydet.models.modules import Conv, Dense
from forgerydet.storage.checkpoint import Container, read_container, write_container

logger = logging.getLogger(__name__)

RECORDED_KIND = 'recorded-contexts'


class ContextBackend(Protocol):
  name: str

  def encode_batch(self, images: np.ndarray, sample_ids: Sequence[Optional[str]]) -> List[ContextOutput]:
    ...


@dataclass
class CtxConfig:
  embed_dim: int = 32
  global_dim: int = 16
  max_tokens: int = MAX_TOKENS
  encoder_channels: Tuple[int, int] = (8, 16)


class MockContextBackend:
  name = 'mock'

  def __init__(self, seed: int = 0, tokens: int = MAX_TOKENS, embed_dim: int = 32, global_dim: int = 16) -> None:
    self.seed = int(seed)
    self.tokens = tokens
    self.embed_dim = embed_dim
    self.global_dim = global_dim

  @staticmethod
  def image_statistics(image: np.ndarray, grid: int = 8) -> np.ndarray:
    channel_mean = image.mean(axis=(1, 2))
    channel_std = image.std(axis=(1, 2))
    blocks = [
      block.mean(axis=(1, 2))
      for band in np.array_split(image, grid, axis=1)
      for block in np.array_split(band, grid, axis=2)
    ]
    return np.concatenate([channel_mean, channel_std, np.concatenate(blocks)]).astype('<f8')

  def encode_one(self, image: np.ndarray) -> ContextOutput:
    digest = hashlib.sha256()
    digest.update(self.seed.to_bytes(8, 'little', signed=True))
    digest.update(self.image_statistics(image).tobytes())
    rng = np.random.default_rng(int.from_bytes(digest.digest()[:16], 'little'))
    return ContextOutput(
      token_embeddings=rng.standard_normal((self.tokens, self.embed_dim)),
      sentinel_state=rng.standard_normal(self.embed_dim),
      global_visual=rng.standard_normal(self.global_dim)
    )

  def encode_batch(self, images: np.ndarray, sample_ids: Sequence[Optional[str]]) -> List[ContextOutput]:
    return [self.encode_one(image) for image in images]


class ToyContextModel:
  """Trainable toy context encoder under the ``ctx.`` namespace.

  Visual encoder: pool/2 → conv3×3 3→c1, SiLU → pool/4 → conv3×3 c1→c2, SiLU → GAP →
  linear → tanh = f_clip. Token state for an input token y with visual vector f:
  ``h = tanh(E[y] + U·f + b)``; next-token logits are ``h·W_o + b_o``.
  """

  name = 'toy'
  prefix = 'ctx'

  def __init__(self, config: Optional[CtxConfig] = None, params: Optional[ParameterStore] = None) -> None:
    self.config = config or CtxConfig()
    self.params = params if params is not None else ParameterStore()
    c1, c2 = self.config.encoder_channels
    p = self.prefix
    self.enc1 = Conv(f'{p}.enc1', 3, c1)
    self.enc2 = Conv(f'{p}.enc2', c1, c2)
    self.visual = Dense(f'{p}.visual', c2, self.config.global_dim)
    self.cond = Dense(f'{p}.cond', self.config.global_dim, self.config.embed_dim)
    self.out = Dense(f'{p}.out', self.config.embed_dim, len(VOCABULARY))

  @property
  def embedding_name(self) -> str:
    return f'{self.prefix}.embed'

  def initialize(self, rng: np.random.Generator) -> 'ToyContextModel':
    for module in (self.enc1, self.enc2, self.visual):
      module.init_params(self.params, rng)
    self.params.add(self.embedding_name, rng.normal(0.0, 0.5, size=(len(VOCABULARY), self.config.embed_dim)))
    self.cond.init_params(self.params, rng)
    self.out.init_params(self.params, rng)
    return self

  def encode_visual(self, images: np.ndarray):
    if images.ndim != 4 or images.shape[1] != 3:
      raise InvalidArgumentError(f'context encoder expects N×3×H×W images, got {images.shape}')
    store = self.params
    x = images.astype(store.dtype, copy=False)
    x, pool1 = layers.avg_pool(x, 2)
    x, conv1 = self.enc1.forward(store, x)
    x, act1 = layers.silu(x)
    x, pool2 = layers.avg_pool(x, 4)
    x, conv2 = self.enc2.forward(store, x)
    x, act2 = layers.silu(x)
    x, gap = layers.global_avg_pool(x)
    x, visual = self.visual.forward(store, x)
    f_clip, act3 = layers.tanh(x)
    return f_clip, (conv1, act1, pool2, conv2, act2, gap, visual, act3)

  def encode_visual_backward(self, df_clip: np.ndarray, cache) -> None:
    conv1, act1, pool2, conv2, act2, gap, visual, act3 = cache
    store = self.params
    d = layers.tanh_backward(df_clip, act3)
    d = self.visual.backward(store, d, visual)
    d = layers.global_avg_pool_backward(d, gap)
    d = layers.silu_backward(d, act2)
    d = self.enc2.backward(store, d, conv2)
    d = layers.avg_pool_backward(d, pool2)
    d = layers.silu_backward(d, act1)
    self.enc1.backward(store, d, conv1)

  def _conditioning(self, f_clip: np.ndarray):
    return self.cond.forward(self.params, f_clip)

  def token_states(self, conditioning: np.ndarray, token_ids: np.ndarray) -> np.ndarray:
    """``conditioning`` is N×e, ``token_ids`` N×T → hidden states N×T×e."""
    return np.tanh(self.params[self.embedding_name][token_ids] + conditioning[:, np.newaxis, :])

  def logits(self, states: np.ndarray) -> np.ndarray:
    return states @ self.params[f'{self.out.prefix}.w'] + self.params[f'{self.out.prefix}.b']

  def loss_and_backward(self, images: np.ndarray, sequences: Sequence[RationaleSequence]) -> float:
    """Mean per-sample next-token NLL under teacher forcing; gradients accumulate into the store."""
    if len(sequences) != images.shape[0] or not sequences:
      raise InvalidArgumentError('need one rationale per image')
    store = self.params
    f_clip, visual_cache = self.encode_visual(images)
    conditioning, cond_cache = self._conditioning(f_clip)
    count = len(sequences)
    total = 0.0
    dconditioning = np.zeros_like(conditioning)
    dembed = np.zeros_like(store[self.embedding_name])
    dout_w = np.zeros_like(store[f'{self.out.prefix}.w'])
    dout_b = np.zeros_like(store[f'{self.out.prefix}.b'])
    out_w = store[f'{self.out.prefix}.w']
    for i, sequence in enumerate(sequences):
      inputs = np.asarray(sequence.decoder_inputs())
      states = self.token_states(conditioning[i:i + 1], inputs[np.newaxis])[0]
      loss, dlogits = next_token_nll_grad(self.logits(states), sequence)
      total += loss
      dlogits = dlogits / count
      dout_w += states.T @ dlogits
      dout_b += dlogits.sum(axis=0)
      dpre = (dlogits @ out_w.T) * (1.0 - states * states)
      np.add.at(dembed, inputs, dpre)
      dconditioning[i] = dpre.sum(axis=0)
    store.accumulate(f'{self.out.prefix}.w', dout_w)
    store.accumulate(f'{self.out.prefix}.b', dout_b)
    store.accumulate(self.embedding_name, dembed)
    df_clip = self.cond.backward(store, dconditioning, cond_cache)
    self.encode_visual_backward(df_clip, visual_cache)
    return total / count

  def sequence_loss(self, images: np.ndarray, sequences: Sequence[RationaleSequence]) -> float:
    f_clip, _ = self.encode_visual(images)
    conditioning, _ = self._conditioning(f_clip)
    total = 0.0
    for i, sequence in enumerate(sequences):
      states = self.token_states(conditioning[i:i + 1], np.asarray(sequence.decoder_inputs())[np.newaxis])[0]
      total += next_token_nll_grad(self.logits(states), sequence)[0]
    return total / max(len(sequences), 1)

  def decode_steps(self, conditioning: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Greedy decoding for exactly ``max_tokens`` steps.

    Returns two N×T id arrays: the token fed at each step (BOS first, then the
    previous choice) and the token chosen there. Once a row has emitted the
    sentinel it keeps feeding and choosing the sentinel.
    """
    count = conditioning.shape[0]
    steps = self.config.max_tokens
    inputs = np.empty((count, steps), dtype=np.int64)
    choices = np.empty((count, steps), dtype=np.int64)
    previous = np.full(count, BOS_ID, dtype=np.int64)
    done = np.zeros(count, dtype=bool)
    for step in range(steps):
      inputs[:, step] = previous
      states = self.token_states(conditioning, previous[:, np.newaxis])[:, 0]
      choice = np.where(done, SENTINEL_ID, np.argmax(self.logits(states), axis=1))
      choices[:, step] = choice
      done |= choice == SENTINEL_ID
      previous = choice
    return inputs, choices

  def greedy_decode(self, conditioning: np.ndarray) -> List[List[int]]:
    """Decoded ids up to and including the first sentinel; a row that never stops ends on one."""
    _, choices = self.decode_steps(conditioning)
    generated = []
    for row in choices:
      stops = np.flatnonzero(row == SENTINEL_ID)
      tokens = [int(t) for t in (row[:stops[0] + 1] if stops.size else row)]
      tokens[-1] = SENTINEL_ID
      generated.append(tokens)
    return generated

  def encode_batch(self, images: np.ndarray, sample_ids: Sequence[Optional[str]] = ()) -> List[ContextOutput]:
    """One state per decode step, so W is always ``max_tokens``×e."""
    f_clip, _ = self.encode_visual(images)
    conditioning, _ = self._conditioning(f_clip)
    inputs, _ = self.decode_steps(conditioning)
    w = self.token_states(conditioning, inputs)
    sentinel = self.token_states(conditioning, np.full((len(f_clip), 1), SENTINEL_ID))[:, 0]
    return [
      ContextOutput(token_embeddings=w[i], sentinel_state=sentinel[i], global_visual=f_clip[i])
      for i in range(len(f_clip))
    ]

  def rationales(self, images: np.ndarray) -> List[RationaleSequence]:
    f_clip, _ = self.encode_visual(images)
    conditioning, _ = self._conditioning(f_clip)
    return [RationaleSequence.from_ids(tokens) for tokens in self.greedy_decode(conditioning)]


@cached(cache=LRUCache(maxsize=8))
def _load_records(path: str, mtime_ns: int, size: int) -> Dict[str, ContextOutput]:
  container = read_container(path)
  grouped: Dict[str, Dict[str, np.ndarray]] = {}
  for name, array in container.arrays.items():
    sample_id, _, field = name.rpartition('/')
    grouped.setdefault(sample_id, {})[field] = array
  records = {}
  for sample_id, fields in grouped.items():
    missing = {'W', 'h_s', 'f_clip'} - set(fields)
    if missing:
      raise InvalidArgumentError(f'recorded context {sample_id!r} lacks {sorted(missing)}')
    records[sample_id] = ContextOutput(fields['W'], fields['h_s'], fields['f_clip'])
  logger.info('Loaded %d recorded contexts from %s', len(records), path)
  return records


class RecordedContextBackend:
  name = 'recorded'

  def __init__(self, path: Union[str, Path]) -> None:
    self.path = Path(path)

  def records(self) -> Dict[str, ContextOutput]:
    stat = self.path.stat() if self.path.is_file() else None
    if stat is None:
      return _load_records(str(self.path), 0, 0)
    return _load_records(str(self.path.resolve()), stat.st_mtime_ns, stat.st_size)

  def lookup(self, sample_id: Optional[str]) -> ContextOutput:
    records = self.records()
    if sample_id is None or sample_id not in records:
      raise ContextLookupError(str(sample_id))
    return records[sample_id]

  def encode_batch(self, images: np.ndarray, sample_ids: Sequence[Optional[str]]) -> List[ContextOutput]:
    return [self.lookup(sample_id) for sample_id in sample_ids]


def write_recorded_contexts(records: Mapping[str, ContextOutput], path: Union[str, Path]) -> Path:
  arrays: Dict[str, np.ndarray] = {}
  for sample_id in records:
    if not sample_id:
      raise InvalidArgumentError('recorded contexts need non-empty sample ids')
    record = records[sample_id]
    arrays[f'{sample_id}/W'] = record.token_embeddings.astype(np.float32)
    arrays[f'{sample_id}/h_s'] = record.sentinel_state.astype(np.float32)
    arrays[f'{sample_id}/f_clip'] = record.global_visual.astype(np.float32)
  metadata = {'kind': RECORDED_KIND, 'ids': list(records)}
  return write_container(Container(arrays=arrays, metadata=metadata), path)


def encode_context(image: MapLike, backend: ContextBackend, sample_id: Optional[str] = None) -> ContextOutput:
  array = as_array(image)
  if array.ndim != 3 or array.shape[0] != 3:
    raise InvalidArgumentError(f'encode_context expects a 3×H×W image, got shape {array.shape}')
  return backend.encode_batch(array[np.newaxis], [sample_id])[0]
