from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from forgerydet.config import RunConfig
from forgerydet.core.errors import CheckpointFormatError, UsageError
from forgerydet.core.params import ParameterStore
from forgerydet.models.ctx_backends import ContextBackend, MockContextBackend, RecordedContextBackend, ToyContextModel
from forgerydet.models.ctx_branch import CtxHeads
from forgerydet.models.face_moe import FaceBranchModel
from forgerydet.models.fusion import FusionModel
from forgerydet.storage.checkpoint import checkpoint_metadata, load_checkpoint

logger = logging.getLogger(__name__)


def build_face_model(config: RunConfig, params: Optional[ParameterStore] = None) -> FaceBranchModel:
  return FaceBranchModel(config.face_config(), params)


def build_toy_context(config: RunConfig, params: Optional[ParameterStore] = None) -> ToyContextModel:
  return ToyContextModel(config.ctx_config(), params)


def build_heads(config: RunConfig, params: ParameterStore) -> CtxHeads:
  return CtxHeads(
    embed_dim=config.ctx_embed_dim,
    global_dim=config.ctx_global_dim,
    feature_dim=config.feature_dim,
    hidden=config.head_hidden,
    pooling=config.ctx_pooling,
    params=params
  )


def build_fusion(config: RunConfig, params: ParameterStore) -> FusionModel:
  return FusionModel(feature_dim=config.feature_dim, hidden=config.head_hidden, mode=config.fusion_mode, params=params)


def build_backend(config: RunConfig, ctx_params: Optional[ParameterStore] = None) -> ContextBackend:
  if config.ctx_backend == 'mock':
    return MockContextBackend(seed=config.seed, embed_dim=config.ctx_embed_dim, global_dim=config.ctx_global_dim)
  if config.ctx_backend == 'recorded':
    if not config.recorded_contexts:
      raise UsageError('ctx_backend = recorded needs the "recorded_contexts" key')
    return RecordedContextBackend(config.recorded_contexts)
  if ctx_params is None:
    raise UsageError('the toy context backend needs a trained ctx checkpoint')
  return build_toy_context(config, ctx_params)


def _check_layout(store: ParameterStore, reference: ParameterStore, path: Path) -> ParameterStore:
  """Reject checkpoints whose entries differ from what the configured architecture expects."""
  expected = {name: reference[name].shape for name in reference}
  found = {name: store[name].shape for name in store}
  if expected != found:
    missing = sorted(set(expected) - set(found))
    extra = sorted(set(found) - set(expected))
    reshaped = sorted(name for name in set(expected) & set(found) if expected[name] != found[name])
    raise CheckpointFormatError(
      f'{path} does not match the configured architecture '
      f'(missing {missing[:3]}, unexpected {extra[:3]}, reshaped {reshaped[:3]})',
      field='entries'
    )
  return store


def load_stage_checkpoint(config: RunConfig, stage: str) -> ParameterStore:
  path = config.checkpoint_path(stage)
  if not path.is_file():
    raise CheckpointFormatError(f'stage {stage} checkpoint not found at {path}; run "train --stage {stage}" first', field='path')
  return load_checkpoint(path)


def load_face_model(config: RunConfig) -> FaceBranchModel:
  path = config.checkpoint_path('face')
  store = load_stage_checkpoint(config, 'face')
  reference = build_face_model(config, ParameterStore(store.dtype)).initialize(np.random.default_rng(0)).params
  return build_face_model(config, _check_layout(store, reference, path))


def load_context_backend(config: RunConfig) -> ContextBackend:
  path = config.checkpoint_path('ctx')
  store = load_stage_checkpoint(config, 'ctx')
  trained_with = checkpoint_metadata(path).get('backend')
  if trained_with != config.ctx_backend:
    raise CheckpointFormatError(f'{path} was written for ctx_backend {trained_with!r}, configured {config.ctx_backend!r}', field='backend')
  if config.ctx_backend != 'toy':
    return build_backend(config)
  reference = build_toy_context(config, ParameterStore(store.dtype)).initialize(np.random.default_rng(0)).params
  return build_backend(config, _check_layout(store, reference, path))


def init_fusion_store(config: RunConfig, rng: np.random.Generator) -> ParameterStore:
  store = ParameterStore()
  build_heads(config, store).initialize(rng)
  build_fusion(config, store).initialize(rng)
  return store


@dataclass
class DetectorBundle:
  config: RunConfig
  face: FaceBranchModel
  backend: ContextBackend
  heads: CtxHeads
  fusion: FusionModel


def load_detector(config: RunConfig) -> DetectorBundle:
  face = load_face_model(config)
  backend = load_context_backend(config)
  path = config.checkpoint_path('fusion')
  store = load_stage_checkpoint(config, 'fusion')
  reference = init_fusion_store(config, np.random.default_rng(0))
  _check_layout(store, reference, path)
  logger.info('Loaded detector checkpoints from %s', path.parent)
  return DetectorBundle(
    config=config,
    face=face,
    backend=backend,
    heads=build_heads(config, store),
    fusion=build_fusion(config, store)
  )
