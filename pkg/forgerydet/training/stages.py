"""The three training stages.

``ctx``     toy context encoder/decoder on next-token NLL of the rationales (namespace ``ctx``)
``face``    face branch on BCE over face crops (namespace ``face``)
``fusion``  projection, confidence and fusion heads on frozen-branch features
            (namespaces ``heads`` and ``fusion``)

Each stage draws its initialization and batch order from generators seeded by
``(seed, stage index)``, so a (config, seed) pair fixes every loss value.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence

import numpy as np

from forgerydet.config import STAGES, RunConfig
from forgerydet.core.errors import ForgeryDetError, InvalidArgumentError
from forgerydet.core.params import ParameterStore
from forgerydet.data.manifest import Sample, filter_split, read_manifest
from forgerydet.logging.event_logger import EventLogger
from forgerydet.models.ctx_branch import RationaleSequence
from forgerydet.models.face_moe import FaceBranchModel, bce_from_logits
from forgerydet.pipeline.bundle import (
  build_face_model,
  build_fusion,
  build_heads,
  build_toy_context,
  init_fusion_store,
  load_context_backend,
  load_face_model
)
from forgerydet.pipeline.dataset import PreparedSample, prepare_samples, stack_images
from forgerydet.pipeline.features import extract_features, fusion_forward, require_rows
from forgerydet.resources.monitor import ResourceMonitor
from forgerydet.storage.checkpoint import save_checkpoint
from forgerydet.training.optim import SGD
from forgerydet.training.records import StageRecord

logger = logging.getLogger(__name__)

STAGE_INDEX = {stage: index + 1 for index, stage in enumerate(STAGES)}


@dataclass
class StageResult:
  stage: str
  checkpoint: Path
  record: StageRecord


def stage_rngs(seed: int, stage: str):
  """(initialization, batch order) generators for one stage."""
  index = STAGE_INDEX[stage]
  return np.random.default_rng([seed, index]), np.random.default_rng([seed, index, 1])


def batches(count: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
  order = rng.permutation(count)
  for start in range(0, count, batch_size):
    yield order[start:start + batch_size]


def run_epochs(
  stage: str,
  count: int,
  epochs: int,
  batch_size: int,
  order_rng: np.random.Generator,
  optimizer: SGD,
  step: Callable[[np.ndarray], float],
  events: Optional[EventLogger] = None
) -> List[float]:
  """Generic epoch loop; ``step`` computes one batch loss and accumulates gradients."""
  trace: List[float] = []
  for epoch in range(epochs):
    losses = []
    for indices in batches(count, batch_size, order_rng):
      optimizer.zero_grad()
      losses.append(step(indices))
      optimizer.step()
    mean = float(np.mean(losses))
    trace.append(mean)
    logger.info('Stage %s epoch %d/%d: loss %.6f', stage, epoch + 1, epochs, mean)
    if events is not None:
      events.log_event('train', f'{stage} epoch {epoch + 1}', {'stage': stage, 'epoch': epoch + 1, 'loss': mean})
  return trace


def load_training_samples(config: RunConfig, split: Optional[str] = 'train') -> List[PreparedSample]:
  manifest = config.manifest_path()
  if not manifest.is_file():
    raise FileNotFoundError(f'manifest not found: {manifest}; run "synth" first or set "manifest"')
  samples = filter_split(read_manifest(manifest), split)
  prepared = prepare_samples(samples, manifest.parent, config)
  usable = [item for item in prepared if item.ok]
  if len(usable) < len(prepared):
    logger.warning('Dropped %d unreadable training samples', len(prepared) - len(usable))
  return usable


def _rationale(sample: Sample) -> RationaleSequence:
  if sample.rationale:
    return RationaleSequence(ids=tuple(sample.rationale))
  return RationaleSequence.for_source(sample.source)


def train_toy_ctx(config: RunConfig, prepared: Sequence[PreparedSample], events: Optional[EventLogger] = None):
  """Stage ctx: fit the toy context model; returns (model, record)."""
  if not prepared:
    raise InvalidArgumentError('stage ctx needs at least one training sample')
  init_rng, order_rng = stage_rngs(config.seed, 'ctx')
  model = build_toy_context(config, ParameterStore()).initialize(init_rng)
  images = stack_images(prepared).astype(model.params.dtype)
  sequences = [_rationale(item.sample) for item in prepared]
  optimizer = SGD(model.params, [model.prefix], config.lr_ctx, config.momentum)

  def step(indices: np.ndarray) -> float:
    return model.loss_and_backward(images[indices], [sequences[i] for i in indices])

  record = StageRecord(stage='ctx', seed=config.seed, config=config.snapshot(), train_samples=len(prepared))
  record.initial_loss = model.sequence_loss(images, sequences)
  record.loss_trace = run_epochs('ctx', len(prepared), config.epochs_ctx, config.batch_size, order_rng, optimizer, step, events)
  record.final_loss = model.sequence_loss(images, sequences)
  record.steps = model.params.step
  record.fingerprints = {'ctx': model.params.fingerprint('ctx')}
  return model, record


def _face_dataset(prepared: Sequence[PreparedSample]):
  crops, labels = [], []
  for item in prepared:
    for crop in item.crops:
      crops.append(crop.pixels.data)
      labels.append(item.sample.label)
  return np.stack(crops), np.asarray(labels, dtype=np.float64)


def _mean_bce(model: FaceBranchModel, crops: np.ndarray, labels: np.ndarray, batch_size: int) -> float:
  logits = model.predict(crops, batch_size=max(batch_size, 32)).logits
  return bce_from_logits(logits, labels)[0]


def train_face(config: RunConfig, prepared: Sequence[PreparedSample], events: Optional[EventLogger] = None):
  """Stage face: BCE over every face crop, each crop labeled with its image's label."""
  if not prepared:
    raise InvalidArgumentError('stage face needs at least one training sample')
  init_rng, order_rng = stage_rngs(config.seed, 'face')
  model = build_face_model(config, ParameterStore()).initialize(init_rng)
  crops, labels = _face_dataset(prepared)
  crops = crops.astype(model.params.dtype)
  optimizer = SGD(model.params, [model.prefix], config.lr_face, config.momentum)

  def step(indices: np.ndarray) -> float:
    output = model.forward(crops[indices])
    loss, dlogits = bce_from_logits(output.logits, labels[indices])
    model.backward(output, dlogits)
    return loss

  record = StageRecord(stage='face', seed=config.seed, config=config.snapshot(), train_samples=int(crops.shape[0]))
  record.initial_loss = _mean_bce(model, crops, labels, config.batch_size)
  record.loss_trace = run_epochs('face', crops.shape[0], config.epochs_face, config.batch_size, order_rng, optimizer, step, events)
  record.final_loss = _mean_bce(model, crops, labels, config.batch_size)
  record.steps = model.params.step
  record.fingerprints = {'face': model.params.fingerprint('face')}
  return model, record


def train_fusion(
  config: RunConfig,
  face_model: FaceBranchModel,
  backend,
  prepared: Sequence[PreparedSample],
  events: Optional[EventLogger] = None
):
  """Stage fusion: branches frozen, features cached once, heads and fusion trained jointly."""
  frozen = {'face': face_model.params.fingerprint('face')}
  ctx_params = getattr(backend, 'params', None)
  if ctx_params is not None:
    frozen['ctx'] = ctx_params.fingerprint('ctx')

  table = require_rows(extract_features(face_model, backend, prepared, config.face_aggregation), 'stage fusion')
  labels = table.labels().astype(np.float64)
  init_rng, order_rng = stage_rngs(config.seed, 'fusion')
  store = init_fusion_store(config, init_rng)
  heads = build_heads(config, store)
  fusion = build_fusion(config, store)
  optimizer = SGD(store, [heads.prefix, fusion.prefix], config.lr_fusion, config.momentum)

  def step(indices: np.ndarray) -> float:
    logits, _, (project_cache, confidence_cache, fusion_cache) = fusion_forward(heads, fusion, table, indices)
    loss, dlogits = bce_from_logits(logits, labels[indices])
    _, df_ctx, dc = fusion.backward(dlogits, fusion_cache)
    heads.project_backward(df_ctx, project_cache)
    heads.confidence_backward(dc, confidence_cache)
    return loss

  def full_loss() -> float:
    logits, _, _ = fusion_forward(heads, fusion, table, range(len(table)))
    return bce_from_logits(logits, labels)[0]

  record = StageRecord(stage='fusion', seed=config.seed, config=config.snapshot(), train_samples=len(table))
  record.initial_loss = full_loss()
  record.loss_trace = run_epochs('fusion', len(table), config.epochs_fusion, config.batch_size, order_rng, optimizer, step, events)
  record.final_loss = full_loss()
  record.steps = store.step

  after = {'face': face_model.params.fingerprint('face')}
  if ctx_params is not None:
    after['ctx'] = ctx_params.fingerprint('ctx')
  if after != frozen:
    raise ForgeryDetError('frozen branch parameters changed during stage fusion')
  record.fingerprints = {**frozen, 'heads': store.fingerprint('heads'), 'fusion': store.fingerprint('fusion')}
  return store, record


class StageRunner:
  """Runs stages against one RunConfig and writes checkpoints plus reproducibility records."""

  def __init__(self, config: RunConfig, events: Optional[EventLogger] = None, monitor: Optional[ResourceMonitor] = None) -> None:
    self.config = config
    self.events = events
    self.monitor = monitor or ResourceMonitor()

  def _start(self, stage: str) -> None:
    snapshot = self.monitor.check(stage)
    logger.info('Starting stage %s (seed %d)', stage, self.config.seed)
    if self.events is not None:
      self.events.log_event('stage', f'{stage} start', {'stage': stage, 'resources': snapshot})

  def _finish(self, stage: str, params: ParameterStore, record: StageRecord, metadata: dict) -> StageResult:
    checkpoint = save_checkpoint(params, self.config.checkpoint_path(stage), {'stage': stage, 'config': record.config, **metadata})
    record.write(self.config.output_dir() / 'records' / f'{stage}.json')
    if self.events is not None:
      self.events.log_event('stage', f'{stage} done', {
        'stage': stage,
        'checkpoint': str(checkpoint),
        'initial_loss': record.initial_loss,
        'final_loss': record.final_loss,
        'steps': record.steps
      })
    return StageResult(stage=stage, checkpoint=checkpoint, record=record)

  def run(self, stage: str) -> StageResult:
    if stage not in STAGES:
      raise InvalidArgumentError(f'unknown stage {stage!r}; expected one of {STAGES}')
    self._start(stage)
    return getattr(self, f'run_{stage}')()

  def run_all(self) -> List[StageResult]:
    return [self.run(stage) for stage in STAGES]

  def run_ctx(self) -> StageResult:
    config = self.config
    if config.ctx_backend != 'toy':
      record = StageRecord(stage='ctx', seed=config.seed, config=config.snapshot())
      logger.info('Context backend %s has no trainable parameters; writing a marker checkpoint', config.ctx_backend)
      return self._finish('ctx', ParameterStore(), record, {'backend': config.ctx_backend})
    model, record = train_toy_ctx(config, load_training_samples(config), self.events)
    return self._finish('ctx', model.params, record, {'backend': 'toy'})

  def run_face(self) -> StageResult:
    model, record = train_face(self.config, load_training_samples(self.config), self.events)
    return self._finish('face', model.params, record, {})

  def run_fusion(self) -> StageResult:
    face_model = load_face_model(self.config)
    backend = load_context_backend(self.config)
    store, record = train_fusion(self.config, face_model, backend, load_training_samples(self.config), self.events)
    return self._finish('fusion', store, record, {'mode': self.config.fusion_mode.value})
