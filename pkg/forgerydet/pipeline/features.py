"""Frozen-branch feature extraction shared by fusion training and inference.

Face crops of every sample are scored in one batched pass; per-image face
evidence is aggregated by ``max`` (arg-max face's feature vector) or ``mean``.
Context outputs are encoded per full frame.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from forgerydet.core.errors import ContextLookupError, InvalidArgumentError, SampleFailureError
from forgerydet.models.ctx_backends import ContextBackend, encode_context
from forgerydet.models.ctx_branch import ContextOutput, CtxHeads
from forgerydet.models.face_moe import FaceBranchModel
from forgerydet.models.fusion import FusionModel
from forgerydet.pipeline.dataset import PreparedSample

logger = logging.getLogger(__name__)

AGGREGATIONS = ('max', 'mean')


def aggregate_faces(scores: np.ndarray, features: np.ndarray, rule: str = 'max') -> Tuple[float, np.ndarray, int]:
  """Image-level face score and feature vector; also returns the selected face index (-1 for mean)."""
  scores = np.asarray(scores, dtype=np.float64)
  if scores.ndim != 1 or scores.size == 0 or features.shape[0] != scores.size:
    raise InvalidArgumentError(f'need one feature row per face score, got {scores.shape} and {features.shape}')
  if rule == 'max':
    index = int(np.argmax(scores))
    return float(scores[index]), features[index], index
  if rule == 'mean':
    return float(scores.mean()), features.mean(axis=0), -1
  raise InvalidArgumentError(f'unknown face aggregation {rule!r}; expected one of {AGGREGATIONS}')


@dataclass
class SampleFeatures:
  sample_id: str
  face_score: float
  f_face: np.ndarray
  face_scores: List[float]
  gate_scores: List[List[List[float]]]
  context: ContextOutput
  selected_face: int


@dataclass
class FeatureTable:
  """Per-sample frozen features in input order plus the error records of samples that failed."""

  rows: List[SampleFeatures] = field(default_factory=list)
  prepared: List[PreparedSample] = field(default_factory=list)
  errors: List[Dict[str, str]] = field(default_factory=list)

  def __len__(self) -> int:
    return len(self.rows)

  def f_face(self) -> np.ndarray:
    return np.stack([row.f_face for row in self.rows])

  def h_s(self) -> np.ndarray:
    return np.stack([row.context.sentinel_state for row in self.rows])

  def f_clip(self) -> np.ndarray:
    return np.stack([row.context.global_visual for row in self.rows])

  def token_matrices(self) -> List[np.ndarray]:
    return [row.context.token_embeddings for row in self.rows]

  def labels(self) -> np.ndarray:
    return np.array([item.sample.label for item in self.prepared], dtype=np.int64)

  def sources(self) -> List[str]:
    return [item.sample.source for item in self.prepared]

  def face_scores(self) -> np.ndarray:
    return np.array([row.face_score for row in self.rows])


def extract_features(
  face_model: FaceBranchModel,
  backend: ContextBackend,
  prepared: Sequence[PreparedSample],
  aggregation: str = 'max',
  batch_size: int = 32
) -> FeatureTable:
  table = FeatureTable()
  usable = [item for item in prepared if item.ok]
  for item in prepared:
    if not item.ok:
      table.errors.append({'id': item.sample.id, 'error': item.error or 'unreadable sample'})
  if not usable:
    return table

  counts = [len(item.crops) for item in usable]
  crops = np.concatenate([item.crop_batch() for item in usable])
  output = face_model.predict(crops, batch_size=batch_size)
  probabilities = output.probabilities.astype(np.float64)
  bounds = np.cumsum([0] + counts)

  for position, item in enumerate(usable):
    start, stop = bounds[position], bounds[position + 1]
    try:
      context = encode_context(item.image, backend, item.sample.id)
    except (ContextLookupError, InvalidArgumentError) as exc:
      logger.warning('No context for %s: %s', item.sample.id, exc)
      table.errors.append({'id': item.sample.id, 'error': str(exc)})
      continue
    scores = probabilities[start:stop]
    score, feature, selected = aggregate_faces(scores, output.features[start:stop], aggregation)
    table.rows.append(SampleFeatures(
      sample_id=item.sample.id,
      face_score=score,
      f_face=feature,
      face_scores=[float(value) for value in scores],
      gate_scores=[gates[start:stop].astype(np.float64).tolist() for gates in output.gate_scores],
      context=context,
      selected_face=selected
    ))
    table.prepared.append(item)
  logger.info('Extracted frozen features for %d of %d samples', len(table), len(prepared))
  return table


def require_rows(table: FeatureTable, what: str) -> FeatureTable:
  if not table.rows:
    detail = table.errors[0]['error'] if table.errors else 'no samples'
    raise SampleFailureError(f'{what}: every sample failed ({detail})')
  return table


def fusion_forward(heads: CtxHeads, fusion: FusionModel, table: FeatureTable, indices: Sequence[int]):
  """Fusion logits and confidences for the selected rows plus the caches the backward pass needs."""
  rows = [table.rows[i] for i in indices]
  pooled, _ = heads.pool([row.context.token_embeddings for row in rows])
  f_ctx, project_cache = heads.project_forward(pooled)
  c, confidence_cache = heads.confidence_forward(
    np.stack([row.context.sentinel_state for row in rows]),
    np.stack([row.context.global_visual for row in rows])
  )
  f_face = np.stack([row.f_face for row in rows])
  logits, fusion_cache = fusion.forward(f_face, f_ctx, c)
  return logits, c, (project_cache, confidence_cache, fusion_cache)
